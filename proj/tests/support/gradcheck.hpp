#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dask/image.hpp"
#include "dask/rehearser.hpp"
#include "dask/reid.hpp"
#include "dask/tensor.hpp"

namespace dask::testing {

/// Scalar-valued function of the inputs, built on `tape`.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCase {
  std::string name;
  /// Fresh random inputs for one trial.
  std::function<std::vector<Tensor>(Rng&)> inputs;
  /// Builds the loss; may draw fixed auxiliary data from the rng it captured.
  std::function<ScalarFn(Rng&)> make;
};

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data(i) = uniform(rng, lo, hi);
  return t;
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) with central
/// differences of step h; 0 when both gradients vanish.
inline double gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-6) {
  std::vector<Var> params;
  for (const Tensor& t : inputs) params.push_back(parameter(t));
  {
    Tape tape;
    tape.backward(f(tape, params));
  }
  auto eval = [&](const std::vector<Tensor>& xs) {
    std::vector<Var> vs;
    for (const Tensor& t : xs) vs.push_back(constant(t));
    Tape tape(Tape::Mode::inference);
    return f(tape, vs).item();
  };
  double diff2 = 0.0;
  double an2 = 0.0;
  double nu2 = 0.0;
  std::vector<Tensor> probe = inputs;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const Eigen::ArrayXd analytic =
        params[p].has_grad() ? params[p].grad() : Eigen::ArrayXd::Zero(inputs[p].size()).eval();
    for (Index i = 0; i < inputs[p].size(); ++i) {
      const double x = inputs[p].data(i);
      probe[p].data(i) = x + h;
      const double up = eval(probe);
      probe[p].data(i) = x - h;
      const double down = eval(probe);
      probe[p].data(i) = x;
      const double numeric = (up - down) / (2.0 * h);
      diff2 += (analytic(i) - numeric) * (analytic(i) - numeric);
      an2 += analytic(i) * analytic(i);
      nu2 += numeric * numeric;
    }
  }
  const double denom = std::sqrt(std::max(an2, nu2));
  return denom < 1e-12 ? 0.0 : std::sqrt(diff2) / denom;
}

/// sum(out * R) for a fixed random R: exercises the full Jacobian.
inline Var project(Tape& tape, const Var& out, const Tensor& r) { return sum(tape, mul(tape, out, constant(r))); }

/// sum(op(v) * R) for a fixed random R drawn on first use.
inline ScalarFn projected(std::function<Var(Tape&, const std::vector<Var>&)> op, Rng& rng) {
  auto r = std::make_shared<Tensor>();
  auto seed = rng();
  return [op = std::move(op), r, seed](Tape& tape, const std::vector<Var>& v) {
    Var out = op(tape, v);
    if (r->shape != out.shape()) {
      Rng local(seed);
      *r = random_tensor(out.shape(), local);
    }
    return project(tape, out, *r);
  };
}

/// Labels 0..ids-1, each repeated `per` times.
inline std::vector<int> grouped_labels(int ids, int per) {
  std::vector<int> out;
  for (int i = 0; i < ids; ++i) out.insert(out.end(), static_cast<std::size_t>(per), i);
  return out;
}

std::vector<GradCase> gradient_catalog();

}  // namespace dask::testing
