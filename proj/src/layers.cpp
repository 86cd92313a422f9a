#include "dask/layers.hpp"

#include <cmath>

namespace dask {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < t.size(); ++i) t.data(i) = stddev * dist(rng);
  return t;
}

Conv make_conv(Index in, Index out, Index k, Index stride, std::mt19937_64& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(in * k * k));
  return {parameter(normal_tensor({out, in, k, k}, std, rng)), parameter(Tensor({out})), stride};
}

Dense make_dense(Index in, Index out, std::mt19937_64& rng, double weight_std) {
  return {parameter(normal_tensor({out, in}, weight_std, rng)), parameter(Tensor({out}))};
}

Var deep_copy(const Var& v) {
  return v.requires_grad() ? parameter(v.value()) : constant(v.value());
}

Conv deep_copy(const Conv& c) { return {deep_copy(c.weight), deep_copy(c.bias), c.stride}; }

Dense deep_copy(const Dense& d) { return {deep_copy(d.weight), deep_copy(d.bias)}; }

void blend_into(Var& dst, const Var& old, double lambda) {
  if (dst.shape() != old.shape()) {
    throw ShapeError("blend: shape mismatch " + shape_string(dst.shape()) + " vs " +
                     shape_string(old.shape()));
  }
  auto& d = dst.mutable_value().data;
  // Written as new + lambda (old - new) so that identical inputs and lambda = 0
  // are exact fixed points.
  if (lambda == 1.0) {
    d = old.value().data;
  } else {
    d += lambda * (old.value().data - d);
  }
}

}  // namespace dask
