#pragma once

#include <random>
#include <vector>

#include "dask/tensor.hpp"

namespace dask {

/// Replicate-padded convolution followed by nothing; callers add activations.
struct Conv {
  Var weight;  // out x in x k x k
  Var bias;    // out
  Index stride = 1;

  Var operator()(Tape& tape, const Var& x) const { return conv2d(tape, x, weight, bias, stride); }
};

struct Dense {
  Var weight;  // out x in
  Var bias;    // out

  Var operator()(Tape& tape, const Var& x) const { return linear(tape, x, weight, bias); }
};

/// He-normal weights, zero bias.
Conv make_conv(Index in, Index out, Index k, Index stride, std::mt19937_64& rng);
Dense make_dense(Index in, Index out, std::mt19937_64& rng, double weight_std);

Var deep_copy(const Var& v);
Conv deep_copy(const Conv& c);
Dense deep_copy(const Dense& d);

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

/// dst <- lambda * old + (1 - lambda) * dst, elementwise.
void blend_into(Var& dst, const Var& old, double lambda);

}  // namespace dask
