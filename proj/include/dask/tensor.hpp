#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dask/error.hpp"

namespace dask {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major array. The last dimension varies fastest.
template <typename Scalar>
struct BasicTensor {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Array data;

  BasicTensor() = default;

  explicit BasicTensor(Shape s) : shape(std::move(s)) {
    validate_shape();
    data = Array::Zero(shape_size(shape));
  }

  BasicTensor(Shape s, Array values) : shape(std::move(s)), data(std::move(values)) {
    validate_shape();
    if (data.size() != shape_size(shape)) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_string(shape));
    }
  }

  static BasicTensor scalar(Scalar v) {
    Array a(1);
    a(0) = v;
    return BasicTensor(Shape{}, std::move(a));
  }

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index i) const { return shape.at(static_cast<std::size_t>(i)); }

  Scalar item() const {
    if (data.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape));
    return data(0);
  }

  /// Rank-2 view, rows x cols, row-major.
  Eigen::Map<const RowMatrix<Scalar>> matrix() const {
    require_rank(2);
    return {data.data(), shape[0], shape[1]};
  }
  Eigen::Map<RowMatrix<Scalar>> matrix() {
    require_rank(2);
    return {data.data(), shape[0], shape[1]};
  }

  bool all_finite() const { return data.isFinite().all(); }

 private:
  void validate_shape() const {
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_string(shape));
    }
  }
  void require_rank(Index r) const {
    if (rank() != r) {
      throw ShapeError("expected rank " + std::to_string(r) + ", got shape " + shape_string(shape));
    }
  }
};

using Tensor = BasicTensor<double>;

// ---------------------------------------------------------------------------
// Reverse-mode gradient engine
// ---------------------------------------------------------------------------

struct Node {
  Tensor value;
  Eigen::ArrayXd grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(const Eigen::ArrayXd&)> backward;

  void accumulate(const Eigen::ArrayXd& delta) {
    if (grad.size() == 0) {
      grad = delta;
    } else {
      grad += delta;
    }
  }
};

/// Handle to a value that may participate in gradient computation.
/// Copies share the underlying node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  Index size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Eigen::ArrayXd& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Trainable leaf: receives gradients from every tape it is used on.
Var parameter(Tensor value);
/// Untracked leaf.
Var constant(Tensor value);

/// Ordered record of differentiable operations executed since construction.
/// In inference mode nothing is recorded and backward() is unavailable.
class Tape {
 public:
  enum class Mode { record, inference };

  explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::record; }
  std::size_t size() const { return nodes_.size(); }

  /// Records an op output. `backward` receives d(loss)/d(output) and must
  /// push contributions into the inputs. It is dropped when no input needs grad.
  Var record(Tensor value, std::initializer_list<const Var*> inputs,
             std::function<void(const Eigen::ArrayXd&)> backward);

  /// True when any of the inputs will receive a gradient on this tape.
  bool tracks(std::initializer_list<const Var*> inputs) const;

  /// Populates grad on every tracked leaf reachable from `loss`.
  void backward(const Var& loss);

 private:
  Mode mode_;
  bool consumed_ = false;
  std::vector<std::shared_ptr<Node>> nodes_;
};

// Elementwise
Var add(Tape& tape, const Var& a, const Var& b);
Var sub(Tape& tape, const Var& a, const Var& b);
Var mul(Tape& tape, const Var& a, const Var& b);
Var scale(Tape& tape, const Var& a, double s);
Var relu(Tape& tape, const Var& a);
Var abs(Tape& tape, const Var& a);
Var square(Tape& tape, const Var& a);
Var log(Tape& tape, const Var& a);

// Reductions to a scalar
Var sum(Tape& tape, const Var& a);
Var mean(Tape& tape, const Var& a);

// Linear algebra on rank-2 operands
Var matmul(Tape& tape, const Var& a, const Var& b);
Var transpose(Tape& tape, const Var& a);
/// x[B x in] * W[out x in]^T + b[out]
Var linear(Tape& tape, const Var& x, const Var& weight, const Var& bias);
/// Stacks `times` copies of a 1 x n row into a times x n matrix.
Var repeat_rows(Tape& tape, const Var& row, Index times);
Var normalize_rows(Tape& tape, const Var& a);
Var softmax_rows(Tape& tape, const Var& a);
Var log_softmax_rows(Tape& tape, const Var& a);

// Images, NCHW
/// Replicate-padded convolution. Output spatial size is ceil(H/stride) x ceil(W/stride).
Var conv2d(Tape& tape, const Var& input, const Var& weights, const Var& bias, Index stride = 1);
/// conv2d with stride 1; spatial size preserved.
Var conv2d_same(Tape& tape, const Var& input, const Var& weights, const Var& bias);
Var global_avg_pool(Tape& tape, const Var& input);
/// Convolves every sample with its own kernel, read from row b of `kernels`
/// starting at column `offset`: C*C*k*k weights followed by C biases.
Var per_sample_conv(Tape& tape, const Var& input, const Var& kernels, Index k, Index offset = 0);
/// out[b,c] = params[b,c] * x[b,c] + params[b,C+c]
Var per_sample_affine(Tape& tape, const Var& input, const Var& params);

// Losses
/// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Tape& tape, const Var& logits, std::span<const int> labels);
/// Batch-hard triplet loss on Euclidean distances; mean over anchors with
/// both a positive and a negative.
Var batch_hard_triplet(Tape& tape, const Var& features, std::span<const int> labels, double margin);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamOptions {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  AdamOptions options;
  std::vector<Eigen::ArrayXd> first_moment;
  std::vector<Eigen::ArrayXd> second_moment;
  std::int64_t step = 0;
};

OptimizerState make_optimizer_state(std::span<const Var> params, AdamOptions options = {});

/// One Adam update on every parameter, then clears their gradients.
void optimizer_step(std::span<Var> params, OptimizerState& state);

}  // namespace dask
