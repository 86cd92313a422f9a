#include "dask/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace dask {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

bool Tape::tracks(std::initializer_list<const Var*> inputs) const {
  if (!recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Var* v) { return v->requires_grad(); });
}

Var Tape::record(Tensor value, std::initializer_list<const Var*> inputs,
                 std::function<void(const Eigen::ArrayXd&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->leaf = false;
  if (tracks(inputs)) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    nodes_.push_back(node);
  }
  return Var(std::move(node));
}

void Tape::backward(const Var& loss) {
  if (!recording()) throw TapeError("backward on an inference-mode tape");
  if (consumed_) throw TapeError("backward already run on this tape");
  if (loss.size() != 1) {
    throw TapeError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
  }
  consumed_ = true;
  if (!loss.requires_grad()) return;
  if (!loss.node().leaf &&
      std::none_of(nodes_.begin(), nodes_.end(),
                   [&](const auto& n) { return n.get() == loss.node_ptr().get(); })) {
    throw TapeError("loss was not produced on this tape");
  }
  loss.node().accumulate(Eigen::ArrayXd::Ones(1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.size() == 0 || !n.backward) continue;
    n.backward(n.grad);
  }
  // Release intermediate buffers and closures; leaves keep their gradients.
  for (auto& n : nodes_) {
    n->backward = nullptr;
    n->grad.resize(0);
  }
  nodes_.clear();
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const Var& a, Index r, const char* op) {
  if (static_cast<Index>(a.shape().size()) != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_string(a.shape()));
  }
}

void push(const Var& v, const Eigen::ArrayXd& delta) {
  if (v.requires_grad()) v.node().accumulate(delta);
}

using RowMat = RowMatrix<double>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), a.value().data + b.value().data);
  return tape.record(std::move(out), {&a, &b}, [a, b](const Eigen::ArrayXd& g) {
    push(a, g);
    push(b, g);
  });
}

Var sub(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), a.value().data - b.value().data);
  return tape.record(std::move(out), {&a, &b}, [a, b](const Eigen::ArrayXd& g) {
    push(a, g);
    push(b, -g);
  });
}

Var mul(Tape& tape, const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), a.value().data * b.value().data);
  return tape.record(std::move(out), {&a, &b}, [a, b](const Eigen::ArrayXd& g) {
    if (a.requires_grad()) push(a, g * b.value().data);
    if (b.requires_grad()) push(b, g * a.value().data);
  });
}

Var scale(Tape& tape, const Var& a, double s) {
  Tensor out(a.shape(), a.value().data * s);
  return tape.record(std::move(out), {&a}, [a, s](const Eigen::ArrayXd& g) { push(a, g * s); });
}

Var relu(Tape& tape, const Var& a) {
  Tensor out(a.shape(), a.value().data.max(0.0));
  return tape.record(std::move(out), {&a}, [a](const Eigen::ArrayXd& g) {
    push(a, (a.value().data > 0.0).select(g, 0.0));
  });
}

Var abs(Tape& tape, const Var& a) {
  Tensor out(a.shape(), a.value().data.abs());
  return tape.record(std::move(out), {&a}, [a](const Eigen::ArrayXd& g) {
    const auto& x = a.value().data;
    push(a, g * ((x > 0.0).cast<double>() - (x < 0.0).cast<double>()));
  });
}

Var square(Tape& tape, const Var& a) {
  Tensor out(a.shape(), a.value().data.square());
  return tape.record(std::move(out), {&a},
                     [a](const Eigen::ArrayXd& g) { push(a, 2.0 * g * a.value().data); });
}

Var log(Tape& tape, const Var& a) {
  if ((a.value().data <= 0.0).any()) throw ValueError("log of non-positive value");
  Tensor out(a.shape(), a.value().data.log());
  return tape.record(std::move(out), {&a},
                     [a](const Eigen::ArrayXd& g) { push(a, g / a.value().data); });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Tape& tape, const Var& a) {
  Tensor out = Tensor::scalar(a.value().data.sum());
  const Index n = a.size();
  return tape.record(std::move(out), {&a},
                     [a, n](const Eigen::ArrayXd& g) { push(a, Eigen::ArrayXd::Constant(n, g(0))); });
}

Var mean(Tape& tape, const Var& a) {
  const Index n = a.size();
  Tensor out = Tensor::scalar(a.value().data.sum() / static_cast<double>(n));
  return tape.record(std::move(out), {&a}, [a, n](const Eigen::ArrayXd& g) {
    push(a, Eigen::ArrayXd::Constant(n, g(0) / static_cast<double>(n)));
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Tape& tape, const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  const Index m = a.shape()[0], n = b.shape()[1];
  Tensor out({m, n});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return tape.record(std::move(out), {&a, &b}, [a, b, m, n](const Eigen::ArrayXd& g) {
    CMapRow gm(g.data(), m, n);
    if (a.requires_grad()) {
      Eigen::ArrayXd da(a.size());
      MapRow(da.data(), m, a.shape()[1]).noalias() = gm * b.value().matrix().transpose();
      push(a, da);
    }
    if (b.requires_grad()) {
      Eigen::ArrayXd db(b.size());
      MapRow(db.data(), b.shape()[0], n).noalias() = a.value().matrix().transpose() * gm;
      push(b, db);
    }
  });
}

Var transpose(Tape& tape, const Var& a) {
  require_rank(a, 2, "transpose");
  const Index m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  out.matrix() = a.value().matrix().transpose();
  return tape.record(std::move(out), {&a}, [a, m, n](const Eigen::ArrayXd& g) {
    Eigen::ArrayXd da(m * n);
    MapRow(da.data(), m, n) = CMapRow(g.data(), n, m).transpose();
    push(a, da);
  });
}

Var linear(Tape& tape, const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const Index batch = x.shape()[0], in = x.shape()[1], out_dim = weight.shape()[0];
  if (weight.shape()[1] != in || bias.size() != out_dim) {
    throw ShapeError("linear: weight " + shape_string(weight.shape()) + " / bias " +
                     shape_string(bias.shape()) + " incompatible with input " +
                     shape_string(x.shape()));
  }
  Tensor out({batch, out_dim});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  out.matrix().rowwise() += bias.value().data.matrix().transpose();
  return tape.record(
      std::move(out), {&x, &weight, &bias},
      [x, weight, bias, batch, in, out_dim](const Eigen::ArrayXd& g) {
        CMapRow gm(g.data(), batch, out_dim);
        if (x.requires_grad()) {
          Eigen::ArrayXd dx(batch * in);
          MapRow(dx.data(), batch, in).noalias() = gm * weight.value().matrix();
          push(x, dx);
        }
        if (weight.requires_grad()) {
          Eigen::ArrayXd dw(out_dim * in);
          MapRow(dw.data(), out_dim, in).noalias() = gm.transpose() * x.value().matrix();
          push(weight, dw);
        }
        if (bias.requires_grad()) push(bias, gm.colwise().sum().transpose().array());
      });
}

Var repeat_rows(Tape& tape, const Var& row, Index times) {
  require_rank(row, 2, "repeat_rows");
  if (row.shape()[0] != 1 || times < 1) throw ShapeError("repeat_rows: expects a single row and times >= 1");
  const Index n = row.shape()[1];
  Tensor out({times, n});
  out.matrix() = row.value().matrix().replicate(times, 1);
  return tape.record(std::move(out), {&row}, [row, times, n](const Eigen::ArrayXd& g) {
    push(row, CMapRow(g.data(), times, n).colwise().sum().transpose().array());
  });
}

Var normalize_rows(Tape& tape, const Var& a) {
  require_rank(a, 2, "normalize_rows");
  const Index rows = a.shape()[0], cols = a.shape()[1];
  Eigen::VectorXd norms = a.value().matrix().rowwise().norm();
  for (Index i = 0; i < rows; ++i) {
    if (!(norms(i) > 0.0)) {
      throw ValueError("normalize_rows: row " + std::to_string(i) + " has zero norm");
    }
  }
  Tensor out(a.shape());
  out.matrix() = norms.cwiseInverse().asDiagonal() * a.value().matrix();
  RowMat y = out.matrix();
  return tape.record(std::move(out), {&a},
                     [a, y = std::move(y), norms, rows, cols](const Eigen::ArrayXd& g) {
                       CMapRow gm(g.data(), rows, cols);
                       Eigen::VectorXd dots = (gm.cwiseProduct(y)).rowwise().sum();
                       Eigen::ArrayXd da(rows * cols);
                       MapRow(da.data(), rows, cols) =
                           norms.cwiseInverse().asDiagonal() * (gm - dots.asDiagonal() * y);
                       push(a, da);
                     });
}

namespace {

RowMat row_softmax(const Eigen::Ref<const RowMat>& x) {
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  RowMat e = (x.colwise() - mx).array().exp().matrix();
  Eigen::VectorXd s = e.rowwise().sum();
  return s.cwiseInverse().asDiagonal() * e;
}

}  // namespace

Var softmax_rows(Tape& tape, const Var& a) {
  require_rank(a, 2, "softmax_rows");
  const Index rows = a.shape()[0], cols = a.shape()[1];
  Tensor out(a.shape());
  out.matrix() = row_softmax(a.value().matrix());
  RowMat y = out.matrix();
  return tape.record(std::move(out), {&a},
                     [a, y = std::move(y), rows, cols](const Eigen::ArrayXd& g) {
                       CMapRow gm(g.data(), rows, cols);
                       Eigen::VectorXd dots = gm.cwiseProduct(y).rowwise().sum();
                       Eigen::ArrayXd da(rows * cols);
                       MapRow(da.data(), rows, cols) =
                           y.cwiseProduct(gm - dots.replicate(1, cols));
                       push(a, da);
                     });
}

Var log_softmax_rows(Tape& tape, const Var& a) {
  require_rank(a, 2, "log_softmax_rows");
  const Index rows = a.shape()[0], cols = a.shape()[1];
  const auto x = a.value().matrix();
  Eigen::VectorXd mx = x.rowwise().maxCoeff();
  Eigen::VectorXd lse =
      mx + (x.colwise() - mx).array().exp().rowwise().sum().log().matrix();
  Tensor out(a.shape());
  out.matrix() = x.colwise() - lse;
  RowMat p = out.matrix().array().exp().matrix();
  return tape.record(std::move(out), {&a},
                     [a, p = std::move(p), rows, cols](const Eigen::ArrayXd& g) {
                       CMapRow gm(g.data(), rows, cols);
                       Eigen::VectorXd gs = gm.rowwise().sum();
                       Eigen::ArrayXd da(rows * cols);
                       MapRow(da.data(), rows, cols) = gm - gs.asDiagonal() * p;
                       push(a, da);
                     });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  Index batch, in_ch, height, width, out_ch, k, stride, out_h, out_w;
  Index radius() const { return (k - 1) / 2; }
  Index patch() const { return in_ch * k * k; }
  Index out_plane() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Var& input, const Var& weights, const Var& bias, Index stride) {
  require_rank(input, 4, "conv2d input");
  require_rank(weights, 4, "conv2d weights");
  const auto& is = input.shape();
  const auto& ws = weights.shape();
  if (ws[2] != ws[3]) throw ShapeError("conv2d: kernel must be square, got " + shape_string(ws));
  if (ws[2] % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(ws[2]));
  if (ws[1] != is[1]) {
    throw ShapeError("conv2d: weights " + shape_string(ws) + " do not match input channels " +
                     shape_string(is));
  }
  if (bias.size() != ws[0]) throw ShapeError("conv2d: bias length must equal output channels");
  if (stride < 1) throw ValueError("conv2d: stride must be positive");
  return {is[0], is[1], is[2], is[3], ws[0], ws[2], stride,
          (is[2] + stride - 1) / stride, (is[3] + stride - 1) / stride};
}

// Column matrix with one row per output location (b, m, n) and one column
// per patch tap (c, p, q); edge pixels replicated.
Eigen::MatrixXd im2col(const ConvGeometry& g, const double* x) {
  Eigen::MatrixXd cols(g.batch * g.out_plane(), g.patch());
  const Index r = g.radius();
  std::vector<Index> col_src(static_cast<std::size_t>(g.out_w));
  for (Index c = 0; c < g.in_ch; ++c) {
    for (Index p = 0; p < g.k; ++p) {
      for (Index q = 0; q < g.k; ++q) {
        const Index j = (c * g.k + p) * g.k + q;
        for (Index n = 0; n < g.out_w; ++n) {
          col_src[static_cast<std::size_t>(n)] = std::clamp(g.stride * n + q - r, Index{0}, g.width - 1);
        }
        double* dst = cols.col(j).data();
        for (Index b = 0; b < g.batch; ++b) {
          const double* plane = x + (b * g.in_ch + c) * g.height * g.width;
          for (Index m = 0; m < g.out_h; ++m) {
            const double* row = plane + std::clamp(g.stride * m + p - r, Index{0}, g.height - 1) * g.width;
            for (Index n = 0; n < g.out_w; ++n) *dst++ = row[col_src[static_cast<std::size_t>(n)]];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const ConvGeometry& g, const Eigen::MatrixXd& cols, double* dx) {
  const Index r = g.radius();
  for (Index c = 0; c < g.in_ch; ++c) {
    for (Index p = 0; p < g.k; ++p) {
      for (Index q = 0; q < g.k; ++q) {
        const Index j = (c * g.k + p) * g.k + q;
        const double* src = cols.col(j).data();
        for (Index b = 0; b < g.batch; ++b) {
          double* plane = dx + (b * g.in_ch + c) * g.height * g.width;
          for (Index m = 0; m < g.out_h; ++m) {
            double* row = plane + std::clamp(g.stride * m + p - r, Index{0}, g.height - 1) * g.width;
            for (Index n = 0; n < g.out_w; ++n) {
              row[std::clamp(g.stride * n + q - r, Index{0}, g.width - 1)] += *src++;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Tape& tape, const Var& input, const Var& weights, const Var& bias, Index stride) {
  const ConvGeometry g = conv_geometry(input, weights, bias, stride);
  Eigen::MatrixXd cols = im2col(g, input.value().data.data());
  CMapRow wmat(weights.value().data.data(), g.out_ch, g.patch());
  // (B*HoWo) x Cout, column-major: each output channel contiguous per batch.
  Eigen::MatrixXd out_t = cols * wmat.transpose();
  out_t.rowwise() += bias.value().data.matrix().transpose();

  Tensor out({g.batch, g.out_ch, g.out_h, g.out_w});
  const Index plane = g.out_plane();
  for (Index b = 0; b < g.batch; ++b) {
    for (Index o = 0; o < g.out_ch; ++o) {
      std::copy_n(out_t.col(o).data() + b * plane, plane, out.data.data() + (b * g.out_ch + o) * plane);
    }
  }
  if (!tape.tracks({&input, &weights, &bias})) cols.resize(0, 0);
  return tape.record(
      std::move(out), {&input, &weights, &bias},
      [input, weights, bias, g, cols = std::move(cols)](const Eigen::ArrayXd& grad) {
        const Index plane = g.out_plane();
        Eigen::MatrixXd grad_t(g.batch * plane, g.out_ch);
        for (Index b = 0; b < g.batch; ++b) {
          for (Index o = 0; o < g.out_ch; ++o) {
            std::copy_n(grad.data() + (b * g.out_ch + o) * plane, plane, grad_t.col(o).data() + b * plane);
          }
        }
        if (weights.requires_grad()) {
          Eigen::ArrayXd dw(g.out_ch * g.patch());
          MapRow(dw.data(), g.out_ch, g.patch()).noalias() = grad_t.transpose() * cols;
          push(weights, dw);
        }
        if (bias.requires_grad()) push(bias, grad_t.colwise().sum().transpose().array());
        if (input.requires_grad()) {
          CMapRow wmat(weights.value().data.data(), g.out_ch, g.patch());
          Eigen::MatrixXd dcols = grad_t * wmat;
          Eigen::ArrayXd dx = Eigen::ArrayXd::Zero(input.size());
          col2im_add(g, dcols, dx.data());
          push(input, dx);
        }
      });
}

Var conv2d_same(Tape& tape, const Var& input, const Var& weights, const Var& bias) {
  return conv2d(tape, input, weights, bias, 1);
}

Var global_avg_pool(Tape& tape, const Var& input) {
  require_rank(input, 4, "global_avg_pool");
  const auto& s = input.shape();
  const Index rows = s[0] * s[1], plane = s[2] * s[3];
  CMapRow x(input.value().data.data(), rows, plane);
  Tensor out({s[0], s[1]}, x.rowwise().mean().array());
  return tape.record(std::move(out), {&input}, [input, rows, plane](const Eigen::ArrayXd& g) {
    Eigen::ArrayXd dx(rows * plane);
    MapRow(dx.data(), rows, plane) = (g / static_cast<double>(plane)).matrix().replicate(1, plane);
    push(input, dx);
  });
}

Var per_sample_conv(Tape& tape, const Var& input, const Var& kernels, Index k, Index offset) {
  require_rank(input, 4, "per_sample_conv input");
  require_rank(kernels, 2, "per_sample_conv kernels");
  if (k <= 0 || k % 2 == 0) throw ShapeError("per_sample_conv: kernel size must be odd");
  const auto& s = input.shape();
  const Index batch = s[0], ch = s[1], h = s[2], w = s[3];
  const Index per_kernel = ch * ch * k * k + ch;
  if (kernels.shape()[0] != batch || offset < 0 || kernels.shape()[1] < offset + per_kernel) {
    throw ShapeError("per_sample_conv: kernel rows " + shape_string(kernels.shape()) +
                     " incompatible with input " + shape_string(s));
  }
  const Index r = (k - 1) / 2, stride = kernels.shape()[1], plane = h * w;
  const double* x = input.value().data.data();
  const double* kp = kernels.value().data.data();
  Tensor out(s);
  double* y = out.data.data();
  for (Index b = 0; b < batch; ++b) {
    const double* kb = kp + b * stride + offset;
    for (Index o = 0; o < ch; ++o) {
      double* yo = y + (b * ch + o) * plane;
      std::fill_n(yo, plane, kb[ch * ch * k * k + o]);
      for (Index c = 0; c < ch; ++c) {
        const double* xc = x + (b * ch + c) * plane;
        for (Index p = 0; p < k; ++p) {
          for (Index q = 0; q < k; ++q) {
            const double wv = kb[((o * ch + c) * k + p) * k + q];
            for (Index m = 0; m < h; ++m) {
              const double* row = xc + std::clamp(m + p - r, Index{0}, h - 1) * w;
              double* yrow = yo + m * w;
              for (Index n = 0; n < w; ++n) yrow[n] += wv * row[std::clamp(n + q - r, Index{0}, w - 1)];
            }
          }
        }
      }
    }
  }
  return tape.record(
      std::move(out), {&input, &kernels},
      [input, kernels, batch, ch, h, w, k, r, stride, plane, offset](const Eigen::ArrayXd& g) {
        const double* x = input.value().data.data();
        const double* kp = kernels.value().data.data();
        Eigen::ArrayXd dk;
        Eigen::ArrayXd dx;
        if (kernels.requires_grad()) dk = Eigen::ArrayXd::Zero(kernels.size());
        if (input.requires_grad()) dx = Eigen::ArrayXd::Zero(input.size());
        for (Index b = 0; b < batch; ++b) {
          const double* kb = kp + b * stride + offset;
          for (Index o = 0; o < ch; ++o) {
            const double* go = g.data() + (b * ch + o) * plane;
            if (dk.size()) dk(b * stride + offset + ch * ch * k * k + o) += Eigen::Map<const Eigen::ArrayXd>(go, plane).sum();
            for (Index c = 0; c < ch; ++c) {
              const double* xc = x + (b * ch + c) * plane;
              for (Index p = 0; p < k; ++p) {
                for (Index q = 0; q < k; ++q) {
                  const Index widx = ((o * ch + c) * k + p) * k + q;
                  double acc = 0.0;
                  const double wv = kb[widx];
                  for (Index m = 0; m < h; ++m) {
                    const Index sm = std::clamp(m + p - r, Index{0}, h - 1);
                    const double* row = xc + sm * w;
                    const double* grow = go + m * w;
                    for (Index n = 0; n < w; ++n) {
                      const Index sn = std::clamp(n + q - r, Index{0}, w - 1);
                      acc += grow[n] * row[sn];
                      if (dx.size()) dx((b * ch + c) * plane + sm * w + sn) += wv * grow[n];
                    }
                  }
                  if (dk.size()) dk(b * stride + offset + widx) += acc;
                }
              }
            }
          }
        }
        if (dk.size()) push(kernels, dk);
        if (dx.size()) push(input, dx);
      });
}

Var per_sample_affine(Tape& tape, const Var& input, const Var& params) {
  require_rank(input, 4, "per_sample_affine input");
  require_rank(params, 2, "per_sample_affine params");
  const auto& s = input.shape();
  const Index batch = s[0], ch = s[1], plane = s[2] * s[3];
  if (params.shape()[0] != batch || params.shape()[1] != 2 * ch) {
    throw ShapeError("per_sample_affine: params " + shape_string(params.shape()) +
                     " incompatible with input " + shape_string(s));
  }
  Tensor out(s);
  const auto& x = input.value().data;
  const auto& pr = params.value().data;
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < ch; ++c) {
      const Index base = (b * ch + c) * plane;
      out.data.segment(base, plane) = pr(b * 2 * ch + c) * x.segment(base, plane) + pr(b * 2 * ch + ch + c);
    }
  }
  return tape.record(std::move(out), {&input, &params},
                     [input, params, batch, ch, plane](const Eigen::ArrayXd& g) {
                       const auto& x = input.value().data;
                       const auto& pr = params.value().data;
                       Eigen::ArrayXd dp = Eigen::ArrayXd::Zero(params.size());
                       Eigen::ArrayXd dx(input.size());
                       for (Index b = 0; b < batch; ++b) {
                         for (Index c = 0; c < ch; ++c) {
                           const Index base = (b * ch + c) * plane;
                           const auto gs = g.segment(base, plane);
                           dp(b * 2 * ch + c) = (gs * x.segment(base, plane)).sum();
                           dp(b * 2 * ch + ch + c) = gs.sum();
                           dx.segment(base, plane) = gs * pr(b * 2 * ch + c);
                         }
                       }
                       push(params, dp);
                       push(input, dx);
                     });
}

// ---------------------------------------------------------------------------
// Losses

Var cross_entropy(Tape& tape, const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const Index rows = logits.shape()[0], classes = logits.shape()[1];
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("cross_entropy: label count differs from batch size");
  }
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw ValueError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    }
  }
  RowMat p = row_softmax(logits.value().matrix());
  const auto x = logits.value().matrix();
  double total = 0.0;
  for (Index i = 0; i < rows; ++i) {
    const double mx = x.row(i).maxCoeff();
    const double lse = mx + std::log((x.row(i).array() - mx).exp().sum());
    total += lse - x(i, labels[static_cast<std::size_t>(i)]);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(Tensor::scalar(total / static_cast<double>(rows)), {&logits},
                     [logits, p = std::move(p), lab = std::move(lab), rows, classes](
                         const Eigen::ArrayXd& g) {
                       RowMat d = p;
                       for (Index i = 0; i < rows; ++i) d(i, lab[static_cast<std::size_t>(i)]) -= 1.0;
                       d *= g(0) / static_cast<double>(rows);
                       push(logits, Eigen::Map<const Eigen::ArrayXd>(d.data(), rows * classes));
                     });
}

Var batch_hard_triplet(Tape& tape, const Var& features, std::span<const int> labels, double margin) {
  require_rank(features, 2, "batch_hard_triplet");
  const Index rows = features.shape()[0], dim = features.shape()[1];
  if (static_cast<Index>(labels.size()) != rows) {
    throw ShapeError("batch_hard_triplet: label count differs from batch size");
  }
  const auto f = features.value().matrix();
  Eigen::MatrixXd dist(rows, rows);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < rows; ++j) dist(i, j) = (f.row(i) - f.row(j)).norm();
  }
  struct Active {
    Index anchor, pos, neg;
  };
  std::vector<Active> active;
  double total = 0.0;
  Index valid = 0;
  for (Index a = 0; a < rows; ++a) {
    Index pos = -1, neg = -1;
    for (Index j = 0; j < rows; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    if (pos < 0 || neg < 0) continue;
    ++valid;
    const double l = dist(a, pos) - dist(a, neg) + margin;
    if (l > 0.0) {
      total += l;
      active.push_back({a, pos, neg});
    }
  }
  if (valid == 0) throw ValueError("batch_hard_triplet: no anchor has both a positive and a negative");
  return tape.record(
      Tensor::scalar(total / static_cast<double>(valid)), {&features},
      [features, active = std::move(active), dist = std::move(dist), rows, dim, valid](
          const Eigen::ArrayXd& g) {
        const auto f = features.value().matrix();
        Eigen::ArrayXd d = Eigen::ArrayXd::Zero(rows * dim);
        MapRow dm(d.data(), rows, dim);
        const double w = g(0) / static_cast<double>(valid);
        auto pull = [&](Index a, Index j, double coef) {
          const double dij = dist(a, j);
          if (dij <= 0.0) return;  // subgradient 0 at coincident points
          Eigen::RowVectorXd u = (f.row(a) - f.row(j)) / dij;
          dm.row(a) += coef * u;
          dm.row(j) -= coef * u;
        };
        for (const auto& t : active) {
          pull(t.anchor, t.pos, w);
          pull(t.anchor, t.neg, -w);
        }
        push(features, d);
      });
}

// ---------------------------------------------------------------------------
// Adam

OptimizerState make_optimizer_state(std::span<const Var> params, AdamOptions options) {
  if (!(options.learning_rate > 0.0)) throw ValueError("learning rate must be positive");
  OptimizerState state;
  state.options = options;
  for (const Var& p : params) {
    state.first_moment.push_back(Eigen::ArrayXd::Zero(p.size()));
    state.second_moment.push_back(Eigen::ArrayXd::Zero(p.size()));
  }
  return state;
}

void optimizer_step(std::span<Var> params, OptimizerState& state) {
  if (params.size() != state.first_moment.size()) {
    throw ShapeError("optimizer_step: parameter count differs from optimizer state");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      throw TapeError("optimizer_step: parameter " + std::to_string(i) + " has no gradient");
    }
    if (state.first_moment[i].size() != params[i].size()) {
      throw ShapeError("optimizer_step: moment shape differs from parameter " + std::to_string(i));
    }
  }
  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Eigen::ArrayXd& g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.square();
    params[i].mutable_value().data -= o.learning_rate * (m / c1) / ((v / c2).sqrt() + o.epsilon);
    params[i].zero_grad();
  }
}

}  // namespace dask
