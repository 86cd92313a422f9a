#include "dask/reid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

namespace dask {

Var ReidModel::features(Tape& tape, const Var& images) const {
  // Zero-centred input.
  Var x = add(tape, images, constant(Tensor(images.shape(), Eigen::ArrayXd::Constant(images.size(), -0.5))));
  for (const Conv& c : extractor) x = relu(tape, c(tape, x));
  return embedding(tape, global_avg_pool(tape, x));
}

std::vector<Var> ReidModel::extractor_parameters() const {
  std::vector<Var> out;
  for (const Conv& c : extractor) {
    out.push_back(c.weight);
    out.push_back(c.bias);
  }
  out.push_back(embedding.weight);
  out.push_back(embedding.bias);
  return out;
}

std::vector<Var> ReidModel::parameters() const {
  std::vector<Var> out = extractor_parameters();
  out.push_back(classifier.weight);
  out.push_back(classifier.bias);
  return out;
}

ReidModel make_reid_model(const ReidArchitecture& arch, Index num_classes, Rng& rng) {
  if (arch.channels.size() < 2 || arch.channels.front() != Image::channels) {
    throw ShapeError("reid architecture must start from 3 input channels");
  }
  ReidModel m;
  for (std::size_t i = 0; i + 1 < arch.channels.size(); ++i) {
    m.extractor.push_back(make_conv(arch.channels[i], arch.channels[i + 1], 3, 2, rng));
  }
  const Index last = arch.channels.back();
  m.embedding = make_dense(last, arch.embedding_dim, rng, std::sqrt(1.0 / static_cast<double>(last)));
  reset_classifier(m, num_classes, rng);
  return m;
}

ReidModel clone(const ReidModel& m) {
  ReidModel out;
  for (const Conv& c : m.extractor) out.extractor.push_back(deep_copy(c));
  out.embedding = deep_copy(m.embedding);
  out.classifier = deep_copy(m.classifier);
  return out;
}

void reset_classifier(ReidModel& m, Index num_classes, Rng& rng) {
  if (num_classes < 1) throw ValueError("classifier needs at least one class");
  m.classifier = make_dense(m.embedding_dim(), num_classes, rng, std::sqrt(1.0 / static_cast<double>(m.embedding_dim())));
}

FeatureBatch extract_features(const ReidModel& model, std::span<const Image> images,
                              std::span<const int> labels, Index chunk) {
  if (images.empty()) throw ValueError("extract_features: empty batch");
  if (labels.size() != images.size()) throw ShapeError("extract_features: label count differs");
  const Index n = static_cast<Index>(images.size());
  FeatureBatch fb;
  fb.features.resize(n, model.embedding_dim());
  fb.labels.assign(labels.begin(), labels.end());
  for (Index start = 0; start < n; start += chunk) {
    const Index len = std::min(chunk, n - start);
    std::vector<Image> part;
    part.reserve(static_cast<std::size_t>(len));
    for (Index i = 0; i < len; ++i) part.push_back(clip01(images[static_cast<std::size_t>(start + i)]));
    Tape tape(Tape::Mode::inference);
    Var f = model.features(tape, constant(to_tensor(part)));
    fb.features.middleRows(start, len) = f.value().matrix();
  }
  return fb;
}

Var similarity_matrix(Tape& tape, const Var& features) {
  if (features.shape().size() != 2 || features.shape()[0] < 2) {
    throw ShapeError("similarity_matrix: need at least two feature rows");
  }
  Var n = normalize_rows(tape, features);
  return matmul(tape, n, transpose(tape, n));
}

RowMatrix<double> similarity_matrix(const FeatureBatch& fb) {
  Tape tape(Tape::Mode::inference);
  Var f = constant(Tensor({fb.features.rows(), fb.features.cols()},
                          Eigen::Map<const Eigen::ArrayXd>(fb.features.data(), fb.features.size())));
  return similarity_matrix(tape, f).value().matrix();
}

Var skd_loss(Tape& tape, const RowMatrix<double>& s_old, const Var& s_new, double tau) {
  if (!(tau > 0.0)) throw ValueError("skd_loss: temperature must be positive");
  if (s_new.shape().size() != 2 || s_old.rows() != s_new.shape()[0] ||
      s_old.cols() != s_new.shape()[1]) {
    throw ShapeError("skd_loss: similarity matrices differ in shape");
  }
  const Index rows = s_old.rows();
  Tape scratch(Tape::Mode::inference);
  Var teacher_logits = constant(Tensor({rows, s_old.cols()},
                                       Eigen::Map<const Eigen::ArrayXd>(s_old.data(), s_old.size())));
  const Tensor log_p = log_softmax_rows(scratch, scale(scratch, teacher_logits, 1.0 / tau)).value();
  Tensor p(log_p.shape, log_p.data.exp());
  const double entropy_term = (p.data * log_p.data).sum();

  Var log_q = log_softmax_rows(tape, scale(tape, s_new, 1.0 / tau));
  Var cross = sum(tape, mul(tape, constant(std::move(p)), log_q));
  Var kl = sub(tape, constant(Tensor::scalar(entropy_term)), cross);
  return scale(tape, kl, 1.0 / static_cast<double>(rows));
}

double skd_loss(const RowMatrix<double>& s_old, const RowMatrix<double>& s_new, double tau) {
  Tape tape(Tape::Mode::inference);
  Var s = constant(Tensor({s_new.rows(), s_new.cols()},
                          Eigen::Map<const Eigen::ArrayXd>(s_new.data(), s_new.size())));
  return skd_loss(tape, s_old, s, tau).item();
}

namespace {

Var as_var(const RowMatrix<double>& m) {
  return constant(Tensor({m.rows(), m.cols()}, Eigen::Map<const Eigen::ArrayXd>(m.data(), m.size())));
}

}  // namespace

double triplet_loss(const FeatureBatch& fb, double margin) {
  Tape tape(Tape::Mode::inference);
  return batch_hard_triplet(tape, as_var(fb.features), fb.labels, margin).item();
}

Var reid_loss(Tape& tape, const Var& features, const Var& logits, std::span<const int> labels,
              double margin) {
  return add(tape, batch_hard_triplet(tape, features, labels, margin),
             cross_entropy(tape, logits, labels));
}

double reid_loss(const FeatureBatch& fb, const RowMatrix<double>& logits, double margin) {
  Tape tape(Tape::Mode::inference);
  return reid_loss(tape, as_var(fb.features), as_var(logits), fb.labels, margin).item();
}

double total_loss(const LossTerms& real, const std::optional<LossTerms>& rehearsed, double alpha,
                  double beta) {
  double l = real.reid + alpha * real.skd;
  if (rehearsed) l += beta * (rehearsed->reid + alpha * rehearsed->skd);
  return l;
}

void ema_fuse(const ReidModel& old_model, ReidModel& new_model, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValueError("ema_fuse: lambda must lie in [0,1]");
  std::vector<Var> old_p = old_model.extractor_parameters();
  std::vector<Var> new_p = new_model.extractor_parameters();
  if (old_p.size() != new_p.size()) throw ShapeError("ema_fuse: extractor layouts differ");
  for (std::size_t i = 0; i < old_p.size(); ++i) {
    if (old_p[i].shape() != new_p[i].shape()) throw ShapeError("ema_fuse: parameter shapes differ");
  }
  for (std::size_t i = 0; i < old_p.size(); ++i) blend_into(new_p[i], old_p[i], lambda);
}

}  // namespace dask
