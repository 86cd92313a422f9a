#include "dask/rehearser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dask/synthbench.hpp"

namespace dask {

namespace {

constexpr Index kMinSide = 8;

Eigen::ArrayXd identity_encoding(const Rehearser& r) {
  if (r.kind == RehearserKind::stats_pred) {
    Eigen::ArrayXd e(2 * Image::channels);
    e << 1, 1, 1, 0, 0, 0;
    return e;
  }
  const Eigen::ArrayXd one = TransferKernel::identity(r.kernel_size).encode();
  const Index count = r.kind == RehearserKind::akpnet ? r.kernel_count : 1;
  return one.replicate(count, 1);
}

void require_min_size(Index h, Index w) {
  if (h < kMinSide || w < kMinSide) {
    throw ShapeError("rehearser input must be at least 8x8, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
}

}  // namespace

std::string to_string(RehearserKind kind) {
  switch (kind) {
    case RehearserKind::akpnet: return "akpnet";
    case RehearserKind::stats_pred: return "stats_pred";
    case RehearserKind::shared_conv: return "shared_conv";
  }
  return "akpnet";
}

RehearserKind rehearser_kind_from_string(const std::string& s) {
  if (s == "akpnet") return RehearserKind::akpnet;
  if (s == "stats_pred") return RehearserKind::stats_pred;
  if (s == "shared_conv") return RehearserKind::shared_conv;
  throw ConfigError("unknown rehearser kind '" + s + "'");
}

void RehearserConfig::validate() const {
  if (kernel_size <= 0 || kernel_size % 2 == 0) throw ConfigError("rehearser kernel size must be odd");
  if (kernel_count < 1) throw ConfigError("rehearser kernel count must be >= 1");
  if (epochs < 0) throw ConfigError("rehearser epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("rehearser batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("rehearser learning rate must be positive");
  if (!(blur_probability >= 0.0 && blur_probability <= 1.0)) {
    throw ConfigError("blur probability must lie in [0,1]");
  }
  if (!(blur_max_sigma >= 0.0)) throw ConfigError("blur sigma bound must be >= 0");
}

Index Rehearser::output_size() const {
  switch (kind) {
    case RehearserKind::akpnet: return kernel_count * TransferKernel::encoded_size(kernel_size);
    case RehearserKind::stats_pred: return 2 * Image::channels;
    case RehearserKind::shared_conv: return TransferKernel::encoded_size(kernel_size);
  }
  return 0;
}

Var Rehearser::predict(Tape& tape, const Var& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != Image::channels) {
    throw ShapeError("rehearser expects B x 3 x H x W, got " + shape_string(s));
  }
  require_min_size(s[2], s[3]);
  if (kind == RehearserKind::shared_conv) return repeat_rows(tape, shared_kernel, s[0]);
  // Backbone sees zero-centred pixels.
  Var x = add(tape, images, constant(Tensor(s, Eigen::ArrayXd::Constant(images.size(), -0.5))));
  for (const Conv& c : backbone) x = relu(tape, c(tape, x));
  return head(tape, global_avg_pool(tape, x));
}

Var Rehearser::transfer(Tape& tape, const Var& images) const {
  Var params = predict(tape, images);
  if (kind == RehearserKind::stats_pred) return per_sample_affine(tape, images, params);
  const Index per = TransferKernel::encoded_size(kernel_size);
  const Index count = kind == RehearserKind::akpnet ? kernel_count : 1;
  Var x = images;
  for (Index j = 0; j < count; ++j) x = per_sample_conv(tape, x, params, kernel_size, j * per);
  return x;
}

std::vector<Var> Rehearser::parameters() const {
  if (kind == RehearserKind::shared_conv) return {shared_kernel};
  std::vector<Var> out;
  for (const Conv& c : backbone) {
    out.push_back(c.weight);
    out.push_back(c.bias);
  }
  out.push_back(head.weight);
  out.push_back(head.bias);
  return out;
}

Rehearser make_rehearser(const RehearserConfig& cfg, Rng& rng) {
  cfg.validate();
  Rehearser r;
  r.kind = cfg.kind;
  r.kernel_size = cfg.kernel_size;
  r.kernel_count = cfg.kind == RehearserKind::akpnet ? cfg.kernel_count : 1;
  const Eigen::ArrayXd ident = identity_encoding(r);
  if (r.kind == RehearserKind::shared_conv) {
    r.shared_kernel = parameter(Tensor({1, ident.size()}, ident));
    return r;
  }
  const Index widths[] = {Image::channels, 8, 16, 32};
  for (int i = 0; i < 3; ++i) r.backbone.push_back(make_conv(widths[i], widths[i + 1], 3, 2, rng));
  r.head = make_dense(widths[3], r.output_size(), rng, 1e-3);
  r.head.bias.mutable_value().data = ident;
  return r;
}

Rehearser clone(const Rehearser& r) {
  Rehearser out;
  out.kind = r.kind;
  out.kernel_size = r.kernel_size;
  out.kernel_count = r.kernel_count;
  for (const Conv& c : r.backbone) out.backbone.push_back(deep_copy(c));
  if (r.head.weight) out.head = deep_copy(r.head);
  if (r.shared_kernel) out.shared_kernel = deep_copy(r.shared_kernel);
  return out;
}

std::vector<TransferKernel> predict_kernels(const Rehearser& net, const Image& img) {
  if (net.kind == RehearserKind::stats_pred) {
    throw ValueError("predict_kernels: a statistics rehearser predicts no kernels");
  }
  Tape tape(Tape::Mode::inference);
  const Tensor out = net.predict(tape, constant(to_tensor(img))).value();
  const Index per = TransferKernel::encoded_size(net.kernel_size);
  std::vector<TransferKernel> kernels;
  for (Index j = 0; j * per < out.size(); ++j) {
    kernels.push_back(TransferKernel::decode(
        std::span<const double>(out.data.data() + j * per, static_cast<std::size_t>(per)), net.kernel_size));
  }
  return kernels;
}

Image transfer(const Rehearser& net, const Image& img) {
  Tape tape(Tape::Mode::inference);
  return image_from_tensor(net.transfer(tape, constant(to_tensor(img))).value());
}

std::vector<Image> transfer(const Rehearser& net, std::span<const Image> images) {
  if (images.empty()) return {};
  Tape tape(Tape::Mode::inference);
  const Tensor out = net.transfer(tape, constant(to_tensor(images))).value();
  std::vector<Image> result;
  for (Index b = 0; b < out.dim(0); ++b) result.push_back(image_from_tensor(out, b));
  return result;
}

double reconstruction_loss(const Image& original, const Image& reconstructed, ReconstructionNorm norm) {
  if (!original.same_shape(reconstructed)) throw ShapeError("reconstruction_loss: image shapes differ");
  const Eigen::ArrayXd d = original.pixels - reconstructed.pixels;
  return norm == ReconstructionNorm::l1 ? d.abs().mean() : d.square().mean();
}

Var reconstruction_loss(Tape& tape, const Var& reconstructed, const Var& original, ReconstructionNorm norm) {
  Var d = sub(tape, reconstructed, original);
  return mean(tape, norm == ReconstructionNorm::l1 ? abs(tape, d) : square(tape, d));
}

Image augment_for_rehearsal(const Image& img, const DomainStats& ds, const RehearserConfig& cfg, Rng& rng) {
  Image out = augment_distribution(img, ds, rng, cfg.augment_form).image;
  if (bernoulli(rng, cfg.blur_probability)) out = gaussian_blur(out, uniform(rng, 0.0, cfg.blur_max_sigma));
  return clip01(std::move(out));
}

Rehearser train_rehearser(std::span<const Image> train, const RehearserConfig& cfg, Rng& rng,
                          RehearserHistory* history) {
  if (train.empty()) throw ValueError("train_rehearser: empty training set");
  cfg.validate();
  Rehearser net = make_rehearser(cfg, rng);
  if (cfg.epochs == 0) return net;
  const DomainStats ds = train.size() >= 2 ? domain_stats(train) : DomainStats{};
  std::vector<Var> params = net.parameters();
  OptimizerState opt = make_optimizer_state(params, {.learning_rate = cfg.learning_rate});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Image> originals, augmented;
      for (std::size_t i = start; i < end; ++i) {
        const Image& x = train[order[i]];
        originals.push_back(x);
        augmented.push_back(cfg.augment ? augment_for_rehearsal(x, ds, cfg, rng) : x);
      }
      Tape tape;
      Var recon = net.transfer(tape, constant(to_tensor(augmented)));
      Var loss = reconstruction_loss(tape, recon, constant(to_tensor(originals)), cfg.norm);
      tape.backward(loss);
      optimizer_step(params, opt);
      loss_sum += loss.item();
      ++batches;
    }
    for (const Var& p : params) {
      if (!p.value().all_finite()) {
        throw ValueError("train_rehearser: non-finite parameters after epoch " + std::to_string(epoch));
      }
    }
    if (history) history->epoch_loss.push_back(loss_sum / batches);
  }
  return net;
}

Rehearser train_rehearser(const DomainDataset& dataset, const RehearserConfig& cfg, Rng& rng,
                          RehearserHistory* history) {
  const std::vector<Image> train = dataset.images_of(Split::train);
  return train_rehearser(std::span<const Image>(train), cfg, rng, history);
}

}  // namespace dask
