#pragma once

#include <span>
#include <string>
#include <vector>

#include "dask/image.hpp"
#include "dask/layers.hpp"

namespace dask {

struct DomainDataset;

/// What the rehearser predicts for each image.
enum class RehearserKind {
  akpnet,       ///< N_k full C x C x k x k transfer kernels per image
  stats_pred,   ///< per-image channel scale and shift only
  shared_conv,  ///< one free transfer kernel shared by all images
};

std::string to_string(RehearserKind kind);
RehearserKind rehearser_kind_from_string(const std::string& s);

enum class ReconstructionNorm { l1, l2 };

struct RehearserConfig {
  RehearserKind kind = RehearserKind::akpnet;
  Index kernel_size = 3;
  Index kernel_count = 1;
  int epochs = 50;
  int batch_size = 8;
  double learning_rate = 3e-4;
  AugmentForm augment_form = AugmentForm::shift_scale;
  double blur_probability = 0.5;
  double blur_max_sigma = 1.5;
  ReconstructionNorm norm = ReconstructionNorm::l1;
  /// When false the network sees x' = x (used to check the identity solution is reachable).
  bool augment = true;

  void validate() const;
};

/// Adaptive kernel prediction network and its two ablation baselines.
struct Rehearser {
  RehearserKind kind = RehearserKind::akpnet;
  Index kernel_size = 3;
  Index kernel_count = 1;
  std::vector<Conv> backbone;  // empty for shared_conv
  Dense head;                  // unused for shared_conv
  Var shared_kernel;           // 1 x encoded_size, shared_conv only

  /// Raw predictions, one row per image: N_k encoded kernels, or 6 affine
  /// coefficients for stats_pred.
  Var predict(Tape& tape, const Var& images) const;
  /// Restyles a B x 3 x H x W batch; kernels are applied in sequence.
  Var transfer(Tape& tape, const Var& images) const;

  std::vector<Var> parameters() const;
  Index output_size() const;
};

/// Identity-offset initialization: head weights ~ N(0, 1e-3^2), head bias
/// encodes the identity transform.
Rehearser make_rehearser(const RehearserConfig& cfg, Rng& rng);
Rehearser clone(const Rehearser& r);

std::vector<TransferKernel> predict_kernels(const Rehearser& net, const Image& img);
Image transfer(const Rehearser& net, const Image& img);
std::vector<Image> transfer(const Rehearser& net, std::span<const Image> images);

double reconstruction_loss(const Image& original, const Image& reconstructed,
                           ReconstructionNorm norm = ReconstructionNorm::l1);
Var reconstruction_loss(Tape& tape, const Var& reconstructed, const Var& original,
                        ReconstructionNorm norm = ReconstructionNorm::l1);

/// x' = clip(blur(augment_distribution(x))), blur applied with probability
/// cfg.blur_probability and sigma ~ U[0, cfg.blur_max_sigma].
Image augment_for_rehearsal(const Image& img, const DomainStats& ds, const RehearserConfig& cfg, Rng& rng);

struct RehearserHistory {
  std::vector<double> epoch_loss;
};

/// Self-supervised training: reconstruct x from its augmented version.
Rehearser train_rehearser(std::span<const Image> train, const RehearserConfig& cfg, Rng& rng,
                          RehearserHistory* history = nullptr);
/// Trains on the train split; labels are not used.
Rehearser train_rehearser(const DomainDataset& dataset, const RehearserConfig& cfg, Rng& rng,
                          RehearserHistory* history = nullptr);

}  // namespace dask
