#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dask/rehearser.hpp"
#include "dask/reid.hpp"
#include "dask/synthbench.hpp"

namespace dask {

/// Source of the second ("old-style") training stream.
enum class Variant {
  baseline,     ///< no second stream
  style_aug,    ///< statistics augmentation of the new batch
  shared_conv,  ///< one learned kernel per old domain
  stats_pred,   ///< per-image predicted channel scale and shift
  dask,         ///< per-image predicted transfer kernels
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct VariantSpec {
  Variant variant = Variant::dask;
  bool use_rehearsed_reid = true;
  bool use_rehearsed_skd = true;

  /// Variant with default flags: on for every variant except baseline.
  static VariantSpec of(Variant v);
  /// Baseline forces both flags off.
  VariantSpec normalized() const;
  bool has_rehearsed_stream() const;
  /// Whether the variant trains a rehearser after each step.
  bool needs_rehearser() const;
  /// Short row label, e.g. "dask" or "dask[reid*]".
  std::string label() const;
};

/// Rehearser trained by a variant (akpnet for those that train none).
RehearserKind rehearser_kind(Variant v);

/// When ema_fuse runs within a step.
enum class EmaCadence { epoch, step };

std::string to_string(EmaCadence c);
EmaCadence ema_cadence_from_string(const std::string& s);

struct TrainConfig {
  double alpha = 1.0;
  double beta = 4.5;
  double lambda_ema = 0.5;
  EmaCadence ema_cadence = EmaCadence::step;
  double margin = 0.3;
  double tau = 1.0;
  int epochs_first = 80;
  int epochs_later = 60;
  int P = 4;
  int K = 4;
  double learning_rate = 3e-4;
  bool geometric = true;
  GeometricAugment augment;
  ReidArchitecture arch;
  /// kind is overridden by the variant.
  RehearserConfig rehearser;
  int retained_capacity = 1;

  void validate() const;
};

struct StepRecord {
  int step = 0;
  std::string domain;
  std::vector<double> epoch_loss;
  std::vector<double> rehearser_loss;
};

struct LifelongState {
  int step = 0;
  ReidModel model;
  /// Oldest first.
  std::vector<Rehearser> rehearsers;
  std::vector<StepRecord> history;
};

/// Random PK batches: P distinct identities, K images each (with replacement
/// only when an identity has fewer than K images). floor(n / (P K)) batches.
std::vector<std::vector<std::size_t>> pk_batches(std::span<const int> labels, int P, int K, Rng& rng);

/// Transfers a batch with one uniformly chosen rehearser; outputs clipped.
std::vector<Image> generate_old_style(std::span<const Rehearser> rehearsers, std::span<const Image> batch,
                                      Rng& rng);

/// One lifelong step on `dataset` (train split). Advances state.step.
LifelongState run_step(LifelongState state, const DomainDataset& dataset, const TrainConfig& cfg,
                       const VariantSpec& variant, Rng& rng);

using StepCallback = std::function<void(const LifelongState&)>;

struct SequenceResult {
  LifelongState state;
  MetricsReport report;
};

SequenceResult run_sequence(std::span<const DomainDataset> seen, std::span<const DomainDataset> unseen,
                            const TrainConfig& cfg, const VariantSpec& variant, Rng& rng,
                            const StepCallback& on_step = {});

/// Plain sequential supervised fine-tuning: L_ReID only, no old model, no
/// fusion, no rehearsal. Consumes `rng` exactly like run_sequence.
SequenceResult run_finetune(std::span<const DomainDataset> seen, std::span<const DomainDataset> unseen,
                            const TrainConfig& cfg, Rng& rng);

struct AblationEntry {
  VariantSpec spec;
  Index kernel_count = 1;
  std::string label;
};

struct AblationRow {
  AblationEntry entry;
  MetricsReport report;
};

/// Every entry runs on the same benchmark with a fresh Rng(seed).
std::vector<AblationRow> run_ablation(std::span<const AblationEntry> suite, const Benchmark& bench,
                                      const TrainConfig& cfg, std::uint64_t seed);

/// Named suites: "methods", "losses", "nk".
std::vector<AblationEntry> ablation_suite(const std::string& name);

}  // namespace dask
