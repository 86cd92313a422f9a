#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dask/image.hpp"
#include "dask/reid.hpp"

namespace dask {

/// Appearance shift that distinguishes one synthetic domain from another.
struct DomainStyle {
  Eigen::Array3d target_mean{0.5, 0.5, 0.5};
  Eigen::Array3d target_std{0.25, 0.25, 0.25};
  double hue_rotation = 0.0;  // radians, about the grey axis
  double blur_sigma = 0.0;
  double noise_std = 0.0;
  double background = 0.5;
};

/// Deterministic style draw for a domain seed.
DomainStyle sample_domain_style(std::uint64_t seed);

enum class Split { train, query, gallery };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DomainDataset {
  std::string name;
  int domain_id = 0;
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<Split> splits;

  std::size_t size() const { return images.size(); }
  std::vector<std::size_t> indices(Split s) const;
  std::vector<Image> images_of(Split s) const;
  std::vector<int> labels_of(Split s) const;
  /// Number of distinct identities in the train split.
  int train_identities() const;
};

/// Checks the split invariants: train identities disjoint from evaluation
/// identities, every query identity present in the gallery. Throws DataError.
void validate_splits(const DomainDataset& ds);

struct GenerationParams {
  int n_ids = 20;
  int views_per_id = 8;
  Index height = 64;
  Index width = 32;
};

/// Identities 0 .. n_ids/2 - 1 form the train split (all views); each
/// remaining identity contributes one query and views_per_id - 1 gallery images.
DomainDataset generate_domain(std::uint64_t seed, const DomainStyle& style, const GenerationParams& params,
                              int domain_id = 0, std::string name = {});

struct GeometricAugment {
  double flip_probability = 0.5;
  Index max_shift = 2;
  double erase_probability = 0.5;
  double erase_min_area = 0.02;
  double erase_max_area = 0.2;
};

/// Random horizontal flip, replicate-padded translation and random erasing.
Image geometric_augment(const Image& img, Rng& rng, const GeometricAugment& opts = {});

struct Benchmark {
  std::vector<DomainDataset> seen;
  std::vector<DomainDataset> unseen;
};

struct BenchmarkParams {
  int seen_domains = 3;
  int unseen_domains = 2;
  GenerationParams generation;
};

/// Domains are generated from independent sub-seeds of `seed`; seen domains
/// are named seen0.., unseen domains unseen0...
Benchmark generate_benchmark(std::uint64_t seed, const BenchmarkParams& params);

struct RetrievalScore {
  double mAP = 0.0;
  double rank1 = 0.0;
};

/// Cosine ranking of the gallery for every query; ties go to the lower
/// gallery index.
RetrievalScore compute_map_rank1(const FeatureBatch& query, const FeatureBatch& gallery);

struct DomainMetrics {
  std::string name;
  bool seen = true;
  RetrievalScore score;
};

struct MetricsReport {
  std::vector<DomainMetrics> domains;
  RetrievalScore seen_avg;
  RetrievalScore unseen_avg;
  std::uint64_t seed = 0;
};

RetrievalScore evaluate_domain(const ReidModel& model, const DomainDataset& ds);
MetricsReport evaluate_model(const ReidModel& model, std::span<const DomainDataset> seen,
                             std::span<const DomainDataset> unseen);
/// Recomputes the averages from the per-domain entries.
void refresh_averages(MetricsReport& report);

/// Directory of PPM files plus manifest.json. Seen domains are written first.
void save_benchmark(const Benchmark& bench, const std::filesystem::path& dir);
Benchmark load_benchmark(const std::filesystem::path& dir);

}  // namespace dask
