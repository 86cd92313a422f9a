#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "dask/lifelong.hpp"
#include "dask/synthbench.hpp"

namespace dask {

/// Everything needed to reproduce one experiment.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  BenchmarkParams benchmark;
  TrainConfig train;
  VariantSpec variant;

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);

/// Missing keys keep their defaults; unknown keys and wrong types are
/// rejected with ConfigError. The result is validated.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

/// FNV-1a over the compact dump of the fully resolved config.
std::uint64_t config_hash(const ExperimentConfig& cfg);
std::string hash_hex(std::uint64_t h);

}  // namespace dask
