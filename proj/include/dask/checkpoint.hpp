#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "dask/rehearser.hpp"
#include "dask/reid.hpp"

namespace dask {

/// File layout: the 9 magic bytes "DASKCKPT1", a little-endian uint64 byte
/// length, that many bytes of JSON metadata (model kind, tensor shapes,
/// config hash), then every parameter as little-endian float64 in
/// declaration order. There is no checksum: a flipped payload byte still
/// loads as long as the length is intact.
enum class ModelKind { reid, rehearser };

std::string to_string(ModelKind k);

void save_checkpoint(const ReidModel& model, const std::filesystem::path& path, std::uint64_t config_hash = 0);
void save_checkpoint(const Rehearser& model, const std::filesystem::path& path, std::uint64_t config_hash = 0);

/// Throws CheckpointError; the kind tells which contract was broken.
ReidModel load_reid_checkpoint(const std::filesystem::path& path);
Rehearser load_rehearser_checkpoint(const std::filesystem::path& path);

/// Reads only the header.
ModelKind checkpoint_kind(const std::filesystem::path& path);
std::uint64_t checkpoint_config_hash(const std::filesystem::path& path);

}  // namespace dask
