#include "dask/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace dask {

using nlohmann::json;
using Kind = CheckpointError::Kind;

namespace {

constexpr std::array<char, 9> kMagic{'D', 'A', 'S', 'K', 'C', 'K', 'P', 'T', '1'};
// Guards against absurd header lengths before allocating.
constexpr std::uint64_t kMaxMetadata = 1ULL << 24;

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_file(const std::filesystem::path& path, const json& meta, const std::vector<Var>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError(Kind::io, "cannot write checkpoint " + path.string());
  const std::string text = meta.dump();
  os.write(kMagic.data(), kMagic.size());
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const Var& p : params) {
    for (double x : p.value().data) put_u64(os, std::bit_cast<std::uint64_t>(x));
  }
  os.close();
  if (!os) {
    std::error_code ec;
    std::filesystem::remove(path, ec);
    throw CheckpointError(Kind::io, "failed writing checkpoint " + path.string());
  }
}

json base_metadata(ModelKind kind, std::uint64_t hash, const std::vector<Var>& params) {
  json shapes = json::array();
  for (const Var& p : params) shapes.push_back(p.value().shape);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return json{{"format", "DASKCKPT1"}, {"kind", to_string(kind)}, {"config_hash", buf}, {"shapes", shapes}};
}

struct RawCheckpoint {
  json meta;
  std::vector<Tensor> tensors;
};

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(Kind::io, "cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

json parse_header(const std::vector<unsigned char>& bytes, std::size_t& offset, const std::string& name) {
  if (bytes.size() < kMagic.size() || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw CheckpointError(Kind::magic, name + " is not a DASKCKPT1 checkpoint");
  }
  if (bytes.size() < kMagic.size() + 8) throw CheckpointError(Kind::truncated, name + ": truncated header");
  const std::uint64_t len = get_u64(bytes.data() + kMagic.size());
  offset = kMagic.size() + 8;
  if (len > kMaxMetadata) throw CheckpointError(Kind::metadata, name + ": implausible metadata length");
  if (bytes.size() - offset < len) throw CheckpointError(Kind::truncated, name + ": truncated metadata");
  json meta;
  try {
    meta = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                       bytes.begin() + static_cast<std::ptrdiff_t>(offset + len));
  } catch (const json::exception&) {
    throw CheckpointError(Kind::metadata, name + ": metadata is not valid JSON");
  }
  offset += len;
  if (!meta.is_object() || meta.value("format", "") != "DASKCKPT1" || !meta.contains("kind") ||
      !meta["kind"].is_string() || !meta.contains("shapes") || !meta["shapes"].is_array()) {
    throw CheckpointError(Kind::metadata, name + ": metadata lacks format, kind or shapes");
  }
  return meta;
}

RawCheckpoint read_checkpoint(const std::filesystem::path& path, ModelKind expected) {
  const std::string name = path.string();
  const std::vector<unsigned char> bytes = read_bytes(path);
  std::size_t offset = 0;
  RawCheckpoint raw{parse_header(bytes, offset, name), {}};
  if (raw.meta["kind"] != to_string(expected)) {
    throw CheckpointError(Kind::kind_mismatch, name + " holds a " + raw.meta["kind"].get<std::string>() +
                                                   " model, expected " + to_string(expected));
  }

  std::vector<Shape> shapes;
  std::uint64_t total = 0;
  for (const json& s : raw.meta["shapes"]) {
    if (!s.is_array()) throw CheckpointError(Kind::metadata, name + ": malformed shape entry");
    Shape shape;
    for (const json& d : s) {
      if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0 || d.get<std::uint64_t>() > (1u << 24)) {
        throw CheckpointError(Kind::metadata, name + ": malformed shape entry");
      }
      shape.push_back(d.get<Index>());
    }
    total += static_cast<std::uint64_t>(shape_size(shape));
    shapes.push_back(std::move(shape));
  }
  const std::uint64_t payload = bytes.size() - offset;
  if (payload < total * 8) throw CheckpointError(Kind::truncated, name + ": truncated payload");
  if (payload > total * 8) throw CheckpointError(Kind::shape, name + ": payload longer than the declared shapes");

  const unsigned char* p = bytes.data() + offset;
  for (Shape& shape : shapes) {
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i, p += 8) t.data(i) = std::bit_cast<double>(get_u64(p));
    raw.tensors.push_back(std::move(t));
  }
  return raw;
}

[[noreturn]] void shape_error(const std::string& what) { throw CheckpointError(Kind::shape, what); }

void expect_shape(const Tensor& t, const Shape& s, const std::string& what) {
  if (t.shape != s) shape_error(what + " has shape " + shape_string(t.shape) + ", expected " + shape_string(s));
}

Conv conv_from(Tensor w, Tensor b, Index in, Index stride, const std::string& what) {
  if (w.rank() != 4 || w.shape[1] != in || w.shape[2] != w.shape[3] || w.shape[2] % 2 == 0) {
    shape_error(what + " weight has incompatible shape " + shape_string(w.shape));
  }
  expect_shape(b, {w.shape[0]}, what + " bias");
  return Conv{parameter(std::move(w)), parameter(std::move(b)), stride};
}

Dense dense_from(Tensor w, Tensor b, Index in, const std::string& what) {
  if (w.rank() != 2 || w.shape[1] != in) shape_error(what + " weight has incompatible shape " + shape_string(w.shape));
  expect_shape(b, {w.shape[0]}, what + " bias");
  return Dense{parameter(std::move(w)), parameter(std::move(b))};
}

}  // namespace

std::string to_string(ModelKind k) { return k == ModelKind::reid ? "reid" : "rehearser"; }

void save_checkpoint(const ReidModel& model, const std::filesystem::path& path, std::uint64_t config_hash) {
  const std::vector<Var> params = model.parameters();
  json meta = base_metadata(ModelKind::reid, config_hash, params);
  json strides = json::array();
  for (const Conv& c : model.extractor) strides.push_back(c.stride);
  meta["strides"] = strides;
  write_file(path, meta, params);
}

void save_checkpoint(const Rehearser& model, const std::filesystem::path& path, std::uint64_t config_hash) {
  const std::vector<Var> params = model.parameters();
  json meta = base_metadata(ModelKind::rehearser, config_hash, params);
  meta["rehearser_kind"] = to_string(model.kind);
  meta["kernel_size"] = model.kernel_size;
  meta["kernel_count"] = model.kernel_count;
  json strides = json::array();
  for (const Conv& c : model.backbone) strides.push_back(c.stride);
  meta["strides"] = strides;
  write_file(path, meta, params);
}

ReidModel load_reid_checkpoint(const std::filesystem::path& path) {
  RawCheckpoint raw = read_checkpoint(path, ModelKind::reid);
  const json& strides = raw.meta.value("strides", json::array());
  std::vector<Tensor>& t = raw.tensors;
  if (!strides.is_array() || strides.empty() || t.size() != 2 * strides.size() + 4) {
    shape_error(path.string() + ": tensor count does not match a reid model");
  }
  ReidModel m;
  Index in = Image::channels;
  for (std::size_t i = 0; i < strides.size(); ++i) {
    if (!strides[i].is_number_unsigned() || strides[i].get<Index>() < 1) {
      throw CheckpointError(Kind::metadata, path.string() + ": malformed stride");
    }
    m.extractor.push_back(conv_from(std::move(t[2 * i]), std::move(t[2 * i + 1]), in, strides[i].get<Index>(),
                                    "extractor conv " + std::to_string(i)));
    in = m.extractor.back().weight.shape()[0];
  }
  const std::size_t e = 2 * strides.size();
  m.embedding = dense_from(std::move(t[e]), std::move(t[e + 1]), in, "embedding");
  m.classifier = dense_from(std::move(t[e + 2]), std::move(t[e + 3]), m.embedding_dim(), "classifier");
  return m;
}

Rehearser load_rehearser_checkpoint(const std::filesystem::path& path) {
  RawCheckpoint raw = read_checkpoint(path, ModelKind::rehearser);
  const std::string name = path.string();
  Rehearser r;
  try {
    r.kind = rehearser_kind_from_string(raw.meta.at("rehearser_kind").get<std::string>());
    r.kernel_size = raw.meta.at("kernel_size").get<Index>();
    r.kernel_count = raw.meta.at("kernel_count").get<Index>();
  } catch (const std::exception&) {
    throw CheckpointError(Kind::metadata, name + ": bad rehearser metadata");
  }
  if (r.kernel_size < 1 || r.kernel_size % 2 == 0 || r.kernel_count < 1) {
    throw CheckpointError(Kind::metadata, name + ": bad kernel size or count");
  }
  std::vector<Tensor>& t = raw.tensors;
  if (r.kind == RehearserKind::shared_conv) {
    if (t.size() != 1) shape_error(name + ": shared_conv checkpoint must hold one tensor");
    expect_shape(t[0], {1, r.output_size()}, "shared kernel");
    r.shared_kernel = parameter(std::move(t[0]));
    return r;
  }
  const json& strides = raw.meta.value("strides", json::array());
  if (!strides.is_array() || t.size() != 2 * strides.size() + 2) {
    shape_error(name + ": tensor count does not match a rehearser");
  }
  Index in = Image::channels;
  for (std::size_t i = 0; i < strides.size(); ++i) {
    if (!strides[i].is_number_unsigned() || strides[i].get<Index>() < 1) {
      throw CheckpointError(Kind::metadata, name + ": malformed stride");
    }
    r.backbone.push_back(conv_from(std::move(t[2 * i]), std::move(t[2 * i + 1]), in, strides[i].get<Index>(),
                                   "backbone conv " + std::to_string(i)));
    in = r.backbone.back().weight.shape()[0];
  }
  const std::size_t h = 2 * strides.size();
  r.head = dense_from(std::move(t[h]), std::move(t[h + 1]), in, "head");
  if (r.head.weight.shape()[0] != r.output_size()) shape_error(name + ": head width does not match the kernel layout");
  return r;
}

ModelKind checkpoint_kind(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_bytes(path);
  std::size_t offset = 0;
  const json meta = parse_header(bytes, offset, path.string());
  if (meta["kind"] == "reid") return ModelKind::reid;
  if (meta["kind"] == "rehearser") return ModelKind::rehearser;
  throw CheckpointError(Kind::metadata, path.string() + ": unknown model kind");
}

std::uint64_t checkpoint_config_hash(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_bytes(path);
  std::size_t offset = 0;
  const json meta = parse_header(bytes, offset, path.string());
  try {
    return std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
  } catch (const std::exception&) {
    throw CheckpointError(Kind::metadata, path.string() + ": bad config hash");
  }
}

}  // namespace dask
