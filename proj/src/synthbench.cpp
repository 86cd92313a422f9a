#include "dask/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <cstdio>
#include <cstdlib>
#include <set>

#include "json.hpp"

namespace dask {

namespace {

// Statistics the channel affine of a style is calibrated against.
constexpr double kReferenceMean = 0.5;
constexpr double kReferenceStd = 0.25;

Eigen::Vector3d hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Eigen::Matrix3d hue_rotation_matrix(double angle) {
  const Eigen::Vector3d u = Eigen::Vector3d::Ones().normalized();
  Eigen::Matrix3d cross;
  cross << 0, -u.z(), u.y(), u.z(), 0, -u.x(), -u.y(), u.x(), 0;
  return std::cos(angle) * Eigen::Matrix3d::Identity() + (1 - std::cos(angle)) * u * u.transpose() +
         std::sin(angle) * cross;
}

// Identities share a small palette, so global colour alone does not
// separate them; layout and pattern do.
constexpr int kPaletteSize = 4;
constexpr double kIllum = 0.05;
constexpr int kClutter = 6;
constexpr double kScaleLo = 0.6;
constexpr double kBgJit = 0.05;
constexpr double kShadeJit = 0.0;

Eigen::Vector3d palette_color(int i) {
  return hsv_to_rgb(static_cast<double>(i) / kPaletteSize, 0.7, 0.8);
}

struct IdentityLook {
  Eigen::Vector3d hair, torso, torso_alt, legs, bag;
  double head_end, torso_end, half_width;
  int stripe_period;
  int pattern;  // 0 plain, 1 horizontal stripes, 2 vertical stripes, 3 two-tone split
  bool has_bag;
  bool bag_left;
};

Eigen::Vector3d shade_of(int palette_index, Rng& rng) {
  return palette_color(palette_index) * uniform(rng, 0.9 - kShadeJit, 0.9 + kShadeJit + 1e-12);
}

IdentityLook sample_identity(Rng& rng) {
  std::uniform_int_distribution<int> pick(0, kPaletteSize - 1);
  IdentityLook id;
  id.hair = Eigen::Vector3d::Constant(uniform(rng, 0.1, 0.6));
  id.torso = shade_of(pick(rng), rng);
  id.torso_alt = shade_of(pick(rng), rng);
  id.legs = shade_of(pick(rng), rng);
  id.bag = shade_of(pick(rng), rng);
  id.head_end = uniform(rng, 0.18, 0.24);
  id.torso_end = uniform(rng, 0.48, 0.62);
  id.half_width = uniform(rng, 0.24, 0.36);
  id.stripe_period = std::uniform_int_distribution<int>(3, 7)(rng);
  id.pattern = std::uniform_int_distribution<int>(0, 3)(rng);
  id.has_bag = bernoulli(rng, 0.5);
  id.bag_left = bernoulli(rng, 0.5);
  return id;
}

void fill_rect(Image& img, Index r0, Index r1, Index c0, Index c1, const Eigen::Vector3d& color) {
  r0 = std::clamp<Index>(r0, 0, img.height);
  r1 = std::clamp<Index>(r1, 0, img.height);
  c0 = std::clamp<Index>(c0, 0, img.width);
  c1 = std::clamp<Index>(c1, 0, img.width);
  for (Index c = 0; c < Image::channels; ++c) {
    for (Index m = r0; m < r1; ++m) {
      for (Index n = c0; n < c1; ++n) img.at(c, m, n) = color(c);
    }
  }
}

Image render_view(const IdentityLook& id, double background, const GenerationParams& p, Rng& rng) {
  const Index h = p.height, w = p.width;
  std::uniform_int_distribution<int> pick(0, kPaletteSize - 1);
  Image img(h, w, background + uniform(rng, -kBgJit, kBgJit + 1e-12));
  // Background clutter from the shared palette.
  const int clutter = std::uniform_int_distribution<int>(0, kClutter)(rng);
  for (int i = 0; i < clutter; ++i) {
    const Index r0 = std::uniform_int_distribution<Index>(0, h - 1)(rng);
    const Index c0 = std::uniform_int_distribution<Index>(0, w - 1)(rng);
    const Index rh = std::uniform_int_distribution<Index>(h / 8, h / 2)(rng);
    const Index cw = std::uniform_int_distribution<Index>(w / 8, w / 2)(rng);
    fill_rect(img, r0, r0 + rh, c0, c0 + cw, shade_of(pick(rng), rng) * 0.8);
  }

  std::uniform_int_distribution<int> jitter(-2, 2);
  const double scale = uniform(rng, kScaleLo, 1.0);
  const Index body = static_cast<Index>(scale * static_cast<double>(h));
  const Index top = (h - body) / 2 + std::uniform_int_distribution<int>(-3, 3)(rng);
  const auto at = [&](double frac) { return top + static_cast<Index>(frac * static_cast<double>(body)); };
  const Index head_end = at(id.head_end) + jitter(rng);
  const Index torso_end = at(id.torso_end) + jitter(rng);
  const Index bottom = top + body;
  const Index center = w / 2 + std::uniform_int_distribution<int>(-3, 3)(rng);
  const Index half = static_cast<Index>(id.half_width * scale * static_cast<double>(w));
  const Index head_half = std::max<Index>(1, static_cast<Index>(scale * static_cast<double>(w) / 6.0));
  const Index hair_end = top + (head_end - top) / 3;

  fill_rect(img, top, head_end, center - head_half, center + head_half, Eigen::Vector3d(0.85, 0.68, 0.56));
  fill_rect(img, top, hair_end, center - head_half, center + head_half, id.hair);
  for (Index m = std::max<Index>(head_end, 0); m < std::min(torso_end, h); ++m) {
    for (Index n = std::max<Index>(center - half, 0); n < std::min(center + half, w); ++n) {
      bool alt = false;
      switch (id.pattern) {
        case 1: alt = ((m - head_end) / id.stripe_period) % 2 == 1; break;
        case 2: alt = ((n - center + half) / id.stripe_period) % 2 == 1; break;
        case 3: alt = m >= (head_end + torso_end) / 2; break;
        default: break;
      }
      const Eigen::Vector3d& col = alt ? id.torso_alt : id.torso;
      for (Index c = 0; c < Image::channels; ++c) img.at(c, m, n) = col(c);
    }
  }
  if (id.has_bag) {
    const Index bw = std::max<Index>(2, w / 7);
    const Index c0 = id.bag_left ? center - half - bw / 2 : center + half - bw / 2;
    fill_rect(img, head_end + (torso_end - head_end) / 3, torso_end + 3, c0, c0 + bw, id.bag);
  }
  const Index leg_gap = std::max<Index>(1, w / 32);
  const Index leg_half = static_cast<Index>(0.8 * static_cast<double>(half));
  fill_rect(img, torso_end, bottom, center - leg_half, center - leg_gap, id.legs);
  fill_rect(img, torso_end, bottom, center + leg_gap, center + leg_half, id.legs);

  // Per-view illumination.
  for (Index c = 0; c < Image::channels; ++c) img.channel(c) *= uniform(rng, 1 - kIllum, 1 + kIllum);
  if (bernoulli(rng, 0.5)) img = hflip(img);
  std::normal_distribution<double> noise(0.0, 0.01);
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels(i) += noise(rng);
  return img;
}

Image apply_style(const Image& img, const DomainStyle& style, Rng& rng) {
  const Eigen::Matrix3d rot = hue_rotation_matrix(style.hue_rotation);
  Image out = img;
  for (Index i = 0; i < img.plane(); ++i) {
    const Eigen::Vector3d px(img.pixels(i), img.pixels(img.plane() + i), img.pixels(2 * img.plane() + i));
    const Eigen::Vector3d r = rot * px;
    for (Index c = 0; c < Image::channels; ++c) out.pixels(c * img.plane() + i) = r(c);
  }
  const Eigen::Array3d gain = style.target_std / kReferenceStd;
  const Eigen::Array3d offset = style.target_mean - gain * kReferenceMean;
  out = cop_transfer(out, gain, offset);
  out = gaussian_blur(out, style.blur_sigma);
  if (style.noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, style.noise_std);
    for (Index i = 0; i < out.pixels.size(); ++i) out.pixels(i) += noise(rng);
  }
  return clip01(std::move(out));
}

}  // namespace

DomainStyle sample_domain_style(std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5717e));
  DomainStyle s;
  for (Index c = 0; c < 3; ++c) s.target_mean(c) = uniform(rng, 0.35, 0.65);
  for (Index c = 0; c < 3; ++c) s.target_std(c) = uniform(rng, 0.12, 0.28);
  s.hue_rotation = uniform(rng, -0.4, 0.4);
  s.blur_sigma = uniform(rng, 0.0, 1.2);
  s.noise_std = uniform(rng, 0.0, 0.02);
  s.background = uniform(rng, 0.3, 0.7);
  return s;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw DataError("unknown split '" + s + "'");
}

std::vector<std::size_t> DomainDataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == s) out.push_back(i);
  }
  return out;
}

std::vector<Image> DomainDataset::images_of(Split s) const {
  std::vector<Image> out;
  for (std::size_t i : indices(s)) out.push_back(images[i]);
  return out;
}

std::vector<int> DomainDataset::labels_of(Split s) const {
  std::vector<int> out;
  for (std::size_t i : indices(s)) out.push_back(labels[i]);
  return out;
}

int DomainDataset::train_identities() const {
  const auto l = labels_of(Split::train);
  return static_cast<int>(std::set<int>(l.begin(), l.end()).size());
}

void validate_splits(const DomainDataset& ds) {
  if (ds.images.size() != ds.labels.size() || ds.images.size() != ds.splits.size()) {
    throw DataError(ds.name + ": images, labels and splits differ in length");
  }
  std::set<int> train, query, gallery;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& bucket = ds.splits[i] == Split::train ? train : ds.splits[i] == Split::query ? query : gallery;
    bucket.insert(ds.labels[i]);
  }
  for (int id : train) {
    if (query.count(id) || gallery.count(id)) {
      throw DataError(ds.name + ": identity " + std::to_string(id) + " is in both train and eval splits");
    }
  }
  for (int id : query) {
    if (!gallery.count(id)) {
      throw DataError(ds.name + ": query identity " + std::to_string(id) + " missing from gallery");
    }
  }
  // Classifier heads index train labels directly.
  int expected = 0;
  for (int id : train) {
    if (id != expected++) throw DataError(ds.name + ": train labels must be 0..n-1");
  }
}

DomainDataset generate_domain(std::uint64_t seed, const DomainStyle& style, const GenerationParams& params,
                              int domain_id, std::string name) {
  if (params.n_ids < 4 || params.views_per_id < 4) {
    throw ValueError("generate_domain: need n_ids >= 4 and views_per_id >= 4");
  }
  if (params.height < 8 || params.width < 8) throw ValueError("generate_domain: image too small");
  if (!(style.target_std > 0.0).all()) throw ValueError("generate_domain: style target std must be positive");
  DomainDataset ds;
  ds.domain_id = domain_id;
  ds.name = name.empty() ? "domain" + std::to_string(domain_id) : std::move(name);
  const int n_train = params.n_ids / 2;
  for (int id = 0; id < params.n_ids; ++id) {
    Rng id_rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(id)));
    const IdentityLook look = sample_identity(id_rng);
    for (int v = 0; v < params.views_per_id; ++v) {
      Rng view_rng(derive_seed(derive_seed(seed, 1000 + static_cast<std::uint64_t>(id)),
                               static_cast<std::uint64_t>(v)));
      ds.images.push_back(apply_style(render_view(look, style.background, params, view_rng), style, view_rng));
      ds.labels.push_back(id);
      ds.splits.push_back(id < n_train ? Split::train : v == 0 ? Split::query : Split::gallery);
    }
  }
  return ds;
}

Image geometric_augment(const Image& img, Rng& rng, const GeometricAugment& opts) {
  Image out = bernoulli(rng, opts.flip_probability) ? hflip(img) : img;
  if (opts.max_shift > 0) {
    std::uniform_int_distribution<Index> shift(-opts.max_shift, opts.max_shift);
    const Index dy = shift(rng), dx = shift(rng);
    Image moved(out.height, out.width);
    for (Index c = 0; c < Image::channels; ++c) {
      for (Index m = 0; m < out.height; ++m) {
        for (Index n = 0; n < out.width; ++n) {
          moved.at(c, m, n) = out.at(c, std::clamp(m + dy, Index{0}, out.height - 1),
                                     std::clamp(n + dx, Index{0}, out.width - 1));
        }
      }
    }
    out = std::move(moved);
  }
  if (bernoulli(rng, opts.erase_probability)) {
    const double area = uniform(rng, opts.erase_min_area, opts.erase_max_area) *
                        static_cast<double>(out.plane());
    const double aspect = std::exp(uniform(rng, std::log(0.3), std::log(3.3)));
    const Index eh = std::clamp<Index>(std::lround(std::sqrt(area * aspect)), 1, out.height);
    const Index ew = std::clamp<Index>(std::lround(std::sqrt(area / aspect)), 1, out.width);
    const Index r0 = std::uniform_int_distribution<Index>(0, out.height - eh)(rng);
    const Index c0 = std::uniform_int_distribution<Index>(0, out.width - ew)(rng);
    for (Index c = 0; c < Image::channels; ++c) {
      for (Index m = r0; m < r0 + eh; ++m) {
        for (Index n = c0; n < c0 + ew; ++n) out.at(c, m, n) = uniform(rng, 0.0, 1.0);
      }
    }
  }
  return out;
}

Benchmark generate_benchmark(std::uint64_t seed, const BenchmarkParams& params) {
  if (params.seen_domains < 1 || params.unseen_domains < 0) {
    throw ValueError("generate_benchmark: need at least one seen domain");
  }
  Benchmark b;
  const int total = params.seen_domains + params.unseen_domains;
  for (int d = 0; d < total; ++d) {
    const std::uint64_t dseed = derive_seed(seed, static_cast<std::uint64_t>(d));
    const bool seen = d < params.seen_domains;
    std::string name = seen ? "seen" + std::to_string(d) : "unseen" + std::to_string(d - params.seen_domains);
    auto ds = generate_domain(dseed, sample_domain_style(dseed), params.generation, d, std::move(name));
    (seen ? b.seen : b.unseen).push_back(std::move(ds));
  }
  return b;
}

RetrievalScore compute_map_rank1(const FeatureBatch& query, const FeatureBatch& gallery) {
  if (query.size() == 0 || gallery.size() == 0) throw ValueError("compute_map_rank1: empty query or gallery");
  if (query.features.cols() != gallery.features.cols()) {
    throw ShapeError("compute_map_rank1: feature dimensions differ");
  }
  auto normalized = [](const RowMatrix<double>& f) {
    Eigen::VectorXd n = f.rowwise().norm();
    for (Index i = 0; i < n.size(); ++i) n(i) = n(i) > 0.0 ? 1.0 / n(i) : 0.0;
    return RowMatrix<double>(n.asDiagonal() * f);
  };
  const RowMatrix<double> q = normalized(query.features);
  const RowMatrix<double> g = normalized(gallery.features);
  const Eigen::MatrixXd sims = q * g.transpose();
  const std::set<int> gallery_ids(gallery.labels.begin(), gallery.labels.end());

  RetrievalScore score;
  std::vector<Index> order(static_cast<std::size_t>(gallery.size()));
  for (Index qi = 0; qi < query.size(); ++qi) {
    const int qid = query.labels[static_cast<std::size_t>(qi)];
    if (!gallery_ids.count(qid)) {
      throw ValueError("compute_map_rank1: query identity " + std::to_string(qid) + " absent from gallery");
    }
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return sims(qi, a) > sims(qi, b); });
    double hits = 0.0, precision_sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery.labels[static_cast<std::size_t>(order[r])] == qid) {
        hits += 1.0;
        precision_sum += hits / static_cast<double>(r + 1);
      }
    }
    score.mAP += precision_sum / hits;
    if (gallery.labels[static_cast<std::size_t>(order[0])] == qid) score.rank1 += 1.0;
  }
  score.mAP /= static_cast<double>(query.size());
  score.rank1 /= static_cast<double>(query.size());
  return score;
}

RetrievalScore evaluate_domain(const ReidModel& model, const DomainDataset& ds) {
  const auto qi = ds.images_of(Split::query), gi = ds.images_of(Split::gallery);
  const auto ql = ds.labels_of(Split::query), gl = ds.labels_of(Split::gallery);
  return compute_map_rank1(extract_features(model, qi, ql), extract_features(model, gi, gl));
}

void refresh_averages(MetricsReport& report) {
  RetrievalScore seen, unseen;
  int ns = 0, nu = 0;
  for (const auto& d : report.domains) {
    auto& acc = d.seen ? seen : unseen;
    acc.mAP += d.score.mAP;
    acc.rank1 += d.score.rank1;
    (d.seen ? ns : nu)++;
  }
  if (ns) report.seen_avg = {seen.mAP / ns, seen.rank1 / ns};
  if (nu) report.unseen_avg = {unseen.mAP / nu, unseen.rank1 / nu};
}

MetricsReport evaluate_model(const ReidModel& model, std::span<const DomainDataset> seen,
                             std::span<const DomainDataset> unseen) {
  MetricsReport report;
  for (const auto& ds : seen) report.domains.push_back({ds.name, true, evaluate_domain(model, ds)});
  for (const auto& ds : unseen) report.domains.push_back({ds.name, false, evaluate_domain(model, ds)});
  refresh_averages(report);
  return report;
}

void save_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "dask-synthbench-1";
  manifest["domains"] = nlohmann::json::array();
  auto write_domain = [&](const DomainDataset& ds, bool seen) {
    fs::create_directories(dir / ds.name);
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.size(); ++i) {
      char fname[32];
      std::snprintf(fname, sizeof fname, "%05zu.ppm", i);
      const std::string rel = ds.name + "/" + fname;
      write_ppm(dir / rel, ds.images[i]);
      files.push_back({{"file", rel}, {"identity", ds.labels[i]}, {"split", to_string(ds.splits[i])}});
    }
    manifest["domains"].push_back({{"name", ds.name},
                                   {"domain_id", ds.domain_id},
                                   {"role", seen ? "seen" : "unseen"},
                                   {"files", std::move(files)}});
  };
  for (const auto& ds : bench.seen) write_domain(ds, true);
  for (const auto& ds : bench.unseen) write_domain(ds, false);
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
  if (!os) throw DataError("failed writing manifest in " + dir.string());
}

Benchmark load_benchmark(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  Benchmark b;
  try {
    if (manifest.at("format") != "dask-synthbench-1") throw DataError("manifest.json: unknown format");
    for (const auto& d : manifest.at("domains")) {
      DomainDataset ds;
      ds.name = d.at("name").get<std::string>();
      ds.domain_id = d.at("domain_id").get<int>();
      for (const auto& f : d.at("files")) {
        ds.images.push_back(read_ppm(dir / f.at("file").get<std::string>()));
        ds.labels.push_back(f.at("identity").get<int>());
        ds.splits.push_back(split_from_string(f.at("split").get<std::string>()));
      }
      validate_splits(ds);
      const std::string role = d.at("role").get<std::string>();
      if (role != "seen" && role != "unseen") throw DataError("manifest.json: bad role '" + role + "'");
      (role == "seen" ? b.seen : b.unseen).push_back(std::move(ds));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest.json: " + std::string(e.what()));
  }
  if (b.seen.empty()) throw DataError("manifest.json: no seen domains");
  return b;
}

}  // namespace dask
