#include "dask/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace dask {

using nlohmann::json;

namespace {

std::string to_string(ReconstructionNorm n) { return n == ReconstructionNorm::l1 ? "l1" : "l2"; }

ReconstructionNorm norm_from_string(const std::string& s) {
  if (s == "l1") return ReconstructionNorm::l1;
  if (s == "l2") return ReconstructionNorm::l2;
  throw ConfigError("unknown reconstruction norm '" + s + "'");
}

// Reads the keys of one JSON object and complains about anything left over.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + path_ + key + "'");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw type_error(key, "a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw type_error(key, "an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (it->is_number_unsigned()) {
          out = it->template get<T>();
          return;
        }
        if (it->template get<std::int64_t>() < 0) throw type_error(key, "a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!it->is_number()) throw type_error(key, "a number");
    } else {
      if (!it->is_string()) throw type_error(key, "a string");
    }
    out = it->template get<T>();
  }

  template <typename Enum, typename Parse>
  void get_enum(const std::string& key, Enum& out, Parse parse) {
    std::string s;
    bool present = j_.contains(key);
    get(key, s);
    if (!present) return;
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key = {}) const {
    std::string p = path_ + key;
    if (!p.empty() && p.back() == '.') p.pop_back();
    return "'" + (p.empty() ? std::string("<root>") : p) + "'";
  }

 private:
  ConfigError type_error(const std::string& key, const char* what) const {
    return ConfigError("config key " + where(key) + " must be " + what);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

void ExperimentConfig::validate() const {
  if (benchmark.seen_domains < 1) throw ConfigError("benchmark.seen_domains must be >= 1");
  if (benchmark.unseen_domains < 0) throw ConfigError("benchmark.unseen_domains must be >= 0");
  const GenerationParams& g = benchmark.generation;
  if (g.n_ids < 4) throw ConfigError("benchmark.n_ids must be >= 4");
  if (g.views_per_id < 4) throw ConfigError("benchmark.views_per_id must be >= 4");
  if (g.height < 16 || g.width < 16) throw ConfigError("benchmark image size must be at least 16x16");
  train.validate();
  if (train.P > g.n_ids / 2) throw ConfigError("train.P exceeds the number of train identities per domain");
  if (variant.variant == Variant::baseline && (variant.use_rehearsed_reid || variant.use_rehearsed_skd)) {
    throw ConfigError("baseline variant has no rehearsed losses to enable");
  }
}

json to_json(const ExperimentConfig& cfg) {
  const GenerationParams& g = cfg.benchmark.generation;
  const TrainConfig& t = cfg.train;
  const RehearserConfig& r = t.rehearser;
  return json{
      {"seed", cfg.seed},
      {"benchmark",
       {{"seen_domains", cfg.benchmark.seen_domains},
        {"unseen_domains", cfg.benchmark.unseen_domains},
        {"n_ids", g.n_ids},
        {"views_per_id", g.views_per_id},
        {"height", g.height},
        {"width", g.width}}},
      {"rehearser",
       {{"kernel_size", r.kernel_size},
        {"kernel_count", r.kernel_count},
        {"epochs", r.epochs},
        {"batch_size", r.batch_size},
        {"learning_rate", r.learning_rate},
        {"augment_form", to_string(r.augment_form)},
        {"blur_probability", r.blur_probability},
        {"blur_max_sigma", r.blur_max_sigma},
        {"norm", to_string(r.norm)},
        {"retained_capacity", t.retained_capacity}}},
      {"train",
       {{"alpha", t.alpha},
        {"beta", t.beta},
        {"lambda_ema", t.lambda_ema},
        {"ema_cadence", to_string(t.ema_cadence)},
        {"margin", t.margin},
        {"tau", t.tau},
        {"epochs_first", t.epochs_first},
        {"epochs_later", t.epochs_later},
        {"P", t.P},
        {"K", t.K},
        {"learning_rate", t.learning_rate},
        {"geometric_augment", t.geometric}}},
      {"variant",
       {{"name", to_string(cfg.variant.variant)},
        {"use_rehearsed_reid", cfg.variant.use_rehearsed_reid},
        {"use_rehearsed_skd", cfg.variant.use_rehearsed_skd}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");
  root.get("seed", cfg.seed);

  if (const json* b = root.child("benchmark")) {
    Section s(*b, "benchmark.");
    GenerationParams& g = cfg.benchmark.generation;
    s.get("seen_domains", cfg.benchmark.seen_domains);
    s.get("unseen_domains", cfg.benchmark.unseen_domains);
    s.get("n_ids", g.n_ids);
    s.get("views_per_id", g.views_per_id);
    s.get("height", g.height);
    s.get("width", g.width);
  }

  TrainConfig& t = cfg.train;
  if (const json* r = root.child("rehearser")) {
    Section s(*r, "rehearser.");
    RehearserConfig& rc = t.rehearser;
    s.get("kernel_size", rc.kernel_size);
    s.get("kernel_count", rc.kernel_count);
    s.get("epochs", rc.epochs);
    s.get("batch_size", rc.batch_size);
    s.get("learning_rate", rc.learning_rate);
    s.get_enum("augment_form", rc.augment_form, augment_form_from_string);
    s.get("blur_probability", rc.blur_probability);
    s.get("blur_max_sigma", rc.blur_max_sigma);
    s.get_enum("norm", rc.norm, norm_from_string);
    s.get("retained_capacity", t.retained_capacity);
  }

  if (const json* tr = root.child("train")) {
    Section s(*tr, "train.");
    s.get("alpha", t.alpha);
    s.get("beta", t.beta);
    s.get("lambda_ema", t.lambda_ema);
    s.get_enum("ema_cadence", t.ema_cadence, ema_cadence_from_string);
    s.get("margin", t.margin);
    s.get("tau", t.tau);
    s.get("epochs_first", t.epochs_first);
    s.get("epochs_later", t.epochs_later);
    s.get("P", t.P);
    s.get("K", t.K);
    s.get("learning_rate", t.learning_rate);
    s.get("geometric_augment", t.geometric);
  }

  if (const json* v = root.child("variant")) {
    Section s(*v, "variant.");
    Variant kind = Variant::dask;
    s.get_enum("name", kind, variant_from_string);
    VariantSpec spec = VariantSpec::of(kind);
    s.get("use_rehearsed_reid", spec.use_rehearsed_reid);
    s.get("use_rehearsed_skd", spec.use_rehearsed_skd);
    cfg.variant = spec;
  }

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << to_json(cfg).dump(2) << '\n';
  if (!os) throw Error("failed writing " + path.string());
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : to_json(cfg).dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dask
