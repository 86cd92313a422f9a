#include "dask/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "dask/checkpoint.hpp"

namespace dask {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Removes everything a command created unless it finished successfully.
class OutputGuard {
 public:
  OutputGuard() = default;
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;

  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const fs::path& f : files_) fs::remove(f, ec);
    for (const fs::path& d : dirs_) fs::remove_all(d, ec);
  }

  void directory(const fs::path& dir) {
    fs::path top;
    for (fs::path p = fs::absolute(dir); !p.empty() && !fs::exists(p); p = p.parent_path()) {
      top = p;
      if (p == p.parent_path()) break;
    }
    fs::create_directories(dir);
    if (!top.empty()) dirs_.push_back(top);
  }

  fs::path file(const fs::path& f) {
    files_.push_back(f);
    return f;
  }

  void commit() { committed_ = true; }

 private:
  std::vector<fs::path> files_;
  std::vector<fs::path> dirs_;
  bool committed_ = false;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw Error("failed writing " + path.string());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json score_json(const RetrievalScore& s) { return json{{"mAP", s.mAP}, {"R1", s.rank1}}; }

void write_embeddings(const fs::path& path, const ReidModel& model, const Benchmark& bench) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << "domain,identity";
  for (Index j = 0; j < model.embedding_dim(); ++j) os << ",f" << j;
  os << '\n';
  auto dump = [&](const DomainDataset& ds) {
    std::vector<Image> images;
    std::vector<int> labels;
    for (Split s : {Split::query, Split::gallery}) {
      for (std::size_t i : ds.indices(s)) {
        images.push_back(ds.images[i]);
        labels.push_back(ds.labels[i]);
      }
    }
    const FeatureBatch fb = extract_features(model, images, labels);
    for (Index r = 0; r < fb.size(); ++r) {
      os << ds.name << ',' << fb.labels[static_cast<std::size_t>(r)];
      for (Index j = 0; j < fb.features.cols(); ++j) os << ',' << format_double(fb.features(r, j));
      os << '\n';
    }
  };
  for (const DomainDataset& ds : bench.seen) dump(ds);
  for (const DomainDataset& ds : bench.unseen) dump(ds);
  if (!os) throw Error("failed writing " + path.string());
}

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string rehearser;
  std::string in;
  std::string suite;
  int domain = 0;
};

int cmd_gen_data(const Options& o) {
  const ExperimentConfig cfg = load_config(o.config);
  OutputGuard guard;
  guard.directory(o.out);
  const Benchmark bench = generate_benchmark(cfg.seed, cfg.benchmark);
  guard.file(fs::path(o.out) / "manifest.json");
  save_benchmark(bench, o.out);
  save_config(cfg, guard.file(fs::path(o.out) / "resolved_config.json"));
  guard.commit();
  return exit_ok;
}

int cmd_train_rehearser(const Options& o) {
  const ExperimentConfig cfg = load_config(o.config);
  const Benchmark bench = load_benchmark(o.data);
  if (o.domain < 0 || o.domain >= static_cast<int>(bench.seen.size())) {
    throw DataError("--domain " + std::to_string(o.domain) + " is not a seen domain of " + o.data);
  }
  RehearserConfig rc = cfg.train.rehearser;
  rc.kind = rehearser_kind(cfg.variant.variant);
  OutputGuard guard;
  const fs::path out(o.out);
  if (out.has_parent_path()) guard.directory(out.parent_path());
  Rng rng(cfg.seed);
  const Rehearser net = train_rehearser(bench.seen[static_cast<std::size_t>(o.domain)], rc, rng);
  save_checkpoint(net, guard.file(out), config_hash(cfg));
  save_config(cfg, guard.file(fs::path(out.string() + ".config.json")));
  guard.commit();
  return exit_ok;
}

int cmd_transfer(const Options& o) {
  const Rehearser net = load_rehearser_checkpoint(o.rehearser);
  const Image img = read_ppm(o.in);
  OutputGuard guard;
  write_ppm(guard.file(o.out), transfer(net, img));
  guard.commit();
  return exit_ok;
}

int cmd_run(const Options& o) {
  const ExperimentConfig cfg = load_config(o.config);
  const Benchmark bench = load_benchmark(o.data);
  const std::uint64_t hash = config_hash(cfg);
  const fs::path out(o.out);
  OutputGuard guard;
  guard.directory(out);
  save_config(cfg, guard.file(out / "resolved_config.json"));

  Rng rng(cfg.seed);
  auto on_step = [&](const LifelongState& state) {
    const std::string stem = "step" + std::to_string(state.step);
    save_checkpoint(state.model, guard.file(out / (stem + "_reid.ckpt")), hash);
    if (!state.rehearsers.empty()) {
      save_checkpoint(state.rehearsers.back(), guard.file(out / (stem + "_rehearser.ckpt")), hash);
    }
  };
  SequenceResult result = run_sequence(bench.seen, bench.unseen, cfg.train, cfg.variant, rng, on_step);
  result.report.seed = cfg.seed;

  write_embeddings(guard.file(out / "embeddings.csv"), result.state.model, bench);
  write_json(guard.file(out / "metrics.json"), metrics_json(result.report, cfg, result.state.history));
  guard.commit();
  return exit_ok;
}

int cmd_ablate(const Options& o) {
  const ExperimentConfig cfg = load_config(o.config);
  const std::vector<AblationEntry> suite = ablation_suite(o.suite);
  const Benchmark bench = o.data.empty() ? generate_benchmark(cfg.seed, cfg.benchmark) : load_benchmark(o.data);
  const fs::path out(o.out);
  OutputGuard guard;
  guard.directory(out);
  save_config(cfg, guard.file(out / "resolved_config.json"));

  const std::vector<AblationRow> rows = run_ablation(suite, bench, cfg.train, cfg.seed);

  std::ofstream csv(guard.file(out / "table.csv"));
  csv << "variant,seen_avg_mAP,seen_avg_R1,unseen_avg_mAP,unseen_avg_R1\n";
  json table{{"suite", o.suite}, {"seed", cfg.seed}, {"config_hash", hash_hex(config_hash(cfg))}};
  table["rows"] = json::array();
  for (const AblationRow& row : rows) {
    const MetricsReport& r = row.report;
    csv << row.entry.label << ',' << format_double(r.seen_avg.mAP) << ',' << format_double(r.seen_avg.rank1) << ','
        << format_double(r.unseen_avg.mAP) << ',' << format_double(r.unseen_avg.rank1) << '\n';
    json j = report_json(r);
    j["variant"] = row.entry.label;
    j["kernel_count"] = row.entry.kernel_count;
    table["rows"].push_back(std::move(j));
  }
  csv.close();
  if (!csv) throw Error("failed writing table.csv");
  write_json(guard.file(out / "table.json"), table);
  guard.commit();
  return exit_ok;
}

}  // namespace

json report_json(const MetricsReport& report) {
  json domains = json::array();
  for (const DomainMetrics& d : report.domains) {
    domains.push_back({{"name", d.name}, {"seen", d.seen}, {"mAP", d.score.mAP}, {"R1", d.score.rank1}});
  }
  return json{{"domains", domains},
              {"seen_avg", score_json(report.seen_avg)},
              {"unseen_avg", score_json(report.unseen_avg)}};
}

json metrics_json(const MetricsReport& report, const ExperimentConfig& cfg, const std::vector<StepRecord>& history) {
  json j = report_json(report);
  j["seed"] = report.seed;
  j["variant"] = cfg.variant.label();
  j["config_hash"] = hash_hex(config_hash(cfg));
  j["config"] = to_json(cfg);
  json steps = json::array();
  for (const StepRecord& s : history) {
    steps.push_back({{"step", s.step}, {"domain", s.domain}, {"epoch_loss", s.epoch_loss},
                     {"rehearser_loss", s.rehearser_loss}});
  }
  j["steps"] = steps;
  return j;
}

std::string metrics_schema_error(const json& j) {
  auto is_unit = [](const json& v) { return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0; };
  auto score_ok = [&](const json& s) {
    return s.is_object() && s.contains("mAP") && s.contains("R1") && is_unit(s["mAP"]) && is_unit(s["R1"]);
  };
  if (!j.is_object()) return "top level is not an object";
  if (!j.contains("domains") || !j["domains"].is_array() || j["domains"].empty()) return "missing domains";
  for (const json& d : j["domains"]) {
    if (!d.is_object() || !d.contains("name") || !d["name"].is_string()) return "domain entry without name";
    if (!d.contains("seen") || !d["seen"].is_boolean()) return "domain entry without seen flag";
    if (!score_ok(d)) return "domain entry with bad mAP/R1";
  }
  for (const char* key : {"seen_avg", "unseen_avg"}) {
    if (!j.contains(key) || !score_ok(j[key])) return std::string("bad ") + key;
  }
  if (!j.contains("seed") || !j["seed"].is_number_unsigned()) return "missing seed";
  if (!j.contains("config_hash") || !j["config_hash"].is_string() || j["config_hash"].get<std::string>().size() != 16) {
    return "missing config_hash";
  }
  return {};
}

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Exemplar-free lifelong re-identification with adaptive-kernel style rehearsal", "dask"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic benchmark");
  gen->add_option("--config", o.config, "Experiment config (JSON)")->required();
  gen->add_option("--out", o.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train-rehearser", "Train a rehearser on one seen domain");
  tr->add_option("--config", o.config, "Experiment config (JSON)")->required();
  tr->add_option("--data", o.data, "Benchmark directory")->required();
  tr->add_option("--out", o.out, "Checkpoint path")->required();
  tr->add_option("--domain", o.domain, "Seen domain index")->capture_default_str();

  auto* tf = app.add_subcommand("transfer", "Restyle one PPM image with a rehearser");
  tf->add_option("--rehearser", o.rehearser, "Rehearser checkpoint")->required();
  tf->add_option("--in", o.in, "Input PPM")->required();
  tf->add_option("--out", o.out, "Output PPM")->required();

  auto* run = app.add_subcommand("run", "Run the full lifelong sequence");
  run->add_option("--config", o.config, "Experiment config (JSON)")->required();
  run->add_option("--data", o.data, "Benchmark directory")->required();
  run->add_option("--out", o.out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Run an ablation suite");
  ab->add_option("--config", o.config, "Experiment config (JSON)")->required();
  ab->add_option("--suite", o.suite, "methods, losses or nk")->required();
  ab->add_option("--out", o.out, "Output directory")->required();
  ab->add_option("--data", o.data, "Benchmark directory (generated from the seed when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*tr) return cmd_train_rehearser(o);
    if (*tf) return cmd_transfer(o);
    if (*run) return cmd_run(o);
    if (*ab) return cmd_ablate(o);
  } catch (const ConfigError& e) {
    std::cerr << "dask: invalid config: " << e.what() << '\n';
    return exit_invalid;
  } catch (const DataError& e) {
    std::cerr << "dask: invalid data: " << e.what() << '\n';
    return exit_invalid;
  } catch (const CheckpointError& e) {
    std::cerr << "dask: bad checkpoint: " << e.what() << '\n';
    return exit_invalid;
  } catch (const std::exception& e) {
    std::cerr << "dask: " << e.what() << '\n';
    return exit_runtime;
  }
  return exit_usage;
}

}  // namespace dask
