// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by number, e.g. `dask_acceptance 5 6`.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "oracles.hpp"

#include "dask/checkpoint.hpp"
#include "dask/cli.hpp"
#include "dask/lifelong.hpp"

using namespace dask;
using namespace dask::testing;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Image random_image(Rng& rng, Index h, Index w) {
  Image img(h, w);
  for (Index i = 0; i < img.pixels.size(); ++i) img.pixels(i) = uniform(rng, 0.0, 1.0);
  return img;
}

RowMatrix<double> random_matrix(Index r, Index c, Rng& rng) {
  RowMatrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
  return m;
}

bool bit_equal(const std::vector<Var>& a, const std::vector<Var>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    if (std::memcmp(a[i].value().data.data(), b[i].value().data.data(),
                    static_cast<std::size_t>(a[i].size()) * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---------------------------------------------------------------------------
// Lifelong runs on the standard benchmark, shared by criteria 7, 8 and 11.

struct RunKey {
  std::uint64_t seed;
  std::string label;
  Index kernel_count;
  auto operator<=>(const RunKey&) const = default;
};

struct RunSummary {
  double seen_avg = 0.0;
  double old_avg = 0.0;  // domains 1..T-1 after the final step
  double seconds = 0.0;
};

class RunCache {
 public:
  const RunSummary& get(std::uint64_t seed, const VariantSpec& spec, Index kernel_count = 1) {
    const RunKey key{seed, spec.label(), kernel_count};
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    const Benchmark& bench = benchmark(seed);
    TrainConfig cfg;
    cfg.rehearser.kernel_count = kernel_count;
    Stopwatch sw;
    Rng rng(seed);
    const SequenceResult r = run_sequence(bench.seen, bench.unseen, cfg, spec, rng);
    RunSummary s;
    s.seconds = sw.seconds();
    s.seen_avg = r.report.seen_avg.mAP;
    const std::size_t old = bench.seen.size() - 1;
    for (std::size_t d = 0; d < old; ++d) s.old_avg += r.report.domains[d].score.mAP / static_cast<double>(old);
    std::printf("  run seed=%llu %-14s N_k=%lld  seen-avg %.4f  old-avg %.4f  (%.0f s)\n",
                static_cast<unsigned long long>(seed), key.label.c_str(), static_cast<long long>(kernel_count),
                s.seen_avg, s.old_avg, s.seconds);
    std::fflush(stdout);
    return runs_.emplace(key, s).first->second;
  }

  struct Mean {
    double seen_avg = 0.0;
    double old_avg = 0.0;
    double seconds = 0.0;
  };

  Mean mean(const VariantSpec& spec, Index kernel_count = 1) {
    Mean m;
    for (std::uint64_t seed : kSeeds) {
      const RunSummary& s = get(seed, spec, kernel_count);
      m.seen_avg += s.seen_avg / std::size(kSeeds);
      m.old_avg += s.old_avg / std::size(kSeeds);
      m.seconds += s.seconds;
    }
    return m;
  }

  const Benchmark& benchmark(std::uint64_t seed) {
    auto it = benches_.find(seed);
    if (it == benches_.end()) it = benches_.emplace(seed, generate_benchmark(seed, BenchmarkParams{})).first;
    return it->second;
  }

 private:
  std::map<RunKey, RunSummary> runs_;
  std::map<std::uint64_t, Benchmark> benches_;
};

RunCache& runs() {
  static RunCache cache;
  return cache;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  Stopwatch sw;
  double worst = 0.0;
  std::string worst_op;
  std::size_t ops = 0;
  for (const GradCase& gc : gradient_catalog()) {
    ++ops;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      Rng rng(seed);
      const std::vector<Tensor> inputs = gc.inputs(rng);
      const double e = gradient_error(gc.make(rng), inputs);
      if (e > worst) {
        worst = e;
        worst_op = gc.name;
      }
    }
  }
  const double t = sw.seconds();
  return {worst < 1e-4 && t < 60.0,
          fmt("worst relative error %.2e (%s) over %zu ops x 20 seeds, %.1f s", worst, worst_op.c_str(), ops, t)};
}

Outcome augmentation_statistics() {
  Rng rng(2);
  double worst_sigma = 0.0, worst_mu = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Image img = random_image(rng, 16, 8);
    const ChannelStats src = channel_stats(img);
    const DomainStats ds{Eigen::Array3d(uniform(rng, 0.01, 0.2), uniform(rng, 0.01, 0.2), uniform(rng, 0.01, 0.2)),
                         Eigen::Array3d(uniform(rng, 0.01, 0.1), uniform(rng, 0.01, 0.1), uniform(rng, 0.01, 0.1))};
    for (AugmentForm form : {AugmentForm::shift_scale, AugmentForm::adain}) {
      const AugmentedImage a = augment_distribution(img, ds, rng, form);
      const ChannelStats out = channel_stats(a.image);
      const Eigen::Array3d want_mu =
          form == AugmentForm::adain ? a.mu_sampled : Eigen::Array3d(a.mu_sampled * a.sigma_sampled / src.sigma);
      worst_sigma = std::max(worst_sigma, (out.sigma - a.sigma_sampled).abs().maxCoeff());
      worst_mu = std::max(worst_mu, (out.mu - want_mu).abs().maxCoeff());
    }
  }
  return {worst_sigma < 1e-10 && worst_mu < 1e-10,
          fmt("100 images x 2 forms: max std error %.1e, max mean error %.1e", worst_sigma, worst_mu)};
}

Outcome affine_is_kernel() {
  Rng rng(3);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Image img = random_image(rng, 12, 7);
    const Eigen::Array3d scale(uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2));
    const Eigen::Array3d shift(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    const Image a = cop_transfer(img, scale, shift);
    const Image b = apply_transfer_kernel(img, TransferKernel::center_diagonal(scale, shift));
    worst = std::max(worst, (a.pixels - b.pixels).abs().maxCoeff());
  }
  return {worst < 1e-12, fmt("100 triples: max difference %.1e", worst)};
}

Outcome oracles() {
  Rng rng(4);
  double conv = 0.0, sim = 0.0, trip = 0.0, ap = 0.0;
  const int trials = 60;
  for (int t = 0; t < trials; ++t) {
    const Index B = 1 + static_cast<Index>(rng() % 2), C = 1 + static_cast<Index>(rng() % 3);
    const Index H = 1 + static_cast<Index>(rng() % 7), W = 1 + static_cast<Index>(rng() % 7);
    const Index O = 1 + static_cast<Index>(rng() % 3), k = 1 + 2 * static_cast<Index>(rng() % 3);
    const Tensor x = random_tensor({B, C, H, W}, rng), w = random_tensor({O, C, k, k}, rng),
                 b = random_tensor({O}, rng);
    Tape tape(Tape::Mode::inference);
    const Tensor got = conv2d_same(tape, constant(x), constant(w), constant(b)).value();
    conv = std::max(conv, (got.data - conv_oracle(x, w, b, 1).data).abs().maxCoeff());

    FeatureBatch fb{random_matrix(2 + static_cast<Index>(rng() % 8), 1 + static_cast<Index>(rng() % 6), rng), {}};
    const RowMatrix<double> s = similarity_matrix(fb);
    const Rows want = cosine_oracle(to_rows(fb.features));
    for (Index i = 0; i < s.rows(); ++i)
      for (Index j = 0; j < s.cols(); ++j) sim = std::max(sim, std::abs(s(i, j) - want[i][j]));

    std::vector<int> y;
    const int ids = 2 + static_cast<int>(rng() % 4);
    for (int i = 0; i < ids; ++i) y.insert(y.end(), 2 + rng() % 3, i);
    std::shuffle(y.begin(), y.end(), rng);
    FeatureBatch tb{random_matrix(static_cast<Index>(y.size()), 1 + static_cast<Index>(rng() % 5), rng), y};
    const double margin = uniform(rng, 0.0, 1.0);
    trip = std::max(trip, std::abs(triplet_loss(tb, margin) - triplet_oracle(to_rows(tb.features), y, margin)));

    std::vector<int> gy, qy;
    const int gids = 3 + static_cast<int>(rng() % 5);
    for (int i = 0; i < gids; ++i) gy.insert(gy.end(), 1 + rng() % 4, i);
    for (int i = 0; i < 8; ++i) qy.push_back(static_cast<int>(rng() % static_cast<unsigned>(gids)));
    const RowMatrix<double> qf = random_matrix(static_cast<Index>(qy.size()), 4, rng);
    const RowMatrix<double> gf = random_matrix(static_cast<Index>(gy.size()), 4, rng);
    const RetrievalScore rs = compute_map_rank1(FeatureBatch{qf, qy}, FeatureBatch{gf, gy});
    const RetrievalOracle ro = retrieval_oracle(to_rows(qf), qy, to_rows(gf), gy);
    ap = std::max({ap, std::abs(rs.mAP - ro.mAP), std::abs(rs.rank1 - ro.rank1)});
  }
  RowMatrix<double> q(1, 2), g(4, 2);
  q << 1.0, 0.0;
  g << 1.0, 0.0, 0.9, 0.1, 0.5, 0.5, -1.0, 0.2;
  const double hand = compute_map_rank1(FeatureBatch{q, {7}}, FeatureBatch{g, {7, 1, 7, 2}}).mAP;
  const bool hand_ok = hand == (1.0 + 2.0 / 3.0) / 2.0;
  return {conv < 1e-12 && sim < 1e-12 && trip < 1e-12 && ap < 1e-12 && hand_ok,
          fmt("%d instances each: conv %.1e, similarity %.1e, triplet %.1e, AP %.1e; hand AP %.16f", trials, conv, sim,
              trip, ap, hand)};
}

// Criteria 5 and 6 share the trained rehearsers.
struct DrlTrial {
  double ratio = 0.0;
  int improved = 0;
  int total = 0;
};

std::vector<DrlTrial>& drl_trials(double* seconds = nullptr) {
  static std::vector<DrlTrial> trials;
  static double elapsed = 0.0;
  if (trials.empty()) {
    Stopwatch sw;
    for (std::uint64_t seed : kSeeds) {
      const DomainDataset ds = generate_domain(seed, sample_domain_style(seed), GenerationParams{});
      const RehearserConfig cfg;
      Rng rng(seed);
      const Rehearser net = train_rehearser(ds, cfg, rng);

      std::vector<Image> held = ds.images_of(Split::query);
      for (Image& img : ds.images_of(Split::gallery)) held.push_back(std::move(img));
      const DomainStats style = domain_stats(ds.images_of(Split::train));
      Rng aug_rng(derive_seed(seed, 0xacce97));
      DrlTrial t;
      double identity_loss = 0.0, trained_loss = 0.0;
      for (const Image& x : held) {
        const Image xa = augment_for_rehearsal(x, style, cfg, aug_rng);
        const Image xr = transfer(net, xa);
        identity_loss += reconstruction_loss(x, xa);
        trained_loss += reconstruction_loss(x, xr);
        const ChannelStats s0 = channel_stats(x), sa = channel_stats(xa), sr = channel_stats(xr);
        const double before = (s0.mu - sa.mu).square().sum() + (s0.sigma - sa.sigma).square().sum();
        const double after = (s0.mu - sr.mu).square().sum() + (s0.sigma - sr.sigma).square().sum();
        t.improved += after < before;
        ++t.total;
      }
      t.ratio = trained_loss / identity_loss;
      trials.push_back(t);
    }
    elapsed = sw.seconds();
  }
  if (seconds) *seconds = elapsed;
  return trials;
}

Outcome drl_efficacy() {
  double seconds = 0.0;
  const auto& trials = drl_trials(&seconds);
  int passing = 0;
  std::string ratios;
  for (const DrlTrial& t : trials) {
    passing += t.ratio <= 0.5;
    ratios += fmt("%s%.3f", ratios.empty() ? "" : ", ", t.ratio);
  }
  return {passing == 3 && seconds < 600.0,
          fmt("trained/identity held-out loss per seed: %s (%d/3 <= 0.5), %.0f s", ratios.c_str(), passing, seconds)};
}

Outcome rehearsal_fidelity() {
  int improved = 0, total = 0;
  std::string per;
  for (const DrlTrial& t : drl_trials()) {
    improved += t.improved;
    total += t.total;
    per += fmt("%s%d/%d", per.empty() ? "" : ", ", t.improved, t.total);
  }
  const double frac = static_cast<double>(improved) / total;
  return {frac >= 0.9, fmt("channel-stats distance reduced in %.1f%% of %d cases (per seed %s)", 100.0 * frac, total,
                           per.c_str())};
}

Outcome input_ablation() {
  RunCache& rc = runs();
  const auto base = rc.mean(VariantSpec::of(Variant::baseline));
  const auto stats = rc.mean(VariantSpec::of(Variant::stats_pred));
  const auto full = rc.mean(VariantSpec::of(Variant::dask));
  const double seconds = base.seconds + stats.seconds + full.seconds;
  const double old_gain = 100.0 * (full.old_avg - base.old_avg);
  const bool order = full.seen_avg > stats.seen_avg && stats.seen_avg >= base.seen_avg;
  return {order && old_gain >= 5.0 && seconds < 3600.0,
          fmt("seen-avg mAP dask %.4f, stats_pred %.4f, baseline %.4f; old-domain gain %+.2f points; %.0f s",
              full.seen_avg, stats.seen_avg, base.seen_avg, old_gain, seconds)};
}

Outcome loss_ablation() {
  RunCache& rc = runs();
  std::vector<std::pair<std::string, double>> rows;
  for (const AblationEntry& e : ablation_suite("losses")) rows.emplace_back(e.label, rc.mean(e.spec).seen_avg);
  const bool reid_helps = rows[1].second > rows[0].second;
  bool full_best = true;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) full_best = full_best && rows.back().second > rows[i].second;
  std::string detail;
  for (const auto& [label, v] : rows) detail += fmt("%s%s %.4f", detail.empty() ? "" : ", ", label.c_str(), v);
  return {reid_helps && full_best, "seen-avg mAP " + detail};
}

Outcome degenerate_weights() {
  const Benchmark& bench = runs().benchmark(1);
  TrainConfig cfg;
  cfg.beta = 0.0;
  std::vector<std::vector<Var>> traj_dask, traj_base;
  std::vector<std::vector<double>> loss_dask, loss_base;
  Rng a(1), b(1);
  run_sequence(bench.seen, bench.unseen, cfg, VariantSpec::of(Variant::dask), a, [&](const LifelongState& s) {
    traj_dask.push_back(clone(s.model).parameters());
    loss_dask.push_back(s.history.back().epoch_loss);
  });
  run_sequence(bench.seen, bench.unseen, cfg, VariantSpec::of(Variant::baseline), b, [&](const LifelongState& s) {
    traj_base.push_back(clone(s.model).parameters());
    loss_base.push_back(s.history.back().epoch_loss);
  });
  bool beta_ok = traj_dask.size() == traj_base.size() && loss_dask == loss_base;
  for (std::size_t t = 0; beta_ok && t < traj_dask.size(); ++t) beta_ok = bit_equal(traj_dask[t], traj_base[t]);

  cfg.alpha = 0.0;
  cfg.lambda_ema = 0.0;
  Rng c(1), d(1);
  const SequenceResult full = run_sequence(bench.seen, bench.unseen, cfg, VariantSpec::of(Variant::dask), c);
  const SequenceResult ft = run_finetune(bench.seen, bench.unseen, cfg, d);
  const bool ft_ok = bit_equal(full.state.model.parameters(), ft.state.model.parameters()) &&
                     full.report.seen_avg.mAP == ft.report.seen_avg.mAP;
  return {beta_ok && ft_ok, fmt("beta=0 dask vs baseline: %s over %zu steps; alpha=beta=lambda=0 vs fine-tuning: %s",
                                beta_ok ? "bit-identical" : "DIFFERENT", traj_dask.size(),
                                ft_ok ? "bit-identical" : "DIFFERENT")};
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "dask_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  nlohmann::json cfg = to_json(ExperimentConfig{});
  cfg["seed"] = 1;
  cfg["train"]["epochs_first"] = 4;
  cfg["train"]["epochs_later"] = 3;
  cfg["rehearser"]["epochs"] = 3;
  std::ofstream(root / "config.json") << cfg.dump(2);
  const std::string c = (root / "config.json").string();
  bool ok = cli_main({"dask", "gen-data", "--config", c, "--out", (root / "data").string()}) == exit_ok;
  for (const char* out : {"a", "b"}) {
    ok = ok && cli_main({"dask", "run", "--config", c, "--data", (root / "data").string(), "--out",
                         (root / out).string()}) == exit_ok;
  }
  const bool metrics_same = ok && slurp(root / "a" / "metrics.json") == slurp(root / "b" / "metrics.json") &&
                            !slurp(root / "a" / "metrics.json").empty();

  bool ckpt_ok = ok;
  if (ok) {
    const ReidModel m = load_reid_checkpoint(root / "a" / "step3_reid.ckpt");
    save_checkpoint(m, root / "again.ckpt", checkpoint_config_hash(root / "a" / "step3_reid.ckpt"));
    ckpt_ok = slurp(root / "again.ckpt") == slurp(root / "a" / "step3_reid.ckpt") &&
              bit_equal(load_reid_checkpoint(root / "again.ckpt").parameters(), m.parameters());
    Rng rng(1);
    for (RehearserKind kind : {RehearserKind::akpnet, RehearserKind::stats_pred, RehearserKind::shared_conv}) {
      RehearserConfig rcfg;
      rcfg.kind = kind;
      const Rehearser r = train_rehearser(runs().benchmark(1).seen[0], [&] {
        RehearserConfig short_cfg = rcfg;
        short_cfg.epochs = 2;
        return short_cfg;
      }(), rng);
      save_checkpoint(r, root / "r.ckpt");
      ckpt_ok = ckpt_ok && bit_equal(load_rehearser_checkpoint(root / "r.ckpt").parameters(), r.parameters());
    }
  }
  fs::remove_all(root);
  return {metrics_same && ckpt_ok, fmt("metrics.json of two runs %s; checkpoint round trips %s",
                                       metrics_same ? "byte-identical" : "DIFFER", ckpt_ok ? "bit-exact" : "NOT exact")};
}

Outcome kernel_count() {
  RunCache& rc = runs();
  const double one = rc.mean(VariantSpec::of(Variant::dask), 1).seen_avg;
  const double three = rc.mean(VariantSpec::of(Variant::dask), 3).seen_avg;
  return {one >= three, fmt("seen-avg mAP N_k=1 %.4f, N_k=3 %.4f", one, three)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"augmentation statistics contract", augmentation_statistics},
      {"channel affine equals centre-tap kernel", affine_is_kernel},
      {"convolution and metric oracles", oracles},
      {"rehearser learning efficacy", drl_efficacy},
      {"rehearsal fidelity", rehearsal_fidelity},
      {"input-data ablation ordering", input_ablation},
      {"loss ablation ordering", loss_ablation},
      {"degenerate-weight equivalence", degenerate_weights},
      {"determinism and persistence", determinism},
      {"kernel count", kernel_count},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  std::vector<std::string> summary;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    const std::string line = fmt("criterion %2d %-40s %s  %s", n, criteria[i].first, o.pass ? "PASS" : "FAIL",
                                 o.detail.c_str());
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    summary.push_back(line);
  }
  std::printf("\nsummary\n");
  for (const std::string& s : summary) std::printf("%s\n", s.c_str());
  std::printf("%d of %zu criteria failed\n", failures, summary.size());
  return failures == 0 ? 0 : 1;
}
