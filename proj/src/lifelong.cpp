#include "dask/lifelong.hpp"

#include <algorithm>
#include <numeric>

namespace dask {

namespace {

// Sub-stream ids under a step seed.
constexpr std::uint64_t kRehearsalStream = 1;
constexpr std::uint64_t kDrlStream = 2;

RowMatrix<double> teacher_similarity(const ReidModel& old_model, const Tensor& batch) {
  Tape tape(Tape::Mode::inference);
  Var f = old_model.features(tape, constant(batch));
  return similarity_matrix(tape, f).value().matrix();
}

struct StreamLoss {
  Var reid;
  Var skd;
};

// Real-stream or rehearsed-stream losses; skd is null when not requested.
StreamLoss stream_loss(Tape& tape, const ReidModel& model, const ReidModel* old_model, const Tensor& batch,
                       std::span<const int> labels, const TrainConfig& cfg, bool want_reid, bool want_skd) {
  StreamLoss out;
  Var f = model.features(tape, constant(batch));
  if (want_reid) out.reid = reid_loss(tape, f, model.logits(tape, f), labels, cfg.margin);
  if (want_skd && old_model) {
    out.skd = skd_loss(tape, teacher_similarity(*old_model, batch), similarity_matrix(tape, f), cfg.tau);
  }
  return out;
}

Var weighted_sum(Tape& tape, const Var& a, double wa, const Var& b, double wb) {
  if (!a) return b ? scale(tape, b, wb) : Var{};
  Var left = wa == 1.0 ? a : scale(tape, a, wa);
  if (!b) return left;
  return add(tape, left, scale(tape, b, wb));
}

struct TrainSet {
  std::vector<Image> images;
  std::vector<int> labels;
};

TrainSet train_set(const DomainDataset& ds) {
  TrainSet s{ds.images_of(Split::train), ds.labels_of(Split::train)};
  if (s.images.empty()) throw ValueError("dataset '" + ds.name + "' has an empty train split");
  return s;
}

void gather(const TrainSet& set, const std::vector<std::size_t>& idx, const TrainConfig& cfg, Rng& rng,
            std::vector<Image>& images, std::vector<int>& labels) {
  images.clear();
  labels.clear();
  for (std::size_t i : idx) {
    images.push_back(cfg.geometric ? geometric_augment(set.images[i], rng, cfg.augment) : set.images[i]);
    labels.push_back(set.labels[i]);
  }
}

ReidModel init_step_model(const LifelongState& state, int classes, const TrainConfig& cfg, Rng& rng) {
  if (state.step == 0) return make_reid_model(cfg.arch, classes, rng);
  ReidModel m = clone(state.model);
  reset_classifier(m, classes, rng);
  return m;
}

}  // namespace

RehearserKind rehearser_kind(Variant v) {
  switch (v) {
    case Variant::shared_conv: return RehearserKind::shared_conv;
    case Variant::stats_pred: return RehearserKind::stats_pred;
    default: return RehearserKind::akpnet;
  }
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::style_aug: return "style_aug";
    case Variant::shared_conv: return "shared_conv";
    case Variant::stats_pred: return "stats_pred";
    case Variant::dask: return "dask";
  }
  return "dask";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::baseline, Variant::style_aug, Variant::shared_conv, Variant::stats_pred, Variant::dask}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s + "'");
}

std::string to_string(EmaCadence c) { return c == EmaCadence::epoch ? "epoch" : "step"; }

EmaCadence ema_cadence_from_string(const std::string& s) {
  if (s == "epoch") return EmaCadence::epoch;
  if (s == "step") return EmaCadence::step;
  throw ConfigError("unknown EMA cadence '" + s + "'");
}

VariantSpec VariantSpec::of(Variant v) { return VariantSpec{v, true, true}.normalized(); }

VariantSpec VariantSpec::normalized() const {
  VariantSpec s = *this;
  if (s.variant == Variant::baseline) s.use_rehearsed_reid = s.use_rehearsed_skd = false;
  return s;
}

bool VariantSpec::has_rehearsed_stream() const {
  return variant != Variant::baseline && (use_rehearsed_reid || use_rehearsed_skd);
}

bool VariantSpec::needs_rehearser() const {
  return has_rehearsed_stream() && variant != Variant::style_aug;
}

std::string VariantSpec::label() const {
  const VariantSpec s = normalized();
  if (s.variant == Variant::baseline || (s.use_rehearsed_reid && s.use_rehearsed_skd)) return to_string(s.variant);
  std::string flags;
  if (s.use_rehearsed_reid) flags = "reid*";
  if (s.use_rehearsed_skd) flags = "skd*";
  return to_string(s.variant) + "[" + (flags.empty() ? "none" : flags) + "]";
}

void TrainConfig::validate() const {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  if (!(beta >= 0.0)) throw ConfigError("beta must be >= 0");
  if (!(lambda_ema >= 0.0 && lambda_ema <= 1.0)) throw ConfigError("lambda_ema must lie in [0,1]");
  if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (epochs_first < 1 || epochs_later < 1) throw ConfigError("epochs must be >= 1");
  if (P < 2) throw ConfigError("P must be >= 2");
  if (K < 2) throw ConfigError("K must be >= 2");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (retained_capacity < 1) throw ConfigError("retained capacity must be >= 1");
  rehearser.validate();
}

std::vector<std::vector<std::size_t>> pk_batches(std::span<const int> labels, int P, int K, Rng& rng) {
  if (P < 1 || K < 1) throw ValueError("pk_batches: P and K must be positive");
  std::vector<int> ids(labels.begin(), labels.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (static_cast<int>(ids.size()) < P) {
    throw ValueError("pk_batches: " + std::to_string(ids.size()) + " identities, need P=" + std::to_string(P));
  }
  std::vector<std::vector<std::size_t>> by_id(ids.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto pos = std::lower_bound(ids.begin(), ids.end(), labels[i]) - ids.begin();
    by_id[static_cast<std::size_t>(pos)].push_back(i);
  }
  const std::size_t count = labels.size() / static_cast<std::size_t>(P * K);
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> order(ids.size());
  for (std::size_t b = 0; b < std::max<std::size_t>(count, 1); ++b) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> batch;
    for (int p = 0; p < P; ++p) {
      std::vector<std::size_t> pool = by_id[order[static_cast<std::size_t>(p)]];
      if (static_cast<int>(pool.size()) >= K) {
        std::shuffle(pool.begin(), pool.end(), rng);
        batch.insert(batch.end(), pool.begin(), pool.begin() + K);
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (int k = 0; k < K; ++k) batch.push_back(pool[pick(rng)]);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<Image> generate_old_style(std::span<const Rehearser> rehearsers, std::span<const Image> batch,
                                      Rng& rng) {
  if (rehearsers.empty()) throw ValueError("generate_old_style: no retained rehearser");
  std::size_t pick = 0;
  if (rehearsers.size() > 1) pick = std::uniform_int_distribution<std::size_t>(0, rehearsers.size() - 1)(rng);
  std::vector<Image> out = transfer(rehearsers[pick], batch);
  for (Image& img : out) img = clip01(std::move(img));
  return out;
}

LifelongState run_step(LifelongState state, const DomainDataset& dataset, const TrainConfig& cfg,
                       const VariantSpec& variant_in, Rng& rng) {
  cfg.validate();
  const VariantSpec variant = variant_in.normalized();
  const TrainSet set = train_set(dataset);
  const int t = state.step + 1;
  const std::uint64_t step_seed = rng();

  const bool has_old = t >= 2;
  ReidModel old_model;
  if (has_old) old_model = clone(state.model);
  ReidModel model = init_step_model(state, dataset.train_identities(), cfg, rng);

  const bool use_skd = has_old && cfg.alpha > 0.0;
  const bool rehearse = has_old && cfg.beta > 0.0 && variant.has_rehearsed_stream();
  if (rehearse && variant.needs_rehearser() && state.rehearsers.empty()) {
    throw ValueError("run_step: variant " + variant.label() + " needs a retained rehearser at step " +
                     std::to_string(t));
  }
  const DomainStats style_stats = variant.variant == Variant::style_aug && rehearse
                                      ? domain_stats(set.images)
                                      : DomainStats{};
  Rng rehearsal_rng(derive_seed(step_seed, kRehearsalStream));

  std::vector<Var> params = model.parameters();
  OptimizerState opt = make_optimizer_state(params, {.learning_rate = cfg.learning_rate});
  StepRecord record{t, dataset.name, {}, {}};
  const int epochs = t == 1 ? cfg.epochs_first : cfg.epochs_later;
  std::vector<Image> images;
  std::vector<int> labels;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = pk_batches(set.labels, cfg.P, cfg.K, rng);
    for (const auto& idx : batches) {
      gather(set, idx, cfg, rng, images, labels);
      Tape tape;
      const ReidModel* old_ptr = has_old ? &old_model : nullptr;
      StreamLoss real = stream_loss(tape, model, old_ptr, to_tensor(images), labels, cfg, true, use_skd);
      Var loss = weighted_sum(tape, real.reid, 1.0, real.skd, cfg.alpha);
      if (rehearse) {
        std::vector<Image> old_style;
        if (variant.variant == Variant::style_aug) {
          for (const Image& x : images) {
            old_style.push_back(clip01(augment_distribution(x, style_stats, rehearsal_rng,
                                                            cfg.rehearser.augment_form).image));
          }
        } else {
          old_style = generate_old_style(state.rehearsers, images, rehearsal_rng);
        }
        StreamLoss reh = stream_loss(tape, model, old_ptr, to_tensor(old_style), labels, cfg,
                                     variant.use_rehearsed_reid, variant.use_rehearsed_skd && cfg.alpha > 0.0);
        Var inner = weighted_sum(tape, reh.reid, 1.0, reh.skd, cfg.alpha);
        loss = add(tape, loss, scale(tape, inner, cfg.beta));
      }
      tape.backward(loss);
      optimizer_step(params, opt);
      epoch_loss += loss.item();
    }
    if (has_old && cfg.ema_cadence == EmaCadence::epoch) ema_fuse(old_model, model, cfg.lambda_ema);
    record.epoch_loss.push_back(epoch_loss / static_cast<double>(batches.size()));
  }

  if (has_old && cfg.ema_cadence == EmaCadence::step) ema_fuse(old_model, model, cfg.lambda_ema);

  if (variant.needs_rehearser()) {
    RehearserConfig rc = cfg.rehearser;
    rc.kind = rehearser_kind(variant.variant);
    Rng drl_rng(derive_seed(step_seed, kDrlStream));
    RehearserHistory hist;
    Rehearser psi = train_rehearser(std::span<const Image>(set.images), rc, drl_rng, &hist);
    record.rehearser_loss = std::move(hist.epoch_loss);
    state.rehearsers.push_back(std::move(psi));
    while (static_cast<int>(state.rehearsers.size()) > cfg.retained_capacity) {
      state.rehearsers.erase(state.rehearsers.begin());
    }
  }

  state.model = std::move(model);
  state.step = t;
  state.history.push_back(std::move(record));
  return state;
}

SequenceResult run_sequence(std::span<const DomainDataset> seen, std::span<const DomainDataset> unseen,
                            const TrainConfig& cfg, const VariantSpec& variant, Rng& rng,
                            const StepCallback& on_step) {
  if (seen.empty()) throw ValueError("run_sequence: no seen domains");
  SequenceResult out;
  for (const DomainDataset& ds : seen) {
    out.state = run_step(std::move(out.state), ds, cfg, variant, rng);
    if (on_step) on_step(out.state);
  }
  out.report = evaluate_model(out.state.model, seen, unseen);
  return out;
}

SequenceResult run_finetune(std::span<const DomainDataset> seen, std::span<const DomainDataset> unseen,
                            const TrainConfig& cfg, Rng& rng) {
  if (seen.empty()) throw ValueError("run_finetune: no seen domains");
  cfg.validate();
  SequenceResult out;
  LifelongState& state = out.state;
  std::vector<Image> images;
  std::vector<int> labels;
  for (const DomainDataset& ds : seen) {
    const TrainSet set = train_set(ds);
    const int t = state.step + 1;
    rng();  // step seed slot
    ReidModel model = init_step_model(state, ds.train_identities(), cfg, rng);
    std::vector<Var> params = model.parameters();
    OptimizerState opt = make_optimizer_state(params, {.learning_rate = cfg.learning_rate});
    StepRecord record{t, ds.name, {}, {}};
    const int epochs = t == 1 ? cfg.epochs_first : cfg.epochs_later;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      double epoch_loss = 0.0;
      const auto batches = pk_batches(set.labels, cfg.P, cfg.K, rng);
      for (const auto& idx : batches) {
        gather(set, idx, cfg, rng, images, labels);
        Tape tape;
        Var f = model.features(tape, constant(to_tensor(images)));
        Var loss = reid_loss(tape, f, model.logits(tape, f), labels, cfg.margin);
        tape.backward(loss);
        optimizer_step(params, opt);
        epoch_loss += loss.item();
      }
      record.epoch_loss.push_back(epoch_loss / static_cast<double>(batches.size()));
    }
    state.model = std::move(model);
    state.step = t;
    state.history.push_back(std::move(record));
  }
  out.report = evaluate_model(state.model, seen, unseen);
  return out;
}

std::vector<AblationRow> run_ablation(std::span<const AblationEntry> suite, const Benchmark& bench,
                                      const TrainConfig& cfg, std::uint64_t seed) {
  if (suite.empty()) throw ValueError("run_ablation: empty suite");
  std::vector<AblationRow> rows;
  for (const AblationEntry& e : suite) {
    TrainConfig c = cfg;
    c.rehearser.kernel_count = e.kernel_count;
    Rng rng(seed);
    SequenceResult r = run_sequence(bench.seen, bench.unseen, c, e.spec, rng);
    r.report.seed = seed;
    rows.push_back({e, std::move(r.report)});
  }
  return rows;
}

std::vector<AblationEntry> ablation_suite(const std::string& name) {
  auto entry = [](VariantSpec s, Index nk = 1, std::string label = {}) {
    s = s.normalized();
    return AblationEntry{s, nk, label.empty() ? s.label() : std::move(label)};
  };
  if (name == "methods") {
    std::vector<AblationEntry> out;
    for (Variant v : {Variant::baseline, Variant::style_aug, Variant::shared_conv, Variant::stats_pred,
                      Variant::dask}) {
      out.push_back(entry(VariantSpec::of(v)));
    }
    return out;
  }
  if (name == "losses") {
    return {entry({Variant::dask, false, false}), entry({Variant::dask, true, false}),
            entry({Variant::dask, false, true}), entry({Variant::dask, true, true})};
  }
  if (name == "nk") {
    return {entry(VariantSpec::of(Variant::dask), 1, "dask[nk=1]"),
            entry(VariantSpec::of(Variant::dask), 2, "dask[nk=2]"),
            entry(VariantSpec::of(Variant::dask), 3, "dask[nk=3]")};
  }
  throw ConfigError("unknown ablation suite '" + name + "'");
}

}  // namespace dask
