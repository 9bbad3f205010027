#include "ranktide/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "ranktide/image_io.hpp"
#include "ranktide/rng.hpp"

namespace ranktide {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0)) throw Error("config: lr must be positive");
  if (epochs < 1) throw Error("config: epochs must be >= 1");
  if (batch_size < 1) throw Error("config: batch_size must be >= 1");
  if (!(tradeoff_lambda >= 0)) throw Error("config: tradeoff_lambda must be >= 0");
}

std::size_t resolve_threads(std::size_t requested) {
  std::size_t n = requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("RANKTIDE_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap > 0) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

// ------------------------------------------------------------------ optimizer

OptimizerState make_optimizer_state(const ModelParams& p) { return {zeros_like(p), zeros_like(p), 0}; }

namespace {

/// Applies fn(param, grad, m, v) to every tensor of the four aligned parameter sets.
template <class Fn>
void zip_params(ModelParams& p, const ModelParams& g, ModelParams& m, ModelParams& v, Fn&& fn) {
  std::vector<Tensor*> ps, ms, vs;
  std::vector<const Tensor*> gs;
  p.for_each([&](const std::string&, Tensor& t) { ps.push_back(&t); });
  m.for_each([&](const std::string&, Tensor& t) { ms.push_back(&t); });
  v.for_each([&](const std::string&, Tensor& t) { vs.push_back(&t); });
  g.for_each([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
  if (ps.size() != gs.size() || ps.size() != ms.size() || ps.size() != vs.size())
    throw Error("optimizer: parameter layout mismatch");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i]->shape != gs[i]->shape) throw Error("optimizer: gradient shape mismatch");
    fn(*ps[i], *gs[i], *ms[i], *vs[i]);
  }
}

}  // namespace

void optimizer_step(ModelParams& params, const ModelParams& grads, OptimizerState& st, const TrainConfig& cfg) {
  ++st.step;
  if (cfg.optimizer == OptimizerKind::adam) {
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.step));
    zip_params(params, grads, st.m, st.v, [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = cfg.adam_beta1 * m[i] + (1 - cfg.adam_beta1) * g[i];
        v[i] = cfg.adam_beta2 * v[i] + (1 - cfg.adam_beta2) * g[i] * g[i];
        p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
      }
    });
  } else {
    zip_params(params, grads, st.m, st.v, [&](Tensor& p, const Tensor& g, Tensor& m, Tensor&) {
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = cfg.momentum * m[i] + g[i];
        p[i] -= cfg.lr * m[i];
      }
    });
  }
}

// ------------------------------------------------------------------ inputs

namespace {

/// Transform k of an AugmentSpec: 0 = identity, then rotations, then mirror.
Tensor apply_transform(const Tensor& img, std::size_t k, const AugmentSpec& spec) {
  if (k == 0) return img;
  if (k <= spec.rotations_deg.size()) return rotate_image(img, spec.rotations_deg[k - 1]);
  return hflip_image(img);
}

std::size_t transform_count(const AugmentSpec& spec) { return 1 + spec.rotations_deg.size() + (spec.hflip ? 1 : 0); }

std::array<Tensor, 4> make_inputs(const FrameSequence& seq, std::uint64_t dssi_seed, const TrainConfig& cfg,
                                  std::size_t transform) {
  std::array<Tensor, 4> out;
  if (cfg.input == InputMode::middle_frame) {
    const Tensor mid = standardize(apply_transform(seq.frame_tensor((seq.length() - 1) / 2), transform, cfg.augment_spec));
    out.fill(mid);
    return out;
  }
  const auto images = compute_dssi(seq, dssi_seed, cfg.rank_pool);
  for (std::size_t i = 0; i < 4; ++i) out[i] = standardize(apply_transform(images[i].pixels, transform, cfg.augment_spec));
  return out;
}

}  // namespace

std::array<Tensor, 4> sample_inputs(const FrameSequence& seq, std::uint64_t dssi_seed, const TrainConfig& cfg) {
  return make_inputs(seq, dssi_seed, cfg, 0);
}

std::uint64_t eval_dssi_seed(std::uint64_t fixed_seed, const FrameSequence& seq) {
  return mix_seed(fixed_seed, hash_string(seq.source_path));
}

// ------------------------------------------------------------------ training

json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"ce", e.ce}, {"de", e.de}, {"total", e.total}, {"mean_alpha", e.mean_alpha},
          {"mean_dbar_std", e.mean_dbar_std}};
}

namespace {

struct SampleOutcome {
  LossBreakdown loss;
  std::array<double, 4> alpha{};
};

/// Forward + backward for one training item; gradients land on `leaves`.
SampleOutcome train_sample(ad::Tape& tape, const ParamLeaves& leaves, const std::array<Tensor, 4>& inputs,
                           std::size_t label, const TrainConfig& cfg) {
  SampleOutcome out;
  if (cfg.input == InputMode::middle_frame) {
    const ad::Value ce = ad::cross_entropy(forward_single(tape, inputs[0], leaves), label);
    tape.backward(ce);
    out.loss = {ce.item(), 0.0, ce.item(), 0.0};
    out.alpha.fill(0.25);
    return out;
  }
  const ForwardResult r = forward(tape, inputs, leaves, {cfg.enable_stma});
  const JointLoss loss = total_loss(r.logits, label, r.features, cfg.effective_lambda(), cfg.de);
  tape.backward(loss.total);
  out.loss = loss.parts;
  for (std::size_t i = 0; i < 4; ++i) out.alpha[i] = r.alpha.data()[i];
  return out;
}

void add_scaled(ModelParams& acc, const ModelParams& g, double s) {
  std::vector<const Tensor*> gs;
  g.for_each([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
  std::size_t k = 0;
  acc.for_each([&](const std::string&, Tensor& t) {
    const Tensor& src = *gs[k++];
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] += s * src[i];
  });
}

}  // namespace

TrainResult train_fold(const std::vector<FrameSequence>& train, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty()) throw Error("train_fold: empty training set");

  // Training items: (sequence, transform). Sequence-level augmentation is
  // materialized up front; dynamic-image augmentation is applied per item.
  std::vector<FrameSequence> expanded;
  const std::vector<FrameSequence>* pool = &train;
  std::vector<std::pair<std::size_t, std::size_t>> items;
  if (cfg.augment == AugmentMode::sequence) {
    for (const auto& s : train)
      for (auto& a : augment(s, cfg.augment_spec)) expanded.push_back(std::move(a));
    pool = &expanded;
    for (std::size_t i = 0; i < expanded.size(); ++i) items.emplace_back(i, 0);
  } else if (cfg.augment == AugmentMode::dynamic_image) {
    for (std::size_t i = 0; i < train.size(); ++i)
      for (std::size_t k = 0; k < transform_count(cfg.augment_spec); ++k) items.emplace_back(i, k);
  } else {
    for (std::size_t i = 0; i < train.size(); ++i) items.emplace_back(i, 0);
  }

  ModelConfig mc = cfg.model;
  mc.backbone.in_channels = train.front().channels();
  TrainResult result{init_params(mc, mix_seed(cfg.seed, 0x5eed)), {}};
  OptimizerState opt = make_optimizer_state(result.params);

  std::vector<std::size_t> order(items.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(cfg.seed, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(epoch_seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_index(i)]);

    EpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      ModelParams grads = zeros_like(result.params);
      for (std::size_t b = start; b < end; ++b) {
        const auto [seq_idx, transform] = items[order[b]];
        const FrameSequence& seq = (*pool)[seq_idx];
        // Fresh DSSI sampling for every item in every epoch.
        const auto inputs = make_inputs(seq, mix_seed(epoch_seed, order[b]), cfg, transform);
        ad::Tape tape;
        const ParamLeaves leaves = bind_params(tape, result.params);
        SampleOutcome s;
        try {
          s = train_sample(tape, leaves, inputs, seq.label, cfg);
        } catch (const Error& e) {
          throw Error("training aborted at epoch " + std::to_string(epoch) + ", sequence " + seq.source_path + ": " +
                      e.what());
        }
        if (!std::isfinite(s.loss.total))
          throw Error("non-finite loss at epoch " + std::to_string(epoch) + ", sequence " + seq.source_path);
        add_scaled(grads, collect_grads(tape, leaves), 1.0 / static_cast<double>(end - start));
        log.ce += s.loss.ce;
        log.de += s.loss.de;
        log.total += s.loss.total;
        for (std::size_t i = 0; i < 4; ++i) log.mean_alpha[i] += s.alpha[i];
        log.mean_dbar_std += cfg.input == InputMode::dssi ? 1.0 - s.loss.de : 0.0;
      }
      optimizer_step(result.params, grads, opt, cfg);
    }
    const double n = static_cast<double>(items.size());
    log.ce /= n;
    log.de /= n;
    log.total /= n;
    for (double& a : log.mean_alpha) a /= n;
    log.mean_dbar_std /= n;
    if (!result.params.all_finite()) throw Error("training diverged: non-finite parameters at epoch " + std::to_string(epoch));
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

// ------------------------------------------------------------------ evaluation

EvalResult evaluate(const ModelParams& params, const std::vector<FrameSequence>& entries, std::size_t num_classes,
                    const TrainConfig& cfg, std::uint64_t fixed_seed) {
  if (entries.empty()) throw Error("evaluate: no sequences");
  const ModelConfig mc = params.config();
  if (mc.num_classes != num_classes)
    throw Error("evaluate: checkpoint has " + std::to_string(mc.num_classes) + " classes, manifest has " +
                std::to_string(num_classes));
  EvalResult r;
  for (const auto& seq : entries) {
    if (seq.channels() != mc.backbone.in_channels)
      throw Error("evaluate: checkpoint expects " + std::to_string(mc.backbone.in_channels) + " channels, " +
                  seq.source_path + " has " + std::to_string(seq.channels()));
    const auto inputs = sample_inputs(seq, eval_dssi_seed(fixed_seed, seq), cfg);
    ad::Tape tape;
    const ParamLeaves leaves = bind_params(tape, params, false);
    ad::Value logits;
    AlphaRow row{seq.source_path, {0.25, 0.25, 0.25, 0.25}};
    if (cfg.input == InputMode::middle_frame) {
      logits = forward_single(tape, inputs[0], leaves);
    } else {
      const ForwardResult fr = forward(tape, inputs, leaves, {cfg.enable_stma});
      logits = fr.logits;
      for (std::size_t i = 0; i < 4; ++i) row.alpha[i] = fr.alpha.data()[i];
    }
    const auto l = logits.data();
    r.predictions.push_back(static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin()));
    r.truth.push_back(seq.label);
    r.alpha.push_back(row);
  }
  r.metrics = compute_metrics(r.predictions, r.truth, num_classes);
  return r;
}

// ------------------------------------------------------------------ LOSO

LosoSplit loso_split(const Manifest& manifest) {
  std::map<std::string, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    if (manifest.entries[i].subject.empty()) throw Error("loso_split: entry with empty subject");
    by_subject[manifest.entries[i].subject].push_back(i);
  }
  if (by_subject.size() < 2)
    throw Error("loso_split: need at least 2 distinct subjects, found " + std::to_string(by_subject.size()));
  LosoSplit split;
  for (const auto& [subject, idx] : by_subject) {
    LosoFold fold{subject, {}, idx};
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
      if (manifest.entries[i].subject != subject) fold.train.push_back(i);
    split.folds.push_back(std::move(fold));
  }
  return split;
}

namespace {

template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

LosoReport run_loso(const Manifest& manifest, const std::vector<FrameSequence>& sequences, const TrainConfig& cfg,
                    const RunOptions& opts) {
  if (sequences.size() != manifest.entries.size()) throw Error("run_loso: sequences do not match manifest entries");
  const LosoSplit split = loso_split(manifest);
  TrainConfig fold_cfg = cfg;
  fold_cfg.model.num_classes = manifest.num_classes();
  if (opts.out_dir) std::filesystem::create_directories(*opts.out_dir);

  LosoReport report;
  report.folds.resize(split.folds.size());
  parallel_for(split.folds.size(), resolve_threads(cfg.threads), [&](std::size_t f) {
    const LosoFold& fold = split.folds[f];
    std::vector<FrameSequence> train, val;
    for (auto i : fold.train) train.push_back(sequences[i]);
    for (auto i : fold.val) val.push_back(sequences[i]);

    std::ofstream log_file;
    if (opts.out_dir) {
      log_file.open(*opts.out_dir / ("fold_" + fold.held_out_subject + ".jsonl"), std::ios::trunc);
      if (!log_file) throw Error("cannot write fold log under " + opts.out_dir->string());
    }
    TrainResult tr = train_fold(train, fold_cfg, [&](const EpochLog& e) {
      if (log_file.is_open()) log_file << to_json(e).dump() << '\n' << std::flush;
    });
    if (opts.out_dir) save_checkpoint(tr.params, *opts.out_dir / ("fold_" + fold.held_out_subject + ".smas"));

    EvalResult ev = evaluate(tr.params, val, manifest.num_classes(), fold_cfg, opts.eval_seed);
    FoldReport& fr = report.folds[f];
    fr.held_out_subject = fold.held_out_subject;
    fr.metrics = ev.metrics;
    fr.val = fold.val;
    fr.predictions = ev.predictions;
    fr.truth = ev.truth;
    for (auto i : fold.val) fr.val_sequences.push_back(manifest.entries[i].sequence_dir);
    fr.alpha = ev.alpha;
    fr.log = std::move(tr.log);
    fr.params = std::move(tr.params);
  });

  std::vector<std::size_t> preds, truth;
  double acc_sum = 0.0;
  for (const auto& fr : report.folds) {
    preds.insert(preds.end(), fr.predictions.begin(), fr.predictions.end());
    truth.insert(truth.end(), fr.truth.begin(), fr.truth.end());
    acc_sum += fr.metrics.accuracy;
  }
  report.aggregate = compute_metrics(preds, truth, manifest.num_classes());
  report.mean_fold_accuracy = acc_sum / static_cast<double>(report.folds.size());
  return report;
}

json to_json(const LosoReport& r, bool include_alpha) {
  json folds = json::array();
  for (const auto& f : r.folds) {
    json jf{{"held_out_subject", f.held_out_subject},
            {"num_val", f.val.size()},
            {"metrics", to_json(f.metrics)},
            {"final_epoch", f.log.empty() ? json() : to_json(f.log.back())}};
    json preds = json::array();
    for (std::size_t i = 0; i < f.predictions.size(); ++i)
      preds.push_back({{"sequence", f.val_sequences.at(i)}, {"truth", f.truth[i]}, {"prediction", f.predictions[i]}});
    jf["predictions"] = preds;
    if (include_alpha) {
      json rows = json::array();
      for (const auto& a : f.alpha) rows.push_back({{"sequence", a.sequence}, {"alpha", a.alpha}});
      jf["alpha"] = rows;
    }
    folds.push_back(jf);
  }
  json agg = to_json(r.aggregate);
  agg["mean_fold_accuracy"] = r.mean_fold_accuracy;
  return {{"folds", folds}, {"aggregate", agg}};
}

std::vector<AblationRow> run_ablation(const Manifest& manifest, const std::vector<FrameSequence>& sequences,
                                      const TrainConfig& cfg, const RunOptions& opts) {
  std::vector<AblationRow> rows;
  for (const auto& [stma, de] : {std::pair{false, false}, {false, true}, {true, false}, {true, true}}) {
    TrainConfig c = cfg;
    c.enable_stma = stma;
    c.enable_de_loss = de;
    RunOptions o = opts;
    if (opts.out_dir) o.out_dir = *opts.out_dir / (std::string("stma") + (stma ? "1" : "0") + "_de" + (de ? "1" : "0"));
    AblationRow row{stma, de, run_loso(manifest, sequences, c, o), {}};
    for (const auto& f : row.report.folds) row.final_dbar_std.push_back(f.log.back().mean_dbar_std);
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"enable_stma", r.enable_stma},
                   {"enable_de_loss", r.enable_de_loss},
                   {"accuracy", r.report.aggregate.accuracy},
                   {"macro_f1", r.report.aggregate.macro_f1},
                   {"mean_fold_accuracy", r.report.mean_fold_accuracy},
                   {"final_dbar_std", r.final_dbar_std}});
  return out;
}

std::vector<SweepRow> lambda_sweep(const Manifest& manifest, const std::vector<FrameSequence>& sequences,
                                   const TrainConfig& cfg, const std::vector<double>& lambdas, const RunOptions& opts) {
  std::vector<SweepRow> rows;
  for (double lambda : lambdas) {
    if (!(lambda >= 0)) throw Error("lambda_sweep: lambda values must be >= 0");
    TrainConfig c = cfg;
    c.tradeoff_lambda = lambda;
    c.enable_de_loss = true;
    RunOptions o = opts;
    if (opts.out_dir) {
      std::ostringstream name;
      name << "lambda_" << lambda;
      o.out_dir = *opts.out_dir / name.str();
    }
    rows.push_back({lambda, run_loso(manifest, sequences, c, o)});
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda,accuracy,macro_f1\n";
  for (const auto& r : rows) os << r.lambda << ',' << r.report.aggregate.accuracy << ',' << r.report.aggregate.macro_f1 << '\n';
  return os.str();
}

}  // namespace ranktide
