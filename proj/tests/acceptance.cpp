// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. `--only 1,2,5` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "ranktide/dssi.hpp"
#include "ranktide/gradsuite.hpp"
#include "ranktide/losses.hpp"
#include "ranktide/model.hpp"
#include "ranktide/rng.hpp"
#include "ranktide/train.hpp"

using namespace ranktide;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

/// Accumulates failed checks with a short reason each.
struct Checks {
  std::vector<std::string> failures;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  Outcome outcome(const std::string& summary) const {
    if (failures.empty()) return {true, summary};
    std::string d = failures.front();
    if (failures.size() > 1) d += " (+" + std::to_string(failures.size() - 1) + " more)";
    return {false, d + "; " + summary};
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Tensor random_tensor(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const GradSuiteReport r = run_grad_suite();
  const double secs = seconds_since(t0);
  Checks c;
  double worst_op = 0.0, worst_comp = 0.0;
  for (const auto& cs : r.cases) {
    c.expect(cs.passed, cs.name + " max rel err " + fmt("%.3g", cs.max_rel_error));
    c.expect(cs.instances >= 20, cs.name + " ran fewer than 20 instances");
    (cs.composite ? worst_comp : worst_op) = std::max(cs.composite ? worst_comp : worst_op, cs.max_rel_error);
  }
  c.expect(secs < 120.0, "runtime " + fmt("%.1f", secs) + " s");
  return c.outcome(std::to_string(r.cases.size()) + " cases, worst op " + fmt("%.2e", worst_op) + ", composite " +
                   fmt("%.2e", worst_comp) + ", " + fmt("%.1f", secs) + " s");
}

Outcome dssi_invariants() {
  Checks c;
  Rng rng(101);
  double worst = 0.0;
  for (std::size_t n = 2; n <= 12; ++n) {
    Tensor f(Shape{n, 1, 4, 4});
    const Tensor one = random_tensor(rng, Shape{1, 1, 4, 4});
    for (std::size_t t = 0; t < n; ++t) std::copy(one.data.begin(), one.data.end(), f.data.begin() + t * 16);
    for (auto v : {RankPoolVariant::time_average, RankPoolVariant::direct_frame})
      for (double x : dynamic_image(f, v).data) worst = std::max(worst, std::abs(x));
  }
  c.expect(worst < 1e-12, "constant sequence gives |d| = " + fmt("%.3g", worst));

  const auto w = effective_frame_weights(3, RankPoolVariant::time_average);
  const std::array<double, 3> want{-4.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0};
  for (std::size_t t = 0; t < 3; ++t) c.expect(std::abs(w[t] - want[t]) < 1e-12, "n=3 time-average weights");
  const auto ref = oracle::time_average_weights(3);
  for (std::size_t t = 0; t < 3; ++t) c.expect(std::abs(w[t] - ref[t]) < 1e-12, "weights disagree with expansion");

  for (int rep = 0; rep < 100; ++rep) {
    const Tensor f3 = random_tensor(rng, Shape{3, 1, 3, 3});
    const Tensor d = dynamic_image(f3, RankPoolVariant::direct_frame);
    for (std::size_t i = 0; i < 9; ++i) c.expect(d[i] == 2.0 * (f3[18 + i] - f3[i]), "direct n=3 not exact");

    const std::size_t n = 2 + rep % 8;
    for (auto v : {RankPoolVariant::time_average, RankPoolVariant::direct_frame}) {
      const Tensor x = random_tensor(rng, Shape{n, 1, 3, 3}), y = random_tensor(rng, Shape{n, 1, 3, 3});
      const double a = rng.normal(), b = rng.normal();
      Tensor mix = x;
      for (std::size_t i = 0; i < mix.numel(); ++i) mix[i] = a * x[i] + b * y[i];
      Tensor lin = dynamic_image(x, v);
      const Tensor dy = dynamic_image(y, v);
      for (std::size_t i = 0; i < lin.numel(); ++i) lin[i] = a * lin[i] + b * dy[i];
      c.expect(max_abs_diff(dynamic_image(mix, v), lin) < 1e-12, "linearity");
    }
    Tensor fwd = random_tensor(rng, Shape{n, 1, 3, 3}), rev = fwd;
    for (std::size_t t = 0; t < n; ++t)
      std::copy(fwd.data.begin() + (n - 1 - t) * 9, fwd.data.begin() + (n - t) * 9, rev.data.begin() + t * 9);
    Tensor neg = dynamic_image(rev, RankPoolVariant::direct_frame);
    for (double& v : neg.data) v = -v;
    c.expect(max_abs_diff(dynamic_image(fwd, RankPoolVariant::direct_frame), neg) < 1e-12, "time reversal");
  }
  return c.outcome("constant max |d| " + fmt("%.1e", worst) + ", weights, direct, linearity, reversal ok");
}

Outcome arp_vs_exact() {
  const auto t0 = Clock::now();
  Rng rng(303);
  std::size_t positive = 0;
  const std::size_t trials = 200;
  for (std::size_t i = 0; i < trials; ++i) {
    Tensor f(Shape{5, 1, 1, 8});
    for (double& v : f.data) v = rng.uniform();
    const RankPoolConfig cfg;
    const Tensor exact = rank_pool_exact(f, cfg);
    const Tensor arp = dynamic_image(f, cfg.variant);
    positive += oracle::cosine(exact.data, arp.data) > 0.0;
  }
  const double secs = seconds_since(t0);
  Checks c;
  c.expect(positive >= 190, std::to_string(positive) + "/200 positive");
  c.expect(secs < 60.0, "runtime " + fmt("%.1f", secs) + " s");
  return c.outcome(std::to_string(positive) + "/200 positive cosine, " + fmt("%.2f", secs) + " s");
}

Outcome attention_invariants() {
  Checks c;
  Rng rng(404);
  double worst_sum = 0.0, worst_ratio = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    ad::Tape tape;
    std::array<ad::Value, 4> fs;
    const std::size_t dim = 1 + rep % 32;
    for (auto& v : fs) v = tape.constant(random_tensor(rng, Shape{dim}));
    const ad::Value a = segment_attention(fs, tape.constant(random_tensor(rng, Shape{dim})));
    double s = 0.0, mx = 0.0, mn = 1.0;
    for (double v : a.data()) {
      s += v;
      mx = std::max(mx, v);
      mn = std::min(mn, v);
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    worst_ratio = std::max(worst_ratio, mx / mn);
  }
  c.expect(worst_sum <= 1e-9, "alpha sum off by " + fmt("%.3g", worst_sum));
  c.expect(worst_ratio < std::exp(1.0), "max/min alpha " + fmt("%.6f", worst_ratio));

  for (int rep = 0; rep < 20; ++rep) {
    ad::Tape tape;
    const Tensor x = random_tensor(rng, Shape{8, 3, 3});
    NonLocalLeaves p{tape.constant(random_tensor(rng, Shape{4, 8})), tape.constant(random_tensor(rng, Shape{4, 8})),
                     tape.constant(random_tensor(rng, Shape{4, 8})), tape.constant(Tensor(Shape{8, 4}, 0.0))};
    const ad::Value out = non_local(tape.constant(x), p);
    c.expect(std::equal(out.data().begin(), out.data().end(), x.data.begin()), "w_y = 0 is not the identity");
  }

  double worst_nl = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    ad::Tape tape;
    const Tensor x = random_tensor(rng, Shape{2, 2, 2});
    const Tensor xi = random_tensor(rng, Shape{1, 2}), psi = random_tensor(rng, Shape{1, 2}),
                 g = random_tensor(rng, Shape{1, 2}), y = random_tensor(rng, Shape{2, 1});
    const ad::Value out =
        non_local(tape.constant(x), {tape.constant(xi), tape.constant(psi), tape.constant(g), tape.constant(y)});
    auto mat = [](const Tensor& t, std::size_t r, std::size_t cols) {
      oracle::Mat m(r, std::vector<double>(cols));
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[i * cols + j];
      return m;
    };
    const oracle::Mat ref = oracle::non_local(mat(x, 2, 4), mat(xi, 1, 2), mat(psi, 1, 2), mat(g, 1, 2), mat(y, 2, 1));
    for (std::size_t ch = 0; ch < 2; ++ch)
      for (std::size_t n = 0; n < 4; ++n) worst_nl = std::max(worst_nl, std::abs(out.data()[ch * 4 + n] - ref[ch][n]));
  }
  c.expect(worst_nl <= 1e-12, "non-local vs dense oracle " + fmt("%.3g", worst_nl));
  return c.outcome("alpha sum err " + fmt("%.1e", worst_sum) + ", max ratio " + fmt("%.4f", worst_ratio) +
                   ", identity exact, dense oracle err " + fmt("%.1e", worst_nl));
}

double de_of(const oracle::Mat& f) {
  ad::Tape tape;
  std::array<ad::Value, 4> v;
  for (std::size_t i = 0; i < 4; ++i) v[i] = tape.constant(Tensor(Shape{f[i].size()}, f[i]));
  return de_loss(v).item();
}

Outcome de_loss_values() {
  Checks c;
  c.expect(de_of(oracle::Mat(4, {0.3, -1.0, 2.0})) == 1.0, "identical features do not give exactly 1");
  const oracle::Mat line{{0.0}, {1.0}, {2.0}, {4.0}};
  const double l = de_of(line);
  c.expect(std::abs(l - oracle::de_loss(line)) <= 1e-9, "line example vs direct evaluation");
  c.expect(std::abs(l - 0.644271) <= 5e-7, "line example " + fmt("%.9f", l));
  Rng rng(505);
  double worst_scale = 0.0, lo = 1.0, hi = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    oracle::Mat f(4, std::vector<double>(1 + rep % 8));
    for (auto& row : f)
      for (double& v : row) v = rng.normal();
    const double base = de_of(f);
    lo = std::min(lo, base);
    hi = std::max(hi, base);
    for (double k : {0.1, 10.0}) {
      oracle::Mat g = f;
      for (auto& row : g)
        for (double& v : row) v *= k;
      worst_scale = std::max(worst_scale, std::abs(de_of(g) - base));
    }
  }
  c.expect(worst_scale <= 1e-9, "scale invariance err " + fmt("%.3g", worst_scale));
  c.expect(lo >= 0.5 && hi <= 1.0, "range [" + fmt("%.6f", lo) + ", " + fmt("%.6f", hi) + "]");
  return c.outcome("L(line) = " + fmt("%.9f", l) + ", scale err " + fmt("%.1e", worst_scale) + ", range [" +
                   fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "]");
}

struct SynthData {
  Manifest manifest;
  std::vector<FrameSequence> sequences;
};

SynthData default_synthetic() {
  SynthData d;
  d.sequences = synth_sequences(SynthSpec{});
  d.manifest.class_names = kSynthClassNames;
  for (const auto& s : d.sequences) d.manifest.entries.push_back({s.source_path, s.subject_id, s.label, {}});
  return d;
}

// The full-model run of criterion 6 doubles as the (T,T) cell of the ablation grid.
std::optional<LosoReport> g_full_run;

Outcome synthetic_end_to_end() {
  const SynthData d = default_synthetic();
  const auto t0 = Clock::now();
  const TrainConfig full;
  g_full_run = run_loso(d.manifest, d.sequences, full);
  const double full_secs = seconds_since(t0);
  TrainConfig base;
  base.input = InputMode::middle_frame;
  const LosoReport b = run_loso(d.manifest, d.sequences, base);
  const double secs = seconds_since(t0);
  const Metrics& m = g_full_run->aggregate;
  Checks c;
  c.expect(m.accuracy >= 0.85, "full accuracy " + fmt("%.4f", m.accuracy));
  c.expect(m.macro_f1 >= 0.80, "full macro-F1 " + fmt("%.4f", m.macro_f1));
  c.expect(b.aggregate.accuracy <= 0.45, "baseline accuracy " + fmt("%.4f", b.aggregate.accuracy));
  c.expect(secs < 900.0, "runtime " + fmt("%.0f", secs) + " s");
  return c.outcome("full acc " + fmt("%.4f", m.accuracy) + " F1 " + fmt("%.4f", m.macro_f1) + ", baseline acc " +
                   fmt("%.4f", b.aggregate.accuracy) + ", " + fmt("%.0f", full_secs) + " s + " +
                   fmt("%.0f", secs - full_secs) + " s on " + std::to_string(resolve_threads(0)) + " thread(s)");
}

Outcome ablation_structure() {
  const SynthData d = default_synthetic();
  const TrainConfig cfg;
  std::vector<AblationRow> rows;
  for (const auto& [stma, de] : {std::pair{false, false}, {false, true}, {true, false}, {true, true}}) {
    TrainConfig c = cfg;
    c.enable_stma = stma;
    c.enable_de_loss = de;
    AblationRow row{stma, de, {}, {}};
    row.report = (stma && de && g_full_run) ? *g_full_run : run_loso(d.manifest, d.sequences, c);
    for (const auto& f : row.report.folds) row.final_dbar_std.push_back(f.log.back().mean_dbar_std);
    rows.push_back(std::move(row));
  }
  std::printf("  final mean std(D-bar) per fold, (stma,de) = FF FT TF TT\n");
  for (std::size_t f = 0; f < rows[0].final_dbar_std.size(); ++f) {
    std::printf("  fold %s:", rows[0].report.folds[f].held_out_subject.c_str());
    for (const auto& r : rows) std::printf(" %.6f", r.final_dbar_std[f]);
    std::printf("\n");
  }
  Checks c;
  c.expect(rows.size() == 4, "grid incomplete");
  // DE on vs DE off with the same attention setting: rows (F,T)/(F,F) and (T,T)/(T,F).
  for (const auto& [on, off] : {std::pair{1, 0}, {3, 2}})
    for (std::size_t f = 0; f < rows[on].final_dbar_std.size(); ++f)
      c.expect(rows[on].final_dbar_std[f] >= rows[off].final_dbar_std[f],
               "fold " + rows[on].report.folds[f].held_out_subject + " stma=" + (rows[on].enable_stma ? "T" : "F") +
                   ": " + fmt("%.6f", rows[on].final_dbar_std[f]) + " < " + fmt("%.6f", rows[off].final_dbar_std[f]));
  std::ostringstream acc;
  acc << "acc (stma,de): ";
  for (const auto& r : rows)
    acc << "(" << (r.enable_stma ? 'T' : 'F') << "," << (r.enable_de_loss ? 'T' : 'F') << ")="
        << fmt("%.3f", r.report.aggregate.accuracy) << " ";
  return c.outcome(acc.str() + "[ordering reported, not asserted]");
}

Outcome metrics_oracle() {
  Checks c;
  const std::vector<std::size_t> truth{0, 0, 1, 1, 2, 2}, pred{0, 0, 1, 0, 2, 1};
  const Metrics ex = compute_metrics(pred, truth, 3);
  c.expect(std::abs(ex.macro_f1 - 0.655556) < 1e-6, "worked example macro-F1 " + fmt("%.6f", ex.macro_f1));
  c.expect(std::abs(ex.macro_f1 - oracle::score(pred, truth, 3).macro_f1) <= 1e-12, "worked example vs scorer");
  Rng rng(808);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t k = 2 + rng.uniform_index(5), n = 1 + rng.uniform_index(50);
    std::vector<std::size_t> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform_index(k);
      t[i] = rng.uniform_index(k);
    }
    const Metrics m = compute_metrics(p, t, k);
    const oracle::Scores s = oracle::score(p, t, k);
    c.expect(m.accuracy == s.accuracy, "accuracy mismatch");
    c.expect(std::abs(m.macro_f1 - s.macro_f1) <= 1e-12, "macro-F1 mismatch");
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) c.expect(double(m.confusion[a][b]) == s.confusion[a][b], "confusion");
  }
  return c.outcome("worked example " + fmt("%.6f", ex.macro_f1) + ", 100 random sets agree");
}

Outcome protocol_invariants() {
  Checks c;
  Rng rng(909);
  std::size_t checked = 0;
  for (int rep = 0; rep < 100; ++rep) {
    Manifest m;
    m.class_names = {"a", "b", "c"};
    const std::size_t n = 2 + rng.uniform_index(60), subjects = 2 + rng.uniform_index(9);
    for (std::size_t i = 0; i < n; ++i) {
      // The first two entries always belong to different subjects.
      const std::size_t sid = i < 2 ? i : rng.uniform_index(subjects);
      m.entries.push_back({"q" + std::to_string(i), "p" + std::to_string(sid), rng.uniform_index(3), {}});
    }
    const auto subj = m.subjects();
    ++checked;
    const LosoSplit split = loso_split(m);
    c.expect(split.folds.size() == subj.size(), "fold count");
    std::vector<int> held(n, 0);
    for (std::size_t f = 0; f < split.folds.size(); ++f) {
      const auto& fold = split.folds[f];
      c.expect(fold.held_out_subject == subj[f], "fold order");
      c.expect(fold.train.size() + fold.val.size() == n, "train + val != all");
      for (std::size_t i : fold.val) {
        c.expect(m.entries[i].subject == fold.held_out_subject, "val subject");
        ++held[i];
      }
      for (std::size_t i : fold.train) c.expect(m.entries[i].subject != fold.held_out_subject, "subject leak");
    }
    for (int h : held) c.expect(h == 1, "entry not held out exactly once");
  }

  SynthSpec spec;
  spec.num_subjects = 2;
  spec.seqs_per_subject = 3;
  spec.extent = 16;
  spec.frames = 12;
  const auto seqs = synth_sequences(spec);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.model.backbone.channels = {4, 8};
  const TrainResult a = train_fold(seqs, cfg), b = train_fold(seqs, cfg);
  const std::string bytes = encode_checkpoint(a.params);
  c.expect(bytes == encode_checkpoint(b.params), "training not bit-deterministic");
  const EvalResult ea = evaluate(a.params, seqs, 3, cfg, 77), eb = evaluate(b.params, seqs, 3, cfg, 77);
  c.expect(ea.predictions == eb.predictions && ea.metrics.macro_f1 == eb.metrics.macro_f1,
           "evaluation not deterministic");
  for (std::size_t i = 0; i < ea.alpha.size(); ++i) c.expect(ea.alpha[i].alpha == eb.alpha[i].alpha, "alpha differs");
  const ModelParams back = decode_checkpoint(bytes);
  c.expect(encode_checkpoint(back) == bytes, "checkpoint re-encode differs");
  bool same = true;
  std::vector<const Tensor*> x, y;
  a.params.for_each([&](const std::string&, const Tensor& t) { x.push_back(&t); });
  back.for_each([&](const std::string&, const Tensor& t) { y.push_back(&t); });
  same = x.size() == y.size();
  for (std::size_t i = 0; same && i < x.size(); ++i) same = x[i]->shape == y[i]->shape && x[i]->data == y[i]->data;
  c.expect(same, "checkpoint round trip not bit-exact");
  return c.outcome(std::to_string(checked) + " random manifests split correctly, train/eval deterministic, SMAS exact");
}

std::set<int> parse_only(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) != "--only" || i + 1 >= argc) continue;
    std::stringstream ss(argv[++i]);
    for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
  }
  return only;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"dynamic image invariants", dssi_invariants},
      {"approximate vs exact rank pooling", arp_vs_exact},
      {"attention invariants", attention_invariants},
      {"DE loss values", de_loss_values},
      {"synthetic LOSO vs middle-frame baseline", synthetic_end_to_end},
      {"ablation grid", ablation_structure},
      {"metrics oracle", metrics_oracle},
      {"protocol invariants", protocol_invariants},
  };
  const std::set<int> only = parse_only(argc, argv);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s - %s\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
