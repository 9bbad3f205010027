// ranktide: command-line front end.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "ranktide/config.hpp"
#include "ranktide/dssi.hpp"
#include "ranktide/gradsuite.hpp"
#include "ranktide/image_io.hpp"
#include "ranktide/model.hpp"
#include "ranktide/sequence_io.hpp"
#include "ranktide/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ranktide;

namespace {

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_attention(const fs::path& path, const std::vector<AlphaRow>& rows) {
  std::string out;
  for (const auto& r : rows) out += json{{"sequence", r.sequence}, {"alpha", r.alpha}}.dump() + "\n";
  write_file_atomic(path, out);
}

/// Options shared by the commands that build a RunSettings.
struct SettingsArgs {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::size_t> epochs, threads, batch_size;
  std::optional<double> lr, lambda;
  std::optional<std::uint64_t> seed, eval_seed;
  bool no_stma = false, no_de = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key=value config file (unknown keys are rejected)");
    app->add_option("--set", set, "override one setting, key=value (repeatable; applied after --config)");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--lr", lr, "learning rate");
    app->add_option("--lambda", lambda, "DE-loss trade-off weight");
    app->add_option("--seed", seed, "training seed");
    app->add_option("--eval-seed", eval_seed, "fixed seed for evaluation-time sampling");
    app->add_option("--batch-size", batch_size, "mini-batch size");
    app->add_option("--threads", threads, "folds trained in parallel (0 = auto; RANKTIDE_THREADS caps it)");
    app->add_flag("--no-stma", no_stma, "disable the non-local block and segment attention");
    app->add_flag("--no-de", no_de, "disable the DE loss");
  }

  /// defaults < config file < --set < dedicated flags
  RunSettings build() const {
    RunSettings s;
    if (!config.empty()) apply_settings(s, read_config_file(config));
    for (const auto& kv : set) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
      apply_setting(s, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (epochs) s.train.epochs = *epochs;
    if (threads) s.train.threads = *threads;
    if (batch_size) s.train.batch_size = *batch_size;
    if (lr) s.train.lr = *lr;
    if (lambda) s.train.tradeoff_lambda = *lambda;
    if (seed) s.train.seed = *seed;
    if (eval_seed) s.eval_seed = *eval_seed;
    if (no_stma) s.train.enable_stma = false;
    if (no_de) s.train.enable_de_loss = false;
    s.train.validate();
    return s;
  }
};

std::string settings_text(const RunSettings& s) {
  std::string out;
  for (const auto& [k, v] : describe(s)) out += k + " = " + v + "\n";
  return out;
}

struct Dataset {
  Manifest manifest;
  std::vector<FrameSequence> sequences;
};

Dataset load(const std::string& manifest_path, const RunSettings& s) {
  Dataset d{read_manifest(manifest_path), {}};
  d.sequences = load_dataset(d.manifest, s.load);
  return d;
}

int cmd_dynimg(const std::string& input, std::uint64_t seed, const std::string& variant, const std::string& out,
               std::size_t height, std::size_t width) {
  RankPoolConfig rp;
  if (variant == "timeavg") rp.variant = RankPoolVariant::time_average;
  else if (variant == "direct") rp.variant = RankPoolVariant::direct_frame;
  else throw Error("unknown variant '" + variant + "' (expected timeavg|direct)");
  const FrameSequence seq = load_sequence(input, {}, {height, width});
  const SamplingPlan plan = make_plan(seq.length(), seed);
  const auto images = compute_dssi(seq, plan, rp);
  fs::create_directories(out);
  for (const auto& di : images) {
    const std::string stem = "I_" + std::to_string(di.segment_id);
    export_display(di.pixels, fs::path(out) / (stem + ".png"));
    write_dimg(di.pixels, fs::path(out) / (stem + ".dimg"));
  }
  json bounds = json::array(), snippets = json::array();
  for (const auto& b : plan.segment_bounds) bounds.push_back({b.begin, b.end});
  for (const auto& s : plan.snippets) snippets.push_back(s);
  write_json(fs::path(out) / "plan.json", {{"num_frames", seq.length()},
                                           {"seed", seed},
                                           {"variant", variant},
                                           {"segment_bounds", bounds},
                                           {"snippets", snippets}});
  std::cout << "wrote 4 dynamic images to " << out << "\n";
  return 0;
}

int cmd_synth(const SynthSpec& spec, const std::string& out) {
  if (spec.num_subjects < 2) throw Error("--subjects must be at least 2");
  const Manifest m = synth_dataset(spec, out);
  std::cout << "wrote " << m.entries.size() << " sequences for " << m.subjects().size() << " subjects to " << out
            << "\n";
  return 0;
}

int cmd_train(const SettingsArgs& args, const std::string& manifest, const std::string& out,
              const std::vector<std::string>& exclude) {
  const RunSettings s = args.build();
  Dataset d = load(manifest, s);
  std::vector<FrameSequence> train;
  for (auto& seq : d.sequences)
    if (std::find(exclude.begin(), exclude.end(), seq.subject_id) == exclude.end()) train.push_back(std::move(seq));
  if (train.empty()) throw Error("no training sequences left after exclusions");
  TrainConfig cfg = s.train;
  cfg.model.num_classes = d.manifest.num_classes();

  fs::create_directories(out);
  write_file_atomic(fs::path(out) / "config.txt", settings_text(s));
  std::ofstream log(fs::path(out) / "train_log.jsonl", std::ios::trunc);
  if (!log) throw Error("cannot write " + (fs::path(out) / "train_log.jsonl").string());
  const TrainResult r = train_fold(train, cfg, [&](const EpochLog& e) {
    log << to_json(e).dump() << '\n' << std::flush;
    std::fprintf(stderr, "epoch %zu  ce %.4f  de %.4f  total %.4f\n", e.epoch, e.ce, e.de, e.total);
  });
  save_checkpoint(r.params, fs::path(out) / "model.smas");
  std::cout << "trained on " << train.size() << " sequences; checkpoint " << (fs::path(out) / "model.smas").string()
            << "\n";
  return 0;
}

int cmd_eval(const SettingsArgs& args, const std::string& manifest, const std::string& checkpoint,
             const std::string& out, bool dump_attention) {
  const RunSettings s = args.build();
  const Dataset d = load(manifest, s);
  const ModelParams params = load_checkpoint(checkpoint);
  const EvalResult r = evaluate(params, d.sequences, d.manifest.num_classes(), s.train, s.eval_seed);
  json preds = json::array();
  for (std::size_t i = 0; i < r.predictions.size(); ++i)
    preds.push_back({{"sequence", d.manifest.entries[i].sequence_dir},
                     {"truth", r.truth[i]},
                     {"prediction", r.predictions[i]}});
  json report = to_json(r.metrics);
  report["predictions"] = preds;
  fs::create_directories(out);
  write_json(fs::path(out) / "metrics.json", report);
  if (dump_attention) write_attention(fs::path(out) / "attention.jsonl", r.alpha);
  std::cout << "accuracy " << r.metrics.accuracy << "  macro_f1 " << r.metrics.macro_f1 << "\n";
  return 0;
}

void dump_loso_attention(const fs::path& path, const LosoReport& r) {
  std::vector<AlphaRow> rows;
  for (const auto& f : r.folds) rows.insert(rows.end(), f.alpha.begin(), f.alpha.end());
  write_attention(path, rows);
}

int cmd_loso(const SettingsArgs& args, const std::string& manifest, const std::string& out, bool ablation,
             bool dump_attention) {
  const RunSettings s = args.build();
  const Dataset d = load(manifest, s);
  fs::create_directories(out);
  write_file_atomic(fs::path(out) / "config.txt", settings_text(s));
  RunOptions opts{fs::path(out), s.eval_seed};
  if (ablation) {
    const auto rows = run_ablation(d.manifest, d.sequences, s.train, opts);
    for (const auto& row : rows) {
      const fs::path sub = fs::path(out) / (std::string("stma") + (row.enable_stma ? "1" : "0") + "_de" +
                                            (row.enable_de_loss ? "1" : "0"));
      write_json(sub / "report.json", to_json(row.report, dump_attention));
      if (dump_attention) dump_loso_attention(sub / "attention.jsonl", row.report);
    }
    write_json(fs::path(out) / "ablation.json", to_json(rows));
    std::printf("%-6s %-6s %9s %9s\n", "stma", "de", "accuracy", "macro_f1");
    for (const auto& row : rows)
      std::printf("%-6s %-6s %9.4f %9.4f\n", row.enable_stma ? "yes" : "no", row.enable_de_loss ? "yes" : "no",
                  row.report.aggregate.accuracy, row.report.aggregate.macro_f1);
    return 0;
  }
  const LosoReport r = run_loso(d.manifest, d.sequences, s.train, opts);
  write_json(fs::path(out) / "report.json", to_json(r, dump_attention));
  if (dump_attention) dump_loso_attention(fs::path(out) / "attention.jsonl", r);
  for (const auto& f : r.folds)
    std::printf("fold %-10s accuracy %.4f\n", f.held_out_subject.c_str(), f.metrics.accuracy);
  std::printf("aggregate accuracy %.4f  macro_f1 %.4f\n", r.aggregate.accuracy, r.aggregate.macro_f1);
  return 0;
}

int cmd_sweep(const SettingsArgs& args, const std::string& manifest, const std::string& out,
              const std::vector<double>& lambdas) {
  const RunSettings s = args.build();
  const Dataset d = load(manifest, s);
  fs::create_directories(out);
  const auto rows = lambda_sweep(d.manifest, d.sequences, s.train, lambdas, {fs::path(out), s.eval_seed});
  write_file_atomic(fs::path(out) / "sweep.csv", sweep_csv(rows));
  json j = json::array();
  for (const auto& r : rows) j.push_back({{"lambda", r.lambda}, {"report", to_json(r.report)}});
  write_json(fs::path(out) / "sweep.json", j);
  std::cout << sweep_csv(rows);
  return 0;
}

int cmd_gradcheck(const GradSuiteOptions& opts, const std::string& json_out) {
  const GradSuiteReport r = run_grad_suite(opts);
  std::cout << format_table(r);
  if (!json_out.empty()) write_json(json_out, to_json(r));
  return r.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ranktide: dynamic-image micro-expression pipeline"};
  app.require_subcommand(1);

  // dynimg
  auto* dyn = app.add_subcommand("dynimg", "compute the four dynamic images of one sequence");
  std::string dyn_in, dyn_out, dyn_variant = "timeavg";
  std::uint64_t dyn_seed = 0;
  std::size_t dyn_h = 0, dyn_w = 0;
  dyn->add_option("--input", dyn_in, "directory of >= 9 PNG/PGM frames")->required();
  dyn->add_option("--seed", dyn_seed, "sampling seed");
  dyn->add_option("--variant", dyn_variant, "rank pooling variant: timeavg|direct");
  dyn->add_option("--out", dyn_out, "output directory")->required();
  dyn->add_option("--height", dyn_h, "resize height (0 = native)");
  dyn->add_option("--width", dyn_w, "resize width (0 = native)");

  // synth
  auto* syn = app.add_subcommand("synth", "generate the synthetic dataset");
  SynthSpec spec;
  std::string syn_out;
  syn->add_option("--out", syn_out, "output directory")->required();
  syn->add_option("--subjects", spec.num_subjects, "number of subjects (>= 2)");
  syn->add_option("--per-subject", spec.seqs_per_subject, "sequences per subject (multiple of 3)");
  syn->add_option("--frames", spec.frames, "frames per sequence");
  syn->add_option("--extent", spec.extent, "frame height and width");
  syn->add_option("--motion", spec.motion_px, "blob displacement per frame in pixels");
  syn->add_option("--seed", spec.seed, "generator seed");

  // train
  auto* trn = app.add_subcommand("train", "train one model on a manifest");
  SettingsArgs trn_args;
  std::string trn_manifest, trn_out;
  std::vector<std::string> trn_exclude;
  trn->add_option("--manifest", trn_manifest, "manifest.jsonl")->required();
  trn->add_option("--out", trn_out, "output directory")->required();
  trn->add_option("--exclude-subject", trn_exclude, "subjects left out of training (repeatable)");
  trn_args.attach(trn);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  SettingsArgs ev_args;
  std::string ev_manifest, ev_ckpt, ev_out;
  bool ev_dump = false;
  ev->add_option("--manifest", ev_manifest, "manifest.jsonl")->required();
  ev->add_option("--checkpoint", ev_ckpt, "SMAS checkpoint")->required();
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_flag("--dump-attention", ev_dump, "write attention.jsonl with one alpha row per sequence");
  ev_args.attach(ev);

  // loso
  auto* lo = app.add_subcommand("loso", "leave-one-subject-out training and evaluation");
  SettingsArgs lo_args;
  std::string lo_manifest, lo_out;
  bool lo_ablation = false, lo_dump = false;
  lo->add_option("--manifest", lo_manifest, "manifest.jsonl")->required();
  lo->add_option("--out", lo_out, "output directory")->required();
  lo->add_flag("--ablation", lo_ablation, "run the four (stma, de) combinations");
  lo->add_flag("--dump-attention", lo_dump, "write attention.jsonl with one alpha row per held-out sequence");
  lo_args.attach(lo);

  // sweep
  auto* sw = app.add_subcommand("sweep", "LOSO for each DE-loss trade-off value");
  SettingsArgs sw_args;
  std::string sw_manifest, sw_out;
  std::vector<double> sw_lambdas{0.0, 0.03, 0.3};
  sw->add_option("--manifest", sw_manifest, "manifest.jsonl")->required();
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_option("--lambdas", sw_lambdas, "comma-separated lambda values")->delimiter(',');
  sw_args.attach(sw);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  GradSuiteOptions gopts;
  std::string gc_json;
  gc->add_option("--tol", gopts.op_tol, "per-op relative error tolerance");
  gc->add_option("--composite-tol", gopts.composite_tol, "tolerance for the full model graph");
  gc->add_option("--instances", gopts.instances, "random instances per op");
  gc->add_option("--seed", gopts.seed, "instance seed");
  gc->add_option("--json", gc_json, "also write the report as JSON");
  gc->add_flag("--inject-fault", gopts.inject_fault, "add an op with a wrong-sign gradient (self-test)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*dyn) return cmd_dynimg(dyn_in, dyn_seed, dyn_variant, dyn_out, dyn_h, dyn_w);
    if (*syn) return cmd_synth(spec, syn_out);
    if (*trn) return cmd_train(trn_args, trn_manifest, trn_out, trn_exclude);
    if (*ev) return cmd_eval(ev_args, ev_manifest, ev_ckpt, ev_out, ev_dump);
    if (*lo) return cmd_loso(lo_args, lo_manifest, lo_out, lo_ablation, lo_dump);
    if (*sw) return cmd_sweep(sw_args, sw_manifest, sw_out, sw_lambdas);
    if (*gc) return cmd_gradcheck(gopts, gc_json);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
