#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ranktide/dssi.hpp"
#include "ranktide/losses.hpp"
#include "ranktide/model.hpp"
#include "ranktide/sequence_io.hpp"

namespace ranktide {

enum class OptimizerKind { adam, sgd_momentum };

/// Where training-set augmentation is applied, if at all.
enum class AugmentMode { none, sequence, dynamic_image };

/// What the network sees: the four dynamic images, or only the middle
/// frame (static single-image baseline).
enum class InputMode { dssi, middle_frame };

struct TrainConfig {
  double lr = 3e-4;
  std::size_t epochs = 100;
  double tradeoff_lambda = kDefaultTradeoff;
  std::uint64_t seed = 1;
  std::size_t batch_size = 8;
  bool enable_stma = true;
  bool enable_de_loss = true;
  OptimizerKind optimizer = OptimizerKind::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double momentum = 0.9;
  AugmentMode augment = AugmentMode::none;
  AugmentSpec augment_spec;
  InputMode input = InputMode::dssi;
  ModelConfig model;
  RankPoolConfig rank_pool;
  DeLossConfig de;
  /// Folds trained concurrently; 0 = hardware concurrency. RANKTIDE_THREADS caps it.
  std::size_t threads = 0;

  /// Lambda actually applied (0 when the DE term is disabled).
  double effective_lambda() const { return enable_de_loss ? tradeoff_lambda : 0.0; }
  void validate() const;
};

// ---- optimizer ----

struct OptimizerState {
  ModelParams m, v;  // first/second moments (adam) or velocity in m (sgd)
  std::size_t step = 0;
};

OptimizerState make_optimizer_state(const ModelParams& p);

/// One update of `params` from `grads`. Requires exclusive access to `params`.
void optimizer_step(ModelParams& params, const ModelParams& grads, OptimizerState& state, const TrainConfig& cfg);

// ---- per-sample evaluation ----

/// Network inputs for one sequence: the four standardized dynamic images
/// (or four copies of the standardized middle frame in middle_frame mode).
std::array<Tensor, 4> sample_inputs(const FrameSequence& seq, std::uint64_t dssi_seed, const TrainConfig& cfg);

/// DSSI seed used at evaluation time for a given sequence.
std::uint64_t eval_dssi_seed(std::uint64_t fixed_seed, const FrameSequence& seq);

// ---- training ----

struct EpochLog {
  std::size_t epoch = 0;
  double ce = 0.0, de = 0.0, total = 0.0;
  std::array<double, 4> mean_alpha{};
  double mean_dbar_std = 0.0;
};
nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains from a fresh initialization. Deterministic given (train, cfg).
/// Throws Error on a non-finite loss.
TrainResult train_fold(const std::vector<FrameSequence>& train, const TrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

// ---- evaluation ----

struct AlphaRow {
  std::string sequence;
  std::array<double, 4> alpha{};
};

struct EvalResult {
  Metrics metrics;
  std::vector<std::size_t> predictions, truth;
  std::vector<AlphaRow> alpha;
};

/// Predicts argmax logits with DSSI plans seeded from `fixed_seed`.
EvalResult evaluate(const ModelParams& params, const std::vector<FrameSequence>& entries, std::size_t num_classes,
                    const TrainConfig& cfg, std::uint64_t fixed_seed);

// ---- leave-one-subject-out ----

struct LosoFold {
  std::string held_out_subject;
  std::vector<std::size_t> train, val;  // indices into the manifest entries
};

struct LosoSplit {
  std::vector<LosoFold> folds;
};

/// One fold per distinct subject, ordered by subject id.
LosoSplit loso_split(const Manifest& manifest);

struct FoldReport {
  std::string held_out_subject;
  Metrics metrics;
  std::vector<std::size_t> val, predictions, truth;
  std::vector<std::string> val_sequences;
  std::vector<AlphaRow> alpha;
  std::vector<EpochLog> log;
  ModelParams params;
};

struct LosoReport {
  std::vector<FoldReport> folds;
  Metrics aggregate;  // pooled over all held-out predictions
  double mean_fold_accuracy = 0.0;
};
nlohmann::json to_json(const LosoReport& r, bool include_alpha = false);

struct RunOptions {
  /// When set, per-fold logs (fold_<subject>.jsonl) and checkpoints are written here.
  std::optional<std::filesystem::path> out_dir;
  std::uint64_t eval_seed = 12345;
};

LosoReport run_loso(const Manifest& manifest, const std::vector<FrameSequence>& sequences, const TrainConfig& cfg,
                    const RunOptions& opts = {});

struct AblationRow {
  bool enable_stma = false, enable_de_loss = false;
  LosoReport report;
  /// Final-epoch mean std of the normalized distances, per fold.
  std::vector<double> final_dbar_std;
};

/// The four (enable_stma, enable_de_loss) combinations with matched seeds,
/// ordered (F,F), (F,T), (T,F), (T,T) as (enable_stma, enable_de_loss).
std::vector<AblationRow> run_ablation(const Manifest& manifest, const std::vector<FrameSequence>& sequences,
                                      const TrainConfig& cfg, const RunOptions& opts = {});
nlohmann::json to_json(const std::vector<AblationRow>& rows);

struct SweepRow {
  double lambda = 0.0;
  LosoReport report;
};

std::vector<SweepRow> lambda_sweep(const Manifest& manifest, const std::vector<FrameSequence>& sequences,
                                   const TrainConfig& cfg, const std::vector<double>& lambdas,
                                   const RunOptions& opts = {});
/// "lambda,accuracy,macro_f1" header plus one row per lambda.
std::string sweep_csv(const std::vector<SweepRow>& rows);

/// Thread count for fold-level parallelism: `requested` (0 = hardware concurrency),
/// capped by RANKTIDE_THREADS when that is set to a positive value.
std::size_t resolve_threads(std::size_t requested);

}  // namespace ranktide
