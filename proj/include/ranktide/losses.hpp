#pragma once

#include <array>
#include <span>
#include <vector>

#include "json.hpp"

#include "ranktide/autodiff.hpp"

namespace ranktide {

struct DeLossConfig {
  /// Below this range of the six distances, the normalized distances are
  /// defined as 0 (so the loss is exactly 1 and carries no gradient).
  double epsilon = 1e-12;
  /// true: std of the min-max normalized distances; false: std of raw distances.
  bool normalize = true;
};

/// D_ij = |F_i - F_j|_2 in the order (0,1),(0,2),(0,3),(1,2),(1,3),(2,3).
ad::Value pairwise_distances(const std::array<ad::Value, 4>& features);

/// Deviation enhancement loss: 1 - population std of (D - mean D) / (max D - min D).
ad::Value de_loss(const std::array<ad::Value, 4>& features, const DeLossConfig& cfg = {});

inline constexpr double kDefaultTradeoff = 0.03;

struct LossBreakdown {
  double ce = 0.0;
  double de = 0.0;
  double total = 0.0;
  double tradeoff_lambda = kDefaultTradeoff;
};

struct JointLoss {
  ad::Value total;
  LossBreakdown parts;
};

/// total = CE + lambda * DE. With lambda == 0 the DE term is evaluated for
/// reporting but is not connected to `total`.
JointLoss total_loss(ad::Value logits, std::size_t label, const std::array<ad::Value, 4>& features,
                     double tradeoff_lambda = kDefaultTradeoff, const DeLossConfig& cfg = {});

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  /// confusion[truth][pred]
  std::vector<std::vector<std::size_t>> confusion;
  std::vector<double> precision, recall, f1;
};

/// Accuracy, macro-F1 over all `num_classes` classes (a class whose precision
/// and recall are both zero or undefined scores F1 = 0), and the confusion matrix.
Metrics compute_metrics(std::span<const std::size_t> preds, std::span<const std::size_t> truth, std::size_t num_classes);

/// {accuracy, macro_f1, confusion, per_class: {precision, recall, f1}}
nlohmann::json to_json(const Metrics& m);

}  // namespace ranktide
