#include "ranktide/losses.hpp"

#include <algorithm>

namespace ranktide {

using namespace ad;

Value pairwise_distances(const std::array<Value, 4>& f) {
  std::vector<Value> d;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) d.push_back(l2_norm(sub(f[i], f[j])));
  return concat(d);
}

Value de_loss(const std::array<Value, 4>& features, const DeLossConfig& cfg) {
  if (!(cfg.epsilon > 0)) throw Error("de_loss: epsilon must be positive");
  Tape& tape = features[0].tape();
  Value d = pairwise_distances(features);
  if (cfg.normalize) {
    const Value range = sub(max(d), min(d));
    if (range.item() < cfg.epsilon) return tape.scalar(1.0);
    d = div_scalar(sub_scalar(d, mean(d)), range);
  }
  const Value centred = sub_scalar(d, mean(d));
  const Value std_dev = sqrt(mean(mul(centred, centred)));
  return sub(tape.scalar(1.0), std_dev);
}

JointLoss total_loss(Value logits, std::size_t label, const std::array<Value, 4>& features, double tradeoff_lambda,
                     const DeLossConfig& cfg) {
  if (!(tradeoff_lambda >= 0)) throw Error("total_loss: trade-off lambda must be >= 0");
  const Value ce = cross_entropy(logits, label);
  const Value de = de_loss(features, cfg);
  const Value total = tradeoff_lambda == 0.0 ? ce : add(ce, scale(de, tradeoff_lambda));
  return {total, {ce.item(), de.item(), total.item(), tradeoff_lambda}};
}

Metrics compute_metrics(std::span<const std::size_t> preds, std::span<const std::size_t> truth, std::size_t k) {
  if (preds.empty()) throw Error("metrics: empty input");
  if (preds.size() != truth.size()) throw Error("metrics: prediction and truth lengths differ");
  if (k == 0) throw Error("metrics: need at least one class");
  Metrics m;
  m.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= k || truth[i] >= k) throw Error("metrics: label out of range");
    ++m.confusion[truth[i]][preds[i]];
    correct += preds[i] == truth[i];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    const double tp = static_cast<double>(m.confusion[c][c]);
    double pred_c = 0.0, true_c = 0.0;
    for (std::size_t o = 0; o < k; ++o) {
      pred_c += static_cast<double>(m.confusion[o][c]);
      true_c += static_cast<double>(m.confusion[c][o]);
    }
    const double p = pred_c > 0 ? tp / pred_c : 0.0;
    const double r = true_c > 0 ? tp / true_c : 0.0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    m.precision.push_back(p);
    m.recall.push_back(r);
    m.f1.push_back(f);
    f1_sum += f;
  }
  m.macro_f1 = f1_sum / static_cast<double>(k);
  return m;
}

nlohmann::json to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"macro_f1", m.macro_f1},
          {"confusion", m.confusion},
          {"per_class", {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}}}};
}

}  // namespace ranktide
