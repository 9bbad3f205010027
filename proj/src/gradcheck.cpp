#include "ranktide/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ranktide::ad {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs) leaves.push_back(tape.constant(t));
  const Value out = f(tape, leaves);
  if (out.numel() != 1) throw Error("grad_check: function must return a single element");
  return out.item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps, double tol) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Value> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t));
    const Value out = f(tape, leaves);
    if (out.numel() != 1) throw Error("grad_check: function must return a single element");
    tape.backward(out);
    for (const Value& v : leaves) analytic.push_back(tape.grad_of(v));
  }

  GradCheckReport report;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + eps;
      const double fp = evaluate(f, probe);
      probe[k][i] = x0 - eps;
      const double fm = evaluate(f, probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric)) throw Error("grad_check: non-finite numeric gradient");
      const double a = analytic[k][i];
      diff = std::max(diff, std::abs(a - numeric));
      scale = std::max({scale, std::abs(a), std::abs(numeric)});
    }
    const double rel = scale > 0.0 ? diff / scale : 0.0;
    report.rel_error.push_back(rel);
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace ranktide::ad
