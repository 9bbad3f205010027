#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ranktide/autodiff.hpp"

namespace ranktide::ad {

/// Builds a scalar (single-element) value from leaves placed on `tape`.
using ScalarFn = std::function<Value(Tape& tape, std::span<const Value> inputs)>;

struct GradCheckReport {
  /// Per input: ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf),
  /// or 0 when both gradients vanish.
  std::vector<double> rel_error;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `f` with central differences
/// (f(x + eps) - f(x - eps)) / 2eps, one element at a time. Throws Error
/// if any evaluation produces a non-finite value.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps = 1e-5,
                           double tol = 1e-5);

}  // namespace ranktide::ad
