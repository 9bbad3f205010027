#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace ranktide {

struct GradSuiteOptions {
  std::size_t instances = 20;
  double op_tol = 1e-5;
  double composite_tol = 1e-4;
  double eps = 1e-5;
  std::uint64_t seed = 2024;
  /// Adds a case whose backward pass has a flipped sign; the suite must then fail.
  bool inject_fault = false;
};

struct GradCaseResult {
  std::string name;
  bool composite = false;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  double tol = 0.0;
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradCaseResult> cases;
  double seconds = 0.0;
  bool passed() const;
};

/// Runs every differentiable op and the composite model-plus-loss graph
/// against central differences on seeded random instances. Instances are
/// redrawn when they fall within 1e-3 of a relu / max / min kink.
GradSuiteReport run_grad_suite(const GradSuiteOptions& opts = {});

/// Fixed-width table: op, instances, max rel err, tol, PASS/FAIL.
std::string format_table(const GradSuiteReport& r);
nlohmann::json to_json(const GradSuiteReport& r);

}  // namespace ranktide
