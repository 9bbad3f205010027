#include "ranktide/gradsuite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>

#include "ranktide/gradcheck.hpp"
#include "ranktide/losses.hpp"
#include "ranktide/model.hpp"
#include "ranktide/rng.hpp"

namespace ranktide {

using namespace ad;

namespace {

constexpr double kKinkMargin = 1e-3;

struct Instance {
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

using Generator = std::function<Instance(Rng&)>;

struct Case {
  std::string name;
  bool composite;
  Generator make;
};

Tensor randn(Rng& rng, Shape s, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

/// sum(y * R) with R a fixed pseudo-random tensor, so every output element
/// receives a distinct upstream gradient.
Value contract(Value y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.tape().constant(randn(rng, y.shape()))));
}

/// Distance of the evaluation point from the nearest non-differentiable point
/// of any relu / max / min node on the tape.
double kink_margin(const Tape& tape) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const auto& n = tape.node(id);
    const std::string op = n.op ? n.op : "";
    if (op == "relu") {
      for (double v : tape.node(n.inputs.at(0)).value.data) margin = std::min(margin, std::abs(v));
    } else if (op == "max" || op == "min") {
      std::vector<double> v = tape.node(n.inputs.at(0)).value.data;
      if (v.size() < 2) continue;
      std::sort(v.begin(), v.end());
      margin = std::min(margin, op == "max" ? v[v.size() - 1] - v[v.size() - 2] : v[1] - v[0]);
    }
  }
  return margin;
}

bool smooth_at(const Instance& inst) {
  Tape tape;
  std::vector<Value> leaves;
  for (const auto& t : inst.inputs) leaves.push_back(tape.constant(t));
  inst.fn(tape, leaves);
  return kink_margin(tape) >= kKinkMargin;
}

/// Unary elementwise op on a random [3 x 4] input.
Case unary(std::string name, std::function<Value(Value)> op, std::function<Tensor(Rng&)> input = {}) {
  return {name, false, [op, input](Rng& rng) {
            const std::uint64_t w = rng.next();
            Tensor x = input ? input(rng) : randn(rng, Shape{3, 4});
            return Instance{[op, w](Tape&, std::span<const Value> in) { return contract(op(in[0]), w); }, {x}};
          }};
}

Case binary(std::string name, std::function<Value(Value, Value)> op, Shape a, Shape b) {
  return {name, false, [op, a, b](Rng& rng) {
            const std::uint64_t w = rng.next();
            return Instance{[op, w](Tape&, std::span<const Value> in) { return contract(op(in[0], in[1]), w); },
                            {randn(rng, a), randn(rng, b)}};
          }};
}

ParamLeaves leaves_from(std::span<const Value> in, std::size_t stages) {
  ParamLeaves p;
  std::size_t k = 0;
  for (std::size_t s = 0; s < stages; ++s) {
    p.conv_w.push_back(in[k++]);
    p.conv_b.push_back(in[k++]);
  }
  p.nl = {in[k], in[k + 1], in[k + 2], in[k + 3]};
  k += 4;
  p.attn_q = in[k++];
  p.cls_w = in[k++];
  p.cls_b = in[k++];
  return p;
}

Instance composite_instance(Rng& rng, bool stma) {
  ModelConfig mc;
  mc.backbone.channels = {2, 4};
  mc.num_classes = 3;
  ModelParams params = init_params(mc, rng.next());
  // Non-zero values everywhere so every path carries gradient.
  params.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.data) v = 0.5 * rng.normal();
  });
  std::vector<Tensor> inputs;
  params.for_each([&](const std::string&, const Tensor& t) { inputs.push_back(t); });
  std::array<Tensor, 4> images;
  for (auto& img : images) img = randn(rng, Shape{1, 8, 8});
  const std::size_t label = rng.uniform_index(mc.num_classes);
  const double lambda = rng.uniform(0.03, 1.0);
  const std::size_t stages = mc.backbone.channels.size();
  return {[=](Tape& tape, std::span<const Value> in) {
            const ForwardResult r = forward(tape, images, leaves_from(in, stages), {stma});
            return total_loss(r.logits, label, r.features, lambda).total;
          },
          inputs};
}

/// y = 2x whose backward deliberately returns -2g.
Value wrong_sign_double(Value x) {
  Tensor out = Tensor(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  for (double& v : out.data) v *= 2.0;
  return x.tape().record("wrong_sign", std::move(out), {x}, [x](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] -= 2.0 * g[i];
  });
}

std::vector<Case> all_cases(bool inject_fault) {
  auto positive = [](Rng& rng) {
    Tensor t = randn(rng, Shape{3, 4});
    for (double& v : t.data) v = std::abs(v) + 0.2;
    return t;
  };
  std::vector<Case> c;
  c.push_back(binary("add", [](Value a, Value b) { return add(a, b); }, Shape{3, 4}, Shape{3, 4}));
  c.push_back(binary("sub", [](Value a, Value b) { return sub(a, b); }, Shape{3, 4}, Shape{3, 4}));
  c.push_back(binary("mul", [](Value a, Value b) { return mul(a, b); }, Shape{3, 4}, Shape{3, 4}));
  c.push_back(unary("scale", [](Value x) { return scale(x, -1.7); }));
  c.push_back(unary("sigmoid", [](Value x) { return sigmoid(x); }));
  c.push_back(unary("relu", [](Value x) { return relu(x); }));
  c.push_back(unary("sqrt", [](Value x) { return sqrt(x); }, positive));
  c.push_back(binary("mul_scalar", [](Value a, Value s) { return mul_scalar(a, s); }, Shape{3, 4}, Shape{1}));
  c.push_back(binary("sub_scalar", [](Value a, Value s) { return sub_scalar(a, s); }, Shape{3, 4}, Shape{1}));
  c.push_back({"div_scalar", false, [](Rng& rng) {
                 const std::uint64_t w = rng.next();
                 Tensor s = randn(rng, Shape{1});
                 s[0] = (s[0] < 0 ? -1.0 : 1.0) * (std::abs(s[0]) + 0.5);
                 return Instance{[w](Tape&, std::span<const Value> in) { return contract(div_scalar(in[0], in[1]), w); },
                                 {randn(rng, Shape{3, 4}), s}};
               }});
  c.push_back(unary("sum", [](Value x) { return sum(x); }));
  c.push_back(unary("mean", [](Value x) { return mean(x); }));
  c.push_back(unary("sum_axis0", [](Value x) { return sum(x, 0); }));
  c.push_back(unary("sum_axis1", [](Value x) { return sum(x, 1); }));
  c.push_back(unary("mean_axis0", [](Value x) { return mean(x, 0); }));
  c.push_back(unary("mean_axis2", [](Value x) { return mean(x, 2); },
                    [](Rng& rng) { return randn(rng, Shape{2, 3, 4}); }));
  c.push_back(unary("max", [](Value x) { return max(x); }));
  c.push_back(unary("min", [](Value x) { return min(x); }));
  c.push_back(unary("l2_norm", [](Value x) { return l2_norm(x); }));
  c.push_back(unary("reshape", [](Value x) { return reshape(x, Shape{2, 6}); }));
  c.push_back(unary("transpose", [](Value x) { return transpose(x); }));
  c.push_back(binary("stack", [](Value a, Value b) { return stack({a, b, a}); }, Shape{5}, Shape{5}));
  c.push_back(binary("concat", [](Value a, Value b) { return concat({a, b}); }, Shape{3}, Shape{4}));
  c.push_back(binary("matmul", [](Value a, Value b) { return matmul(a, b); }, Shape{3, 4}, Shape{4, 5}));
  c.push_back(unary("softmax_axis0", [](Value x) { return softmax(x, 0); }));
  c.push_back(unary("softmax_axis1", [](Value x) { return softmax(x, 1); }));
  c.push_back(unary("softmax_vector", [](Value x) { return softmax(x, 0); },
                    [](Rng& rng) { return randn(rng, Shape{6}, 2.0); }));
  c.push_back(unary("global_avg_pool", [](Value x) { return global_avg_pool(x); },
                    [](Rng& rng) { return randn(rng, Shape{3, 4, 5}); }));
  c.push_back(unary("avg_pool2d", [](Value x) { return avg_pool2d(x, 2); },
                    [](Rng& rng) { return randn(rng, Shape{2, 4, 6}); }));
  c.push_back({"conv2d_bias_pad1", false, [](Rng& rng) {
                 const std::uint64_t w = rng.next();
                 return Instance{[w](Tape&, std::span<const Value> in) {
                                   return contract(conv2d(in[0], in[1], in[2], 1, 1), w);
                                 },
                                 {randn(rng, Shape{2, 5, 6}), randn(rng, Shape{3, 2, 3, 3}), randn(rng, Shape{3})}};
               }});
  c.push_back(binary("conv2d_stride2", [](Value x, Value k) { return conv2d(x, k, 2, 0); }, Shape{2, 7, 5},
                     Shape{3, 2, 3, 3}));
  c.push_back({"cross_entropy", false, [](Rng& rng) {
                 const std::size_t label = rng.uniform_index(5);
                 return Instance{[label](Tape&, std::span<const Value> in) { return cross_entropy(in[0], label); },
                                 {randn(rng, Shape{5}, 2.0)}};
               }});
  c.push_back({"non_local", false, [](Rng& rng) {
                 const std::uint64_t w = rng.next();
                 return Instance{[w](Tape&, std::span<const Value> in) {
                                   return contract(non_local(in[0], {in[1], in[2], in[3], in[4]}), w);
                                 },
                                 {randn(rng, Shape{4, 3, 2}), randn(rng, Shape{2, 4}), randn(rng, Shape{2, 4}),
                                  randn(rng, Shape{2, 4}), randn(rng, Shape{4, 2})}};
               }});
  auto four_features = [](Rng& rng, std::vector<Tensor>& v, std::size_t c) {
    for (int i = 0; i < 4; ++i) v.push_back(randn(rng, Shape{c}));
  };
  c.push_back({"segment_attention", false, [four_features](Rng& rng) {
                 const std::uint64_t w = rng.next();
                 std::vector<Tensor> in;
                 four_features(rng, in, 5);
                 in.push_back(randn(rng, Shape{5}));
                 return Instance{[w](Tape&, std::span<const Value> x) {
                                   return contract(segment_attention({x[0], x[1], x[2], x[3]}, x[4]), w);
                                 },
                                 in};
               }});
  c.push_back({"aggregate", false, [four_features](Rng& rng) {
                 const std::uint64_t w = rng.next();
                 std::vector<Tensor> in;
                 four_features(rng, in, 5);
                 in.push_back(randn(rng, Shape{4}));
                 return Instance{[w](Tape&, std::span<const Value> x) {
                                   return contract(aggregate({x[0], x[1], x[2], x[3]}, x[4]), w);
                                 },
                                 in};
               }});
  c.push_back({"pairwise_distances", false, [four_features](Rng& rng) {
                 const std::uint64_t w = rng.next();
                 std::vector<Tensor> in;
                 four_features(rng, in, 5);
                 return Instance{[w](Tape&, std::span<const Value> x) {
                                   return contract(pairwise_distances({x[0], x[1], x[2], x[3]}), w);
                                 },
                                 in};
               }});
  c.push_back({"de_loss", false, [four_features](Rng& rng) {
                 std::vector<Tensor> in;
                 four_features(rng, in, 5);
                 return Instance{[](Tape&, std::span<const Value> x) { return de_loss({x[0], x[1], x[2], x[3]}); }, in};
               }});
  c.push_back({"de_loss_raw", false, [four_features](Rng& rng) {
                 std::vector<Tensor> in;
                 four_features(rng, in, 5);
                 return Instance{[](Tape&, std::span<const Value> x) {
                                   return de_loss({x[0], x[1], x[2], x[3]}, {1e-12, false});
                                 },
                                 in};
               }});
  c.push_back({"model_composite", true, [](Rng& rng) { return composite_instance(rng, true); }});
  c.push_back({"model_composite_no_stma", true, [](Rng& rng) { return composite_instance(rng, false); }});
  if (inject_fault) c.push_back(unary("fault_injection", [](Value x) { return wrong_sign_double(x); }));
  return c;
}

}  // namespace

bool GradSuiteReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const GradCaseResult& c) { return c.passed; });
}

GradSuiteReport run_grad_suite(const GradSuiteOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteReport report;
  for (const Case& c : all_cases(opts.inject_fault)) {
    GradCaseResult res{c.name, c.composite, 0, 0.0, c.composite ? opts.composite_tol : opts.op_tol, true};
    Rng rng(mix_seed(opts.seed, hash_string(c.name)));
    for (std::size_t i = 0; i < opts.instances; ++i) {
      Instance inst = c.make(rng);
      for (int tries = 0; !smooth_at(inst); ++tries) {
        if (tries == 100) throw Error("grad suite: could not draw a smooth instance for " + c.name);
        inst = c.make(rng);
      }
      const GradCheckReport r = grad_check(inst.fn, inst.inputs, opts.eps, res.tol);
      res.max_rel_error = std::max(res.max_rel_error, r.max_rel_error);
      res.passed = res.passed && r.passed;
      ++res.instances;
    }
    report.cases.push_back(res);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string format_table(const GradSuiteReport& r) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-26s %9s %14s %10s  %s\n", "op", "instances", "max_rel_err", "tol", "result");
  out += line;
  for (const auto& c : r.cases) {
    std::snprintf(line, sizeof line, "%-26s %9zu %14.3e %10.1e  %s\n", c.name.c_str(), c.instances, c.max_rel_error,
                  c.tol, c.passed ? "PASS" : "FAIL");
    out += line;
  }
  std::snprintf(line, sizeof line, "%s in %.2f s\n", r.passed() ? "all passed" : "FAILED", r.seconds);
  out += line;
  return out;
}

nlohmann::json to_json(const GradSuiteReport& r) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"op", c.name},
                     {"composite", c.composite},
                     {"instances", c.instances},
                     {"max_rel_error", c.max_rel_error},
                     {"tol", c.tol},
                     {"passed", c.passed}});
  return {{"cases", cases}, {"seconds", r.seconds}, {"passed", r.passed()}};
}

}  // namespace ranktide
