#include "ranktide/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ranktide::ad {

namespace {

void require_same_shape(const char* op, Value a, Value b) {
  if (a.shape() != b.shape())
    throw Error(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

void require_scalar(const char* op, Value s) {
  if (s.numel() != 1) throw Error(std::string(op) + ": expected a single-element value, got " + s.shape().str());
}

void require_rank(const char* op, Value x, std::size_t rank) {
  if (x.shape().rank() != rank)
    throw Error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + x.shape().str());
}

Tensor copy_of(Value v) {
  return Tensor(v.shape(), std::vector<double>(v.data().begin(), v.data().end()));
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.rank())
    throw Error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + s.str());
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i < s.rank(); ++i)
    if (i != axis) dims.push_back(s[i]);
  if (dims.empty()) dims.push_back(1);
  return Shape(std::move(dims));
}

std::size_t select_index(std::span<const double> v, bool want_max) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (want_max ? v[i] > v[best] : v[i] < v[best]) best = i;
  return best;
}

}  // namespace

// ---------------------------------------------------------------- Value

const Shape& Value::shape() const { return tape_->nodes_.at(id_).value.shape; }

std::span<const double> Value::data() const { return tape_->nodes_.at(id_).value.data; }

std::span<const double> Value::grad() const { return tape_->nodes_.at(id_).grad; }

double Value::item() const {
  if (numel() != 1) throw Error("item(): value has shape " + shape().str());
  return data()[0];
}

bool Value::requires_grad() const { return tape_->nodes_.at(id_).requires_grad; }

// ---------------------------------------------------------------- Tape

Value Tape::leaf(Tensor t, bool requires_grad) {
  if (!t.all_finite()) throw Error("leaf: non-finite input value");
  nodes_.push_back(Node{"leaf", std::move(t), {}, requires_grad, {}, {}});
  return Value(this, nodes_.size() - 1);
}

Value Tape::record(const char* op, Tensor value, std::initializer_list<Value> inputs, BackwardFn fn) {
  return record(op, std::move(value), std::vector<Value>(inputs), std::move(fn));
}

Value Tape::record(const char* op, Tensor value, const std::vector<Value>& inputs, BackwardFn fn) {
  if (!value.all_finite()) throw Error(std::string(op) + ": produced a non-finite value");
  Node node{op, std::move(value), {}, false, {}, {}};
  for (const Value& in : inputs) {
    if (&in.tape() != this) throw Error(std::string(op) + ": input belongs to a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || in.requires_grad();
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Value(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_sink(Value v) {
  Node& n = nodes_.at(v.id());
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
  return n.grad;
}

void Tape::backward(Value out) {
  if (&out.tape() != this) throw Error("backward: value belongs to a different tape");
  if (out.numel() != 1) throw Error("backward: output must be a single element, got " + out.shape().str());
  if (!out.requires_grad()) return;
  grad_sink(out)[0] += 1.0;
  for (std::size_t id = out.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, Value(this, id), n.grad);
  }
}

Tensor Tape::grad_of(Value v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape, 0.0);
  return Tensor(n.value.shape, n.grad);
}

// ---------------------------------------------------------------- elementwise

Value add(Value a, Value b) {
  require_same_shape("add", a, b);
  Tensor out = copy_of(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bd[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, Value, std::span<const double> g) {
    for (Value v : {a, b}) {
      auto s = t.grad_sink(v);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
  });
}

Value sub(Value a, Value b) {
  require_same_shape("sub", a, b);
  Tensor out = copy_of(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bd[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape& t, Value, std::span<const double> g) {
    auto sa = t.grad_sink(a);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i];
    auto sb = t.grad_sink(b);
    for (std::size_t i = 0; i < sb.size(); ++i) sb[i] -= g[i];
  });
}

Value mul(Value a, Value b) {
  require_same_shape("mul", a, b);
  Tensor out = copy_of(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bd[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, Value, std::span<const double> g) {
    auto ad = a.data(), bd = b.data();
    auto sa = t.grad_sink(a);
    for (std::size_t i = 0; i < sa.size(); ++i) sa[i] += g[i] * bd[i];
    auto sb = t.grad_sink(b);
    for (std::size_t i = 0; i < sb.size(); ++i) sb[i] += g[i] * ad[i];
  });
}

Value scale(Value x, double c) {
  Tensor out = copy_of(x);
  for (double& v : out.data) v *= c;
  return x.tape().record("scale", std::move(out), {x}, [x, c](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += c * g[i];
  });
}

Value sigmoid(Value x) {
  Tensor out = copy_of(x);
  for (double& v : out.data) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return x.tape().record("sigmoid", std::move(out), {x}, [x](Tape& t, Value y, std::span<const double> g) {
    auto yd = y.data();
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * yd[i] * (1.0 - yd[i]);
  });
}

Value relu(Value x) {
  Tensor out = copy_of(x);
  for (double& v : out.data) v = v > 0 ? v : 0.0;
  return x.tape().record("relu", std::move(out), {x}, [x](Tape& t, Value, std::span<const double> g) {
    auto xd = x.data();
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (xd[i] > 0) s[i] += g[i];
  });
}

Value sqrt(Value x) {
  Tensor out = copy_of(x);
  for (double& v : out.data) {
    if (v < 0) throw Error("sqrt: negative input");
    v = std::sqrt(v);
  }
  // d sqrt(x)/dx at x = 0 is taken as 0.
  return x.tape().record("sqrt", std::move(out), {x}, [x](Tape& t, Value y, std::span<const double> g) {
    auto yd = y.data();
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (yd[i] > 0) s[i] += g[i] / (2.0 * yd[i]);
  });
}

// ---------------------------------------------------------------- tensor-by-scalar

Value mul_scalar(Value x, Value s) {
  require_scalar("mul_scalar", s);
  const double c = s.item();
  Tensor out = copy_of(x);
  for (double& v : out.data) v *= c;
  return x.tape().record("mul_scalar", std::move(out), {x, s}, [x, s](Tape& t, Value, std::span<const double> g) {
    const double c = s.item();
    auto xd = x.data();
    auto sx = t.grad_sink(x);
    for (std::size_t i = 0; i < sx.size(); ++i) sx[i] += c * g[i];
    auto ss = t.grad_sink(s);
    if (!ss.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ss[0] += g[i] * xd[i];
  });
}

Value sub_scalar(Value x, Value s) {
  require_scalar("sub_scalar", s);
  const double c = s.item();
  Tensor out = copy_of(x);
  for (double& v : out.data) v -= c;
  return x.tape().record("sub_scalar", std::move(out), {x, s}, [x, s](Tape& t, Value, std::span<const double> g) {
    auto sx = t.grad_sink(x);
    for (std::size_t i = 0; i < sx.size(); ++i) sx[i] += g[i];
    auto ss = t.grad_sink(s);
    if (!ss.empty())
      for (double gi : g) ss[0] -= gi;
  });
}

Value div_scalar(Value x, Value s) {
  require_scalar("div_scalar", s);
  const double c = s.item();
  if (c == 0.0) throw Error("div_scalar: division by zero");
  Tensor out = copy_of(x);
  for (double& v : out.data) v /= c;
  return x.tape().record("div_scalar", std::move(out), {x, s}, [x, s](Tape& t, Value, std::span<const double> g) {
    const double c = s.item();
    auto xd = x.data();
    auto sx = t.grad_sink(x);
    for (std::size_t i = 0; i < sx.size(); ++i) sx[i] += g[i] / c;
    auto ss = t.grad_sink(s);
    if (!ss.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ss[0] -= g[i] * xd[i] / (c * c);
  });
}

// ---------------------------------------------------------------- reductions

Value sum(Value x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return x.tape().record("sum", Tensor(Shape{1}, acc), {x}, [x](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    for (double& v : s) v += g[0];
  });
}

Value mean(Value x) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return x.tape().record("mean", Tensor(Shape{1}, acc / n), {x}, [x, n](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    for (double& v : s) v += g[0] / n;
  });
}

namespace {

Value reduce_axis(const char* op, Value x, std::size_t axis, bool average) {
  const AxisSplit sp = split_axis(op, x.shape(), axis);
  const double w = average ? 1.0 / static_cast<double>(sp.n) : 1.0;
  Tensor out(drop_axis(x.shape(), axis), 0.0);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += w * xd[(o * sp.n + k) * sp.inner + i];
  return x.tape().record(op, std::move(out), {x}, [x, sp, w](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) s[(o * sp.n + k) * sp.inner + i] += w * g[o * sp.inner + i];
  });
}

Value select(const char* op, Value x, bool want_max) {
  const std::size_t idx = select_index(x.data(), want_max);
  return x.tape().record(op, Tensor(Shape{1}, x.data()[idx]), {x},
                         [x, idx](Tape& t, Value, std::span<const double> g) { t.grad_sink(x)[idx] += g[0]; });
}

}  // namespace

Value sum(Value x, std::size_t axis) { return reduce_axis("sum_axis", x, axis, false); }
Value mean(Value x, std::size_t axis) { return reduce_axis("mean_axis", x, axis, true); }
Value max(Value x) { return select("max", x, true); }
Value min(Value x) { return select("min", x, false); }

Value l2_norm(Value x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  const double n = std::sqrt(acc);
  return x.tape().record("l2_norm", Tensor(Shape{1}, n), {x}, [x, n](Tape& t, Value, std::span<const double> g) {
    if (n == 0.0) return;
    auto xd = x.data();
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[0] * xd[i] / n;
  });
}

// ---------------------------------------------------------------- structure

Value reshape(Value x, Shape s) {
  if (s.numel() != x.numel()) throw Error("reshape: cannot reshape " + x.shape().str() + " to " + s.str());
  Tensor out(std::move(s), std::vector<double>(x.data().begin(), x.data().end()));
  return x.tape().record("reshape", std::move(out), {x}, [x](Tape& t, Value, std::span<const double> g) {
    auto sx = t.grad_sink(x);
    for (std::size_t i = 0; i < sx.size(); ++i) sx[i] += g[i];
  });
}

Value transpose(Value x) {
  require_rank("transpose", x, 2);
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  Tensor out(Shape{c, r});
  auto xd = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xd[i * c + j];
  return x.tape().record("transpose", std::move(out), {x}, [x, r, c](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) s[i * c + j] += g[j * r + i];
  });
}

Value stack(const std::vector<Value>& xs) {
  if (xs.empty()) throw Error("stack: no inputs");
  const Shape& s0 = xs.front().shape();
  if (s0.rank() >= 4) throw Error("stack: result would exceed rank 4");
  for (const Value& v : xs) require_same_shape("stack", xs.front(), v);
  std::vector<std::size_t> dims{xs.size()};
  dims.insert(dims.end(), s0.dims().begin(), s0.dims().end());
  const std::size_t n = s0.numel();
  Tensor out(Shape(std::move(dims)));
  for (std::size_t k = 0; k < xs.size(); ++k)
    std::copy(xs[k].data().begin(), xs[k].data().end(), out.data.begin() + static_cast<std::ptrdiff_t>(k * n));
  return xs.front().tape().record("stack", std::move(out), xs, [xs, n](Tape& t, Value, std::span<const double> g) {
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto s = t.grad_sink(xs[k]);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[k * n + i];
    }
  });
}

Value concat(const std::vector<Value>& xs) {
  if (xs.empty()) throw Error("concat: no inputs");
  std::size_t total = 0;
  for (const Value& v : xs) {
    require_rank("concat", v, 1);
    total += v.numel();
  }
  Tensor out(Shape{total});
  std::size_t off = 0;
  for (const Value& v : xs) {
    std::copy(v.data().begin(), v.data().end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += v.numel();
  }
  return xs.front().tape().record("concat", std::move(out), xs, [xs](Tape& t, Value, std::span<const double> g) {
    std::size_t off = 0;
    for (const Value& v : xs) {
      auto s = t.grad_sink(v);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[off + i];
      off += v.numel();
    }
  });
}

// ---------------------------------------------------------------- linear algebra / nn

Value matmul(Value a, Value b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw Error("matmul: inner dimensions disagree " + a.shape().str() + " x " + b.shape().str());
  Tensor out(Shape{m, n}, 0.0);
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, Value, std::span<const double> g) {
    auto ad = a.data(), bd = b.data();
    if (auto sa = t.grad_sink(a); !sa.empty()) {
      // dA = dC * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bd[p * n + j];
          sa[i * k + p] += acc;
        }
    }
    if (auto sb = t.grad_sink(b); !sb.empty()) {
      // dB = A^T * dC
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ad[i * k + p];
          for (std::size_t j = 0; j < n; ++j) sb[p * n + j] += av * g[i * n + j];
        }
    }
  });
}

Value softmax(Value x, std::size_t axis) {
  const AxisSplit sp = split_axis("softmax", x.shape(), axis);
  Tensor out(x.shape());
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t k) { return (o * sp.n + k) * sp.inner + i; };
      double m = xd[at(0)];
      for (std::size_t k = 1; k < sp.n; ++k) m = std::max(m, xd[at(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) z += (out[at(k)] = std::exp(xd[at(k)] - m));
      for (std::size_t k = 0; k < sp.n; ++k) out[at(k)] /= z;
    }
  return x.tape().record("softmax", std::move(out), {x}, [x, sp](Tape& t, Value y, std::span<const double> g) {
    auto yd = y.data();
    auto s = t.grad_sink(x);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t k) { return (o * sp.n + k) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[at(k)] * yd[at(k)];
        for (std::size_t k = 0; k < sp.n; ++k) s[at(k)] += yd[at(k)] * (g[at(k)] - dot);
      }
  });
}

Value global_avg_pool(Value x) {
  require_rank("global_avg_pool", x, 3);
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor out(Shape{c}, 0.0);
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += xd[ch * hw + i];
    out[ch] = acc / static_cast<double>(hw);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, c, hw](Tape& t, Value, std::span<const double> g) {
    auto s = t.grad_sink(x);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) s[ch * hw + i] += g[ch] * inv;
  });
}

Value avg_pool2d(Value x, std::size_t k) {
  require_rank("avg_pool2d", x, 3);
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  if (k == 0 || h % k != 0 || w % k != 0)
    throw Error("avg_pool2d: extent " + x.shape().str() + " not divisible by " + std::to_string(k));
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out(Shape{c, ho, wo}, 0.0);
  auto xd = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(ch * ho + y / k) * wo + xx / k] += inv * xd[(ch * h + y) * w + xx];
  return x.tape().record("avg_pool2d", std::move(out), {x},
                         [x, c, h, w, k, ho, wo, inv](Tape& t, Value, std::span<const double> g) {
                           auto s = t.grad_sink(x);
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t y = 0; y < h; ++y)
                               for (std::size_t xx = 0; xx < w; ++xx)
                                 s[(ch * h + y) * w + xx] += inv * g[(ch * ho + y / k) * wo + xx / k];
                         });
}

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, ho, wo;

  // Output columns ox whose input column ox*stride + kx - pad lies in [0, w).
  std::pair<std::size_t, std::size_t> col_range(std::size_t kx) const {
    const long p = static_cast<long>(pad), kk = static_cast<long>(kx), s = static_cast<long>(stride);
    long lo = p - kk > 0 ? (p - kk + s - 1) / s : 0;
    long hi = (static_cast<long>(w) - 1 + p - kk);
    hi = hi < 0 ? 0 : hi / s + 1;
    lo = std::min<long>(lo, static_cast<long>(wo));
    hi = std::min<long>(hi, static_cast<long>(wo));
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
  }
  // Input column of output column `lo` (lo comes from col_range, so it is in range).
  std::size_t first_col(std::size_t lo, std::size_t kx) const { return lo * stride + kx - pad; }
  // Input row for output row oy and kernel row ky, or -1 when in padding.
  long in_row(std::size_t oy, std::size_t ky) const {
    const long r = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
    return (r < 0 || r >= static_cast<long>(h)) ? -1 : r;
  }
};

ConvGeom conv_geometry(Value x, Value w, std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 3);
  if (w.shape().rank() != 4) throw Error("conv2d: kernel must be rank 4, got " + w.shape().str());
  ConvGeom g{};
  g.cin = x.shape()[0];
  g.h = x.shape()[1];
  g.w = x.shape()[2];
  g.cout = w.shape()[0];
  g.k = w.shape()[2];
  g.stride = stride;
  g.pad = pad;
  if (w.shape()[1] != g.cin || w.shape()[3] != g.k)
    throw Error("conv2d: kernel " + w.shape().str() + " incompatible with input " + x.shape().str());
  if (stride == 0) throw Error("conv2d: stride must be >= 1");
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  if (ph < g.k || pw < g.k || (ph - g.k) % stride != 0 || (pw - g.k) % stride != 0)
    throw Error("conv2d: non-integral output extent for input " + x.shape().str() + ", kernel " +
                std::to_string(g.k) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  g.ho = (ph - g.k) / stride + 1;
  g.wo = (pw - g.k) / stride + 1;
  return g;
}

Value conv2d_impl(Value x, Value w, const Value* b, std::size_t stride, std::size_t pad) {
  const ConvGeom G = conv_geometry(x, w, stride, pad);
  if (b && (b->shape().rank() != 1 || b->shape()[0] != G.cout))
    throw Error("conv2d: bias " + b->shape().str() + " does not match " + std::to_string(G.cout) + " channels");
  Tensor out(Shape{G.cout, G.ho, G.wo}, 0.0);
  auto xd = x.data(), wd = w.data();
  for (std::size_t co = 0; co < G.cout; ++co) {
    double* oplane = out.data.data() + co * G.ho * G.wo;
    if (b) std::fill(oplane, oplane + G.ho * G.wo, b->data()[co]);
    for (std::size_t ci = 0; ci < G.cin; ++ci) {
      const double* iplane = xd.data() + ci * G.h * G.w;
      for (std::size_t ky = 0; ky < G.k; ++ky)
        for (std::size_t kx = 0; kx < G.k; ++kx) {
          const double wv = wd[((co * G.cin + ci) * G.k + ky) * G.k + kx];
          const auto [lo, hi] = G.col_range(kx);
          for (std::size_t oy = 0; oy < G.ho; ++oy) {
            const long iy = G.in_row(oy, ky);
            if (iy < 0 || lo == hi) continue;
            double* orow = oplane + oy * G.wo;
            const double* irow = iplane + iy * G.w + G.first_col(lo, kx);
            if (G.stride == 1) {
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox - lo];
            } else {
              for (std::size_t ox = lo, j = 0; ox < hi; ++ox, j += G.stride) orow[ox] += wv * irow[j];
            }
          }
        }
    }
  }
  std::vector<Value> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape().record("conv2d", std::move(out), inputs, [inputs, G](Tape& t, Value, std::span<const double> g) {
    const Value x = inputs[0], w = inputs[1];
    auto xd = x.data(), wd = w.data();
    auto sx = t.grad_sink(x);
    auto sw = t.grad_sink(w);
    for (std::size_t co = 0; co < G.cout; ++co) {
      const double* gplane = g.data() + co * G.ho * G.wo;
      for (std::size_t ci = 0; ci < G.cin; ++ci) {
        const std::size_t ioff = ci * G.h * G.w;
        for (std::size_t ky = 0; ky < G.k; ++ky)
          for (std::size_t kx = 0; kx < G.k; ++kx) {
            const std::size_t widx = ((co * G.cin + ci) * G.k + ky) * G.k + kx;
            const double wv = wd[widx];
            const auto [lo, hi] = G.col_range(kx);
            double acc = 0.0;
            for (std::size_t oy = 0; oy < G.ho; ++oy) {
              const long iy = G.in_row(oy, ky);
              if (iy < 0) continue;
              if (lo == hi) continue;
              const double* grow = gplane + oy * G.wo;
              const std::size_t base = ioff + iy * G.w + G.first_col(lo, kx);
              const double* irow = xd.data() + base;
              if (G.stride == 1) {
                if (!sx.empty()) {
                  double* srow = sx.data() + base;
                  for (std::size_t ox = lo; ox < hi; ++ox) srow[ox - lo] += wv * grow[ox];
                }
                double a0 = 0.0, a1 = 0.0;
                std::size_t ox = lo;
                for (; ox + 1 < hi; ox += 2) {
                  a0 += grow[ox] * irow[ox - lo];
                  a1 += grow[ox + 1] * irow[ox + 1 - lo];
                }
                if (ox < hi) a0 += grow[ox] * irow[ox - lo];
                acc += a0 + a1;
                continue;
              }
              if (!sx.empty()) {
                double* srow = sx.data() + base;
                for (std::size_t ox = lo, j = 0; ox < hi; ++ox, j += G.stride) srow[j] += wv * grow[ox];
              }
              for (std::size_t ox = lo, j = 0; ox < hi; ++ox, j += G.stride) acc += grow[ox] * irow[j];
            }
            if (!sw.empty()) sw[widx] += acc;
          }
      }
    }
    if (inputs.size() == 3) {
      auto sb = t.grad_sink(inputs[2]);
      for (std::size_t co = 0; co < sb.size(); ++co) {
        double acc = 0.0;
        for (std::size_t i = 0; i < G.ho * G.wo; ++i) acc += g[co * G.ho * G.wo + i];
        sb[co] += acc;
      }
    }
  });
}

}  // namespace

Value conv2d(Value x, Value w, std::size_t stride, std::size_t pad) { return conv2d_impl(x, w, nullptr, stride, pad); }

Value conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad) {
  return conv2d_impl(x, w, &b, stride, pad);
}

Value cross_entropy(Value logits, std::size_t label) {
  require_rank("cross_entropy", logits, 1);
  const std::size_t k = logits.numel();
  if (label >= k)
    throw Error("cross_entropy: label " + std::to_string(label) + " out of range for " + std::to_string(k) + " classes");
  auto ld = logits.data();
  const double m = *std::max_element(ld.begin(), ld.end());
  double z = 0.0;
  for (double v : ld) z += std::exp(v - m);
  const double lse = m + std::log(z);
  std::vector<double> probs(k);
  for (std::size_t i = 0; i < k; ++i) probs[i] = std::exp(ld[i] - lse);
  return logits.tape().record("cross_entropy", Tensor(Shape{1}, lse - ld[label]), {logits},
                              [logits, label, probs](Tape& t, Value, std::span<const double> g) {
                                auto s = t.grad_sink(logits);
                                for (std::size_t i = 0; i < s.size(); ++i)
                                  s[i] += g[0] * (probs[i] - (i == label ? 1.0 : 0.0));
                              });
}

}  // namespace ranktide::ad
