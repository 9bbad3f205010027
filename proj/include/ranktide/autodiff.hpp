#pragma once

// Reverse-mode differentiation over a fixed op set.
//
// A Tape owns every node created while building one expression. Nodes are
// appended in evaluation order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep. Gradients are
// accumulated additively into lazily allocated per-node buffers.
//
// Threading: a Tape and its Values are single-writer and must stay on one
// thread from construction through backward(). Independent tapes may run
// concurrently (e.g. one per sample) as long as they only read the source
// parameter tensors; updating parameters requires exclusive access.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ranktide/tensor.hpp"

namespace ranktide::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Value {
 public:
  Value() = default;

  const Shape& shape() const;
  std::span<const double> data() const;
  /// Accumulated gradient; empty if the node never received one.
  std::span<const double> grad() const;
  double item() const;
  bool requires_grad() const;
  std::size_t numel() const { return shape().numel(); }

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Value(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// Called with the node being processed and its accumulated gradient.
  using BackwardFn = std::function<void(Tape&, Value self, std::span<const double> out_grad)>;

  struct Node {
    const char* op;
    Tensor value;
    std::vector<double> grad;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(Tensor t, bool requires_grad = true);
  Value constant(Tensor t) { return leaf(std::move(t), false); }
  Value scalar(double v) { return constant(Tensor(Shape{1}, v)); }

  /// Seeds d(out)/d(out) = 1 and sweeps the tape in reverse. `out` must hold
  /// a single element. Nodes not upstream of `out` are skipped.
  void backward(Value out);

  /// Gradient of `v` as a tensor (zeros if none accumulated).
  Tensor grad_of(Value v) const;

  /// Used by op implementations. Throws Error if `value` is non-finite.
  Value record(const char* op, Tensor value, std::initializer_list<Value> inputs, BackwardFn fn);
  Value record(const char* op, Tensor value, const std::vector<Value>& inputs, BackwardFn fn);

  /// Writable gradient buffer for node `v`, zero-initialized on first use.
  /// Returns an empty span when `v` does not require grad.
  std::span<double> grad_sink(Value v);

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Value;
  std::vector<Node> nodes_;
};

// ---- elementwise (same shape, no broadcasting) ----
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value x, double c);
Value sigmoid(Value x);
/// relu'(0) := 0.
Value relu(Value x);
Value sqrt(Value x);

// ---- tensor-by-scalar, where `s` is a single-element Value ----
Value mul_scalar(Value x, Value s);
Value sub_scalar(Value x, Value s);
Value div_scalar(Value x, Value s);

// ---- reductions ----
Value sum(Value x);
Value mean(Value x);
/// Reduce along `axis`; the result drops that axis (a rank-1 input gives [1]).
Value sum(Value x, std::size_t axis);
Value mean(Value x, std::size_t axis);
/// Selection reductions; the gradient goes to the first extremal element.
Value max(Value x);
Value min(Value x);
/// Euclidean norm of all entries; subgradient at 0 is 0.
Value l2_norm(Value x);

// ---- structure ----
Value reshape(Value x, Shape s);
Value transpose(Value x);  // rank-2 only
/// Stack equally shaped values along a new leading axis.
Value stack(const std::vector<Value>& xs);
/// Concatenate rank-1 values.
Value concat(const std::vector<Value>& xs);

// ---- linear algebra / nn ----
Value matmul(Value a, Value b);
/// Numerically stable (max-subtracted) softmax along `axis`.
Value softmax(Value x, std::size_t axis);
/// [C x H x W] -> [C]
Value global_avg_pool(Value x);
/// Non-overlapping k x k average pooling on [C x H x W]; H, W divisible by k.
Value avg_pool2d(Value x, std::size_t k);
/// Cross-correlation. x: [Cin x H x W], w: [Cout x Cin x k x k].
Value conv2d(Value x, Value w, std::size_t stride, std::size_t pad);
/// As above plus a per-output-channel bias b: [Cout].
Value conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad);
/// -log softmax(logits)[label] in log-sum-exp form; logits rank-1.
Value cross_entropy(Value logits, std::size_t label);

}  // namespace ranktide::ad
