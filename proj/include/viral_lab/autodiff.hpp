#pragma once

#include "viral_lab/tensor.hpp"

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace viral {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Dynamic reverse-mode graph. Nodes are appended in evaluation order, so the
/// node vector is already a topological order and backward() walks it in
/// reverse. Gradients accumulate additively over fan-out.
///
/// A node requires a gradient iff one of its inputs does; trainable leaves are
/// created with parameter(), everything else (encoder features, teacher
/// targets, masks) with constant() and never receives a gradient.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient accumulated by the last backward(). Zeros for nodes that
  /// received none, including every constant.
  Tensor grad(Var v) const;
  bool has_grad(Var v) const { return !nodes_.at(v.id()).grad.empty(); }
  /// Like grad() but moves the buffer out of the tape.
  Tensor take_grad(Var v);

  /// Seeds d(loss)/d(loss) = 1 and propagates. Throws ShapeError unless the
  /// loss has exactly one element.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  /// Appends an op result. The backward rule is dropped when no input
  /// requires a gradient. Throws NonFiniteError on NaN/Inf output.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  /// Gradient buffer of v, zero-initialized on first use. For op authors.
  Tensor& grad_buffer(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
};

/// Contiguous run of rows forming one causal sequence inside a packed batch.
struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

namespace ad {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a[m x n] + bias[n] broadcast over rows.
Var add_bias(Var a, Var bias);
/// x W + b in one node.
Var linear(Var x, Var w, Var b);
Var sum(Var a);
Var mean(Var a);

Var softmax_rows(Var x);
/// Row-wise (x - mean) / sqrt(var + eps) * gamma + beta.
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// GELU, tanh form.
Var gelu(Var x);
Var silu(Var x);

/// Rows of table selected by ids.
Var embedding(Var table, std::span<const std::size_t> ids);
Var gather_rows(Var a, std::span<const std::size_t> rows);
/// Copy of base with addend[i] added onto row rows[i].
Var add_rows_at(Var base, Var addend, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);

/// x_i . y_i / (|x_i| |y_i|). Rows with norm below 1e-12 raise
/// DegenerateInputError.
Var cosine_sim_rows(Var x, Var y);
Var normalize_rows(Var x);

/// Multi-head scaled dot-product attention with a causal mask inside each
/// segment; rows in different segments never attend to each other. If
/// `capture` is given, the attention matrices are appended to it in
/// segment-major, head-minor order.
Var causal_attention(Var q, Var k, Var v, std::span<const Segment> segments, std::size_t heads,
                     std::vector<Tensor>* capture = nullptr);

/// Mean of -log softmax(logits_t)[target_t] over rows with mask_t != 0.
/// Throws DegenerateInputError when the mask selects nothing.
Var cross_entropy(Var logits, std::span<const std::size_t> targets, std::span<const double> mask);

}  // namespace ad

/// Row-wise softmax with max subtraction, outside of any tape.
Tensor softmax_rows(const Tensor& x);

}  // namespace viral
