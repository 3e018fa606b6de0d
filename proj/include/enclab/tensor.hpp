#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace enclab {

using Scalar = double;
using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;
class RngStream;

/// One recorded operation: the inputs it consumed, a node-free view of its
/// output, and the rule that routes the output gradient into the inputs.
struct Node {
  const char* op = "";
  std::vector<Tensor> inputs;
  std::function<void(const Tensor& out, std::vector<Tensor>& inputs)> backward;
  std::shared_ptr<Tensor> out_view;  // no node pointer, so the graph stays acyclic
};

/// Dense row-major tensor. Copies are shallow handles over shared storage:
/// values and gradient live in one block, so a parameter held by the model
/// map, an op record, and the optimizer is a single buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<Scalar> values,
                            bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(store_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const;  // negative indices count from the back
  Index size() const;

  // Spans alias shared storage; binding one to a temporary tensor would
  // dangle, so rvalue access is a compile error.
  std::span<Scalar> values() &;
  std::span<const Scalar> values() const&;
  std::span<Scalar> values() && = delete;
  std::span<const Scalar> values() const&& = delete;
  Scalar value() const;  // scalar tensors only

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  bool has_grad() const;
  void ensure_grad();  // allocates a zero gradient in the shared block
  void zero_grad();
  std::span<Scalar> grad() &;
  std::span<const Scalar> grad() const&;
  std::span<Scalar> grad() && = delete;
  std::span<const Scalar> grad() const&& = delete;

  /// Same storage, no gradient participation, no node.
  Tensor detach() const;

  /// Deep copy of values (fresh storage, no node, no grad).
  Tensor clone() const;

  /// Storage identity, for aliasing checks.
  const void* data_id() const { return store_.get(); }

  std::shared_ptr<Node> node;

 private:
  struct Storage {
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // empty until ensure_grad
  };

  Shape shape_;
  std::shared_ptr<Storage> store_;
  bool requires_grad_ = false;
};

// ---------------------------------------------------------------------------
// Gradient mode. Ops record nodes only while enabled (thread-local).
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Attach an autograd record to `out` if grad mode is on and any input
/// participates. Custom ops in other modules use this too. The backward rule
/// receives the output (for its gradient and values) and the recorded inputs.
void attach_node(Tensor& out, std::vector<Tensor> inputs,
                 std::function<void(const Tensor&, std::vector<Tensor>&)> backward,
                 const char* op);

/// The recorded operations reachable from a root, in topological order:
/// every entry's inputs were produced by earlier entries or are leaves.
struct GradTape {
  std::vector<std::shared_ptr<Node>> order;
};

GradTape build_tape(const Tensor& root);

/// Reverse-mode sweep from a scalar loss; accumulates into .grad of every
/// reachable tensor with requires_grad set. Each tape entry runs once.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All are pure functions of their inputs; gradients are defined
// for every real-valued input unless noted.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Scalar s);

/// x: [... x C], v: [C]; adds v to every row of the last dimension.
Tensor add_rowvec(const Tensor& x, const Tensor& v);

/// a: [m x k], b: [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2-D transpose.
Tensor transpose(const Tensor& a);

/// Contiguous slice [c0, c0 + width) of the last dimension.
Tensor slice_cols(const Tensor& x, Index c0, Index width);

/// Concatenation along the last dimension; leading extents must match.
Tensor concat_cols(const std::vector<Tensor>& parts);

/// m: [R x B]; out(r, c) = m(r, idx[r * cols + c]); idx row-major [R x cols].
Tensor gather_cols(const Tensor& m, const std::vector<Index>& idx, Index cols);

/// Row-wise softmax over the last dimension, max-subtracted for stability.
Tensor softmax_rows(const Tensor& x);

/// Per-row over the last dimension: (x - mean) / sqrt(var + eps) * gain.
/// No bias term.
Tensor layer_norm(const Tensor& x, const Tensor& gain, Scalar eps);

/// tanh-approximation GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);

/// Splits the last dimension into [value | gate] halves and returns
/// value * gelu(gate). Last extent must be even.
Tensor geglu(const Tensor& x);

/// table: [V x d]; returns [len(ids) x d]. Backward scatters into the table,
/// so repeated ids accumulate.
Tensor embedding_lookup(const Tensor& table, std::span<const Index> ids);

/// Mean negative log-softmax probability of the label over positions whose
/// label != ignore_label. logits: [n x V]. Throws DegenerateBatchError if
/// every position is ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const Index> labels,
                     Index ignore_label);

/// Mean binary cross-entropy with logits over positions where active != 0.
/// logits: [n] or [n x 1]; targets in {0, 1}.
Tensor bce_with_logits(const Tensor& logits, std::span<const uint8_t> targets,
                       std::span<const uint8_t> active);

Tensor sum(const Tensor& x);

/// Inverted dropout; identity when train is false or p == 0.
Tensor dropout(const Tensor& x, Scalar p, RngStream& rng, bool train);

}  // namespace enclab
