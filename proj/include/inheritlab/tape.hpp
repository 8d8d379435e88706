#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "inheritlab/tensor.hpp"

namespace ilab {

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatmul,
  kMatmulNT,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddRowvec,
  kMulRowvec,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kGelu,
  kEmbedding,
  kCrossEntropy,
  kCayley,
  kAttention,
  kSliceRows,
  kConcatRows,
  kSetRow,
  kWindowGate,
  kSum,
};

std::string_view op_name(OpKind op);

// Handle to a node on a Tape. Only meaningful for the tape that created it.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

struct GradResult {
  std::vector<Tensor> grads;  // one per requested parameter, same order
  std::vector<bool> reached;  // false when the parameter is not on the loss path
  bool any_unreached() const;
};

// Boundary window produced by Tape::window_gate.
struct WindowBounds {
  double lo = 0.0;
  double hi = 1.0;
};
WindowBounds squash_bounds(double raw_lo, double raw_hi);
// Gate value for coordinate k of d at temperature tau.
double window_gate_value(const WindowBounds& b, std::size_t k, std::size_t d, double tau);

// Ordered record of executed primitives for reverse-mode differentiation.
// Nodes are appended in execution order, so the node list is a topological
// order by construction. A tape is single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A leaf owning its value; gradient tracking follows value.requires_grad().
  Var leaf(Tensor value);
  Var leaf(Tensor value, bool requires_grad);
  // A leaf that borrows `value`; the referenced tensor must outlive the tape.
  Var borrow(const Tensor& value, bool requires_grad = false);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  OpKind op(Var v) const;
  std::span<const Var> inputs(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_rowvec(Var x, Var b);
  Var mul_rowvec(Var x, Var g);
  Var softmax(Var x);
  Var log_softmax(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var gelu(Var x);
  Var embedding(Var table, std::vector<int> ids);
  // Mean negative log-likelihood over rows whose target is >= 0.
  Var cross_entropy(Var logits, std::vector<int> targets);
  Var cayley(Var skew_params);
  Var attention(Var q_src, Var kv_src, std::size_t n_heads, std::size_t offset);
  Var slice_rows(Var x, std::size_t begin, std::size_t count);
  Var concat_rows(Var a, Var b);
  Var set_row(Var x, std::size_t row, Var v);
  // Soft contiguous window over d coordinates from two raw boundary scalars.
  Var window_gate(Var raw_bounds, std::size_t d, double tau);
  Var sum(Var x);

  // Reverse sweep from a scalar loss. Parameters off the loss path receive
  // zero gradients and are flagged in GradResult::reached.
  GradResult grad(Var loss, std::span<const Var> params) const;

  // Recomputes every non-leaf node from the stored leaves, in tape order.
  std::vector<Tensor> replay() const;

 private:
  using ForwardFn = std::function<Tensor(const Tape&)>;
  // Accumulates the input gradients given this node's output gradient.
  using BackwardFn = std::function<void(const Tape&, const Tensor& grad_out,
                                        std::vector<Tensor>& grads)>;

  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<Var> inputs;
    Tensor owned;
    const Tensor* borrowed = nullptr;
    bool requires_grad = false;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var push(OpKind op, std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Adds `g` into slot, allocating on first use.
void accumulate(std::vector<Tensor>& grads, Var v, const Tensor& g);

}  // namespace ilab
