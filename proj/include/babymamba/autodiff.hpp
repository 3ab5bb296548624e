#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "babymamba/tensor.hpp"

namespace bm {

// One vertex of the computation record. Each primitive installs a closure
// that reads `grad` and accumulates into the gradients of `inputs`.
struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  Tensor& grad_ref() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  static Var parameter(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  // Gradient accumulated by backward(); zeros when the node was unreachable.
  Tensor grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Tensor, std::vector<Var>, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

// Builds a result node; records inputs only when gradient tracking applies.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Reverse-topological accumulation from a scalar root.
void backward(const Var& root);

// Disables graph recording in its scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Multiply tally filled by the kernels while a MacCounter is alive.
struct MacTally {
  std::uint64_t linear = 0;
  std::uint64_t conv = 0;
  std::uint64_t scan = 0;
  std::uint64_t pool = 0;
  std::uint64_t total() const { return linear + conv + scan + pool; }
};

class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  const MacTally& tally() const { return tally_; }

 private:
  MacTally tally_;
  MacTally* previous_;
};

MacTally* active_mac_tally();

// ---- primitives -----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
// x[..., n] + b[n]
Var add_bias(const Var& x, const Var& b);

// a[m x k] * b[k x n]
Var matmul(const Var& a, const Var& b);
// x[..., in] * W[out x in]^T, optionally + b[out]
Var linear(const Var& x, const Var& weight);
Var linear(const Var& x, const Var& weight, const Var& bias);

// Same-padded cross-correlation. x is [Cin x L] or [B x Cin x L];
// w is [Cout x Cin x k] with odd k; b is [Cout].
Var conv1d(const Var& x, const Var& w, const Var& b);
// Causal depthwise convolution over time for x[N x L x E], w[E x k], b[E].
Var depthwise_causal_conv(const Var& x, const Var& w, const Var& b);

Var silu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
Var softmax(const Var& x, std::size_t axis);

// Normalizes over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};
// x is [B x F x L]; statistics per feature F over (B, L). Training mode uses
// batch statistics and updates the running estimates.
Var batch_norm_1d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training);

// Swap the last two axes of a rank-2 or rank-3 tensor.
Var transpose_last(const Var& x);
Var reverse_time(const Var& x, std::size_t axis = 1);
Var slice_last(const Var& x, std::size_t start, std::size_t length);
Var reshape(const Var& x, Shape shape);
// Mean over one axis, which is removed from the shape.
Var mean_axis(const Var& x, std::size_t axis);
// alpha[N x L], z[N x L x D] -> sum_t alpha_t z_t as [N x D]
Var weighted_time_sum(const Var& alpha, const Var& z);
Var sum(const Var& x);
Var mean(const Var& x);

// Mean over the batch of label-smoothed cross entropy; logits [B x K].
Var smoothed_cross_entropy(const Var& logits, std::span<const int> labels, double smoothing);

}  // namespace bm
