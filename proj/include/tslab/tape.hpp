#pragma once

#include <functional>
#include <vector>

#include "tslab/tensor.hpp"

namespace tslab {

class Tape;

/// Handle to a tape node. Cheap to copy; only valid for the tape that
/// produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode tape over Tensors.
///
/// Nodes are appended in execution order, which is automatically a valid
/// topological order, so the backward sweep is a single reverse pass that
/// visits each node exactly once. Parameter leaves reference caller-owned
/// tensors (no copy); the caller keeps them alive for the tape's lifetime.
class Tape {
 public:
  // --- leaves -----------------------------------------------------------
  Var param(const Tensor& external);          // differentiable leaf, not copied
  Var input(const Tensor& external);          // non-differentiable leaf, not copied
  Var param(Tensor&&) = delete;               // leaves must outlive the tape
  Var input(Tensor&&) = delete;
  Var constant(Tensor owned);                 // non-differentiable, tape-owned

  // --- primitives -------------------------------------------------------
  Var matmul(Var a, Var b);                   // [m,k]x[k,n] -> [m,n]
  Var matmul_nt(Var a, Var b);                // a * b^T, [m,k]x[n,k] -> [m,n]
  Var transpose(Var a);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scaled(Var a, Var b, double c);     // a + c*b
  Var mul(Var a, Var b);                      // elementwise
  Var gelu(Var a);                            // exact-erf x*Phi(x)
  Var softmax_rows(Var a, bool causal);       // rows sum to 1; causal zeros exact
  Var layernorm_rows(Var a, double eps);      // per-row fixed layernorm, no affine
  Var mean_rows(Var a);                       // [m,n] -> [1,n]
  Var slice_cols(Var a, int col0, int width);
  Var slice_rows(Var a, int row0, int count);
  Var concat_cols(const std::vector<Var>& parts);
  Var embed_rows(Var table, const std::vector<int>& ids, double scale);
  Var sum(Var a);                             // -> [1]
  Var mse_loss(Var pred, Tensor target);      // 0.5*sum((pred-target)^2) -> [1]
  Var cross_entropy(Var logits, const std::vector<int>& labels);  // mean over rows

  // --- access -----------------------------------------------------------
  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  size_t node_count() const { return nodes_.size(); }

  /// Reverse sweep from a scalar node. May be called more than once per
  /// tape (gradients reset each call).
  void backward(Var loss_node);

  /// Gradient of the last backward() target w.r.t. node v. Zeros if the
  /// node was never reached.
  Tensor grad(Var v) const;
  bool has_backward() const { return ran_backward_; }

 private:
  // Called with the node's own upstream gradient; accumulates into inputs.
  using BackpropFn = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor owned;                     // value storage for non-leaf nodes
    const Tensor* external = nullptr; // leaf view
    Tensor grad;
    bool needs_grad = false;
    BackpropFn backprop;              // empty for leaves/constants
  };

  const Tensor& val(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.external ? *n.external : n.owned;
  }
  bool needs(int id) const;
  Tensor& grad_buf(int id);
  void add_to_grad(int id, const Tensor& g);
  Var push(Tensor value, bool needs_grad, BackpropFn backprop);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

/// Max over coordinates of |analytic - numeric| / (|numeric| + 1e-12),
/// with numeric gradients from central differences of `f`.
double finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params,
                         const std::vector<Tensor>& analytic_grads, double step);

}  // namespace tslab
