#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "taskdiff/tensor.hpp"

namespace td {

// Handle into a Tape. Default-constructed handles are invalid.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

struct Attention {
  Var out;    // [Tq, Dv]
  Var probs;  // [Tq, Tk] softmax rows, exposed for sharing controllers
};

// Reverse-mode tape. Ops record closures that scatter output gradients back
// to their inputs; backward() walks nodes in reverse creation order, so every
// gradient is fully accumulated before its own node runs. That order is fixed
// by construction, independent of thread count.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // Leaf over external storage; the pointee must outlive the tape. Used for
  // model parameters so each training step does not copy them.
  Var leaf(const Tensor* t, bool requires_grad = true);
  // Leaf owning its value (activations fed into the graph, test inputs).
  Var input(Tensor t, bool requires_grad = true);
  // Owned value that never receives a gradient.
  Var constant(Tensor t);

  const Tensor& val(Var v) const;

  // --- elementwise / shape ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, float s);
  Var silu(Var a);
  Var add_row_bias(Var m, Var bias);      // [T,C] + [C]
  Var add_channel_bias(Var x, Var bias);  // [C,H,W] + [C]
  Var concat_channels(Var a, Var b);      // along dim 0 of [C,H,W]
  Var concat_rows(Var a, Var b);          // along dim 0 of [T,C]
  Var to_tokens(Var x);                   // [C,H,W] -> [H*W, C]
  Var from_tokens(Var t, int h, int w);   // [H*W, C] -> [C,h,w]
  Var upsample_nearest2x(Var x);
  Var reshape(Var a, std::vector<int> shape);  // same element count

  // --- linear algebra ---
  Var matmul(Var a, Var b);     // [M,K] x [K,N]
  Var matmul_nt(Var a, Var b);  // [M,K] x [N,K]^T -> [M,N]
  Var softmax_rows(Var m);
  Var gather_rows(Var table, std::vector<int> ids);

  // --- conv / norm / blur ---
  // 3x3 kernel, padding 1, stride 1 or 2. w is [Cout,Cin,3,3].
  Var conv2d(Var x, Var w, int stride);
  Var group_norm(Var x, Var gamma, Var beta, int groups);
  // Separable Gaussian, radius ceil(3*sigma), reflect padding. Backward is
  // the exact adjoint of the padded convolution.
  Var gaussian_blur2d(Var x, float sigma);

  // --- attention ---
  // Scaled dot-product over token matrices q:[Tq,D] k:[Tk,D] v:[Tk,Dv].
  // If probs_override is given the softmax map is replaced wholesale by the
  // supplied [Tq,Tk] matrix; only legal on a grad-disabled tape.
  Attention attention(Var q, Var k, Var v, const Tensor* probs_override = nullptr);

  // --- reductions / losses ---
  Var mean_all(Var a);
  Var mse_loss(Var a, Var b);
  Var softmax_cross_entropy(Var logits, std::vector<int> labels);
  Var l2_normalize_rows(Var m);

  // Seeds d(loss)/d(loss)=1 and runs all recorded closures in reverse order.
  void backward(Var loss);
  bool has_grad(Var v) const;
  // Gradient of the last backward() w.r.t. v; zero tensor if v never
  // contributed to the loss.
  const Tensor& grad(Var v);

 private:
  struct Node {
    Tensor value;
    const Tensor* ext = nullptr;
    bool requires_grad = false;
    Tensor grad;
    bool grad_init = false;
    std::function<void()> back;
  };

  const Tensor& nval(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.ext ? *n.ext : n.value;
  }
  void add_grad(int id, const Tensor& g);
  Tensor& grad_slot(int id);
  bool any_grad(std::initializer_list<Var> inputs) const;
  void check_var(Var v, const char* op) const;

  bool grad_enabled_;
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

struct AdamState {
  Tensor m, v;
  int64_t step = 0;
};

// One Adam update in place. State tensors are lazily initialized to zeros on
// first use and must keep the parameter's shape afterwards.
void adam_step(Tensor& param, const Tensor& grad, AdamState& s, float lr,
               float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f);

}  // namespace td
