#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ralgen/tensor.hpp"

namespace ralgen::ag {

struct Node;

// Handle to a node of the computation tape. Copy = shared reference.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  const Tensor& val() const;
  bool requires_grad() const;
  Node* get() const { return n_.get(); }
  std::shared_ptr<Node> ptr() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Backward contract: fill out[i] with the gradient w.r.t. parent i for every
// i with needs[i] != 0. Gradients are built from tape ops, so gradients of
// gradients work (the tape differentiates its own backward passes).
using BackwardFn = std::function<void(const std::vector<Var>& parents, const Var& self,
                                      const Var& gout, const std::vector<char>& needs,
                                      std::vector<Var>& out)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> parents;
  BackwardFn backward;
  const char* op = "";
};

Var constant(Tensor v);
Var leaf(Tensor v);  // trainable parameter node
Var detach(const Var& v);

// Elementwise, same shape unless noted.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var cmul(const Var& a, const Tensor& c);  // constant multiplier
Var exp_v(const Var& a);
Var log_v(const Var& a);
Var sqrt_v(const Var& a);
Var tanh_v(const Var& a);
Var sigmoid_v(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var relu(const Var& a);

// Reductions and their broadcast adjoints.
Var sum_all(const Var& a);                               // -> [1]
Var mean_all(const Var& a);                              // -> [1]
Var broadcast_all(const Var& a, std::vector<int> shape); // [1] -> shape
Var sum_nhw(const Var& a);                               // [N,C,H,W] -> [C]
Var broadcast_c(const Var& b, std::vector<int> shape);   // [C] -> [N,C,H,W]
Var sum_c_keepdim(const Var& a);                         // [N,C,H,W] -> [N,1,H,W]
Var broadcast_c_keepdim(const Var& a, int channels);     // [N,1,H,W] -> [N,C,H,W]

// Channel slicing / padding / concatenation, spatial row shift.
Var slice_c(const Var& a, int c0, int c1);
Var pad_c(const Var& a, int before, int after);
Var concat_c(const Var& a, const Var& b);
Var shift_down_rows(const Var& a);  // zero row enters at the top
Var shift_up_rows(const Var& a);

// Convolution family. x:[N,Ci,H,W], w:[Co,Ci,kh,kw], stride applies to both
// axes, padding (ph,pw) is symmetric per axis.
Var conv2d(const Var& x, const Var& w, int stride, int ph, int pw);
// Adjoint w.r.t. the conv input: gy:[N,Co,Ho,Wo] -> [N,Ci,H,W].
Var conv2d_dx(const Var& gy, const Var& w, int stride, int ph, int pw, int h, int w_out);
// Adjoint w.r.t. the conv weights: -> [Co,Ci,kh,kw].
Var conv2d_dw(const Var& x, const Var& gy, int stride, int ph, int pw, int kh, int kw);
// Transposed conv for upsampling; w:[Ci,Co,kh,kw], out H = (H-1)*stride+kh-2*ph.
Var conv_transpose2d(const Var& x, const Var& w, int stride, int ph, int pw);

// x + per-channel bias.
Var add_bias(const Var& x, const Var& bias);

// Codebook/index ops. idx:[N,H,W].
Var embed(const Var& table, const ITensor& idx);                 // [K,d] -> [N,d,H,W]
Var scatter_rows(const Var& g, const ITensor& idx, int rows);    // adjoint of embed
Var gather_c(const Var& x, const ITensor& idx);                  // -> [N,1,H,W]
Var scatter_c(const Var& g, const ITensor& idx, int channels);   // adjoint of gather_c

Var log_softmax_c(const Var& x);  // over the channel dim of [N,K,H,W]

// Forward takes the quantized values; backward passes the gradient to
// `features` unchanged (identity at the quantization boundary).
Var straight_through(const Var& features, Tensor quantized);

// Reverse-mode differentiation of `output` (scalar) w.r.t. `wrt`. Returned
// Vars are themselves differentiable. Disconnected inputs get zeros.
std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt);

namespace kernels {
// Raw tensor kernels shared with the incremental sampler. The sampler must
// reproduce these bit-for-bit; keep accumulation order (ic, kh, kw) stable.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int ph, int pw);
Tensor conv2d_dx(const Tensor& gy, const Tensor& w, int stride, int ph, int pw, int h, int w_out);
Tensor conv2d_dw(const Tensor& x, const Tensor& gy, int stride, int ph, int pw, int kh, int kw);
}  // namespace kernels

}  // namespace ralgen::ag
