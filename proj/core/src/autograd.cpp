#include "ralgen/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <utility>

#include "ralgen/parallel.hpp"

namespace ralgen::ag {

namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

Var make_node(Tensor value, std::vector<Var> parents, const char* op, BackwardFn bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  for (const auto& p : parents) {
    if (p.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return Var(n);
}

template <class F>
Tensor ew1(const Tensor& a, F f) {
  Tensor y(a.shape());
  const double* pa = a.data();
  double* py = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = f(pa[i]);
  return y;
}

template <class F>
Tensor ew2(const Tensor& a, const Tensor& b, F f) {
  require(a.same_shape(b), "elementwise op: shape mismatch");
  Tensor y(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* py = y.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) py[i] = f(pa[i], pb[i]);
  return y;
}

}  // namespace

const Tensor& Var::val() const { return n_->value; }
bool Var::requires_grad() const { return n_ && n_->requires_grad; }

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->op = "const";
  return Var(n);
}

Var leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->op = "leaf";
  return Var(n);
}

Var detach(const Var& v) { return constant(v.val()); }

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  return make_node(ew2(a.val(), b.val(), [](double x, double y) { return x + y; }), {a, b}, "add",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>& needs,
                      std::vector<Var>& out) {
                     if (needs[0]) out[0] = g;
                     if (needs[1]) out[1] = g;
                   });
}

Var sub(const Var& a, const Var& b) {
  return make_node(ew2(a.val(), b.val(), [](double x, double y) { return x - y; }), {a, b}, "sub",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>& needs,
                      std::vector<Var>& out) {
                     if (needs[0]) out[0] = g;
                     if (needs[1]) out[1] = neg(g);
                   });
}

Var mul(const Var& a, const Var& b) {
  return make_node(ew2(a.val(), b.val(), [](double x, double y) { return x * y; }), {a, b}, "mul",
                   [](const std::vector<Var>& p, const Var&, const Var& g, const std::vector<char>& needs,
                      std::vector<Var>& out) {
                     if (needs[0]) out[0] = mul(g, p[1]);
                     if (needs[1]) out[1] = mul(g, p[0]);
                   });
}

Var div(const Var& a, const Var& b) {
  return make_node(ew2(a.val(), b.val(), [](double x, double y) { return x / y; }), {a, b}, "div",
                   [](const std::vector<Var>& p, const Var& self, const Var& g, const std::vector<char>& needs,
                      std::vector<Var>& out) {
                     if (needs[0]) out[0] = div(g, p[1]);
                     if (needs[1]) out[1] = neg(div(mul(g, self), p[1]));
                   });
}

Var neg(const Var& a) {
  return make_node(ew1(a.val(), [](double x) { return -x; }), {a}, "neg",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = neg(g); });
}

Var scale(const Var& a, double c) {
  return make_node(ew1(a.val(), [c](double x) { return x * c; }), {a}, "scale",
                   [c](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                       std::vector<Var>& out) { out[0] = scale(g, c); });
}

Var add_scalar(const Var& a, double c) {
  return make_node(ew1(a.val(), [c](double x) { return x + c; }), {a}, "add_scalar",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = g; });
}

Var cmul(const Var& a, const Tensor& c) {
  return make_node(ew2(a.val(), c, [](double x, double y) { return x * y; }), {a}, "cmul",
                   [c](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                       std::vector<Var>& out) { out[0] = cmul(g, c); });
}

Var exp_v(const Var& a) {
  return make_node(ew1(a.val(), [](double x) { return std::exp(x); }), {a}, "exp",
                   [](const std::vector<Var>&, const Var& self, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = mul(g, self); });
}

Var log_v(const Var& a) {
  return make_node(ew1(a.val(), [](double x) { return std::log(x); }), {a}, "log",
                   [](const std::vector<Var>& p, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = div(g, p[0]); });
}

Var sqrt_v(const Var& a) {
  return make_node(ew1(a.val(), [](double x) { return std::sqrt(x); }), {a}, "sqrt",
                   [](const std::vector<Var>&, const Var& self, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = div(scale(g, 0.5), self); });
}

Var tanh_v(const Var& a) {
  return make_node(ew1(a.val(), [](double x) { return std::tanh(x); }), {a}, "tanh",
                   [](const std::vector<Var>&, const Var& self, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) {
                     out[0] = mul(g, add_scalar(neg(mul(self, self)), 1.0));
                   });
}

Var sigmoid_v(const Var& a) {
  return make_node(ew1(a.val(), [](double x) { return 1.0 / (1.0 + std::exp(-x)); }), {a}, "sigmoid",
                   [](const std::vector<Var>&, const Var& self, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) {
                     out[0] = mul(g, mul(self, add_scalar(neg(self), 1.0)));
                   });
}

Var leaky_relu(const Var& a, double slope) {
  Tensor mask = ew1(a.val(), [slope](double x) { return x >= 0.0 ? 1.0 : slope; });
  return make_node(ew1(a.val(), [slope](double x) { return x >= 0.0 ? x : slope * x; }), {a}, "leaky_relu",
                   [mask](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                          std::vector<Var>& out) { out[0] = cmul(g, mask); });
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

// ------------------------------------------------------ reductions/broadcasts

Var sum_all(const Var& a) {
  double s = 0.0;
  const double* p = a.val().data();
  for (int64_t i = 0, n = a.val().numel(); i < n; ++i) s += p[i];
  return make_node(Tensor::scalar(s), {a}, "sum_all",
                   [shape = a.val().shape()](const std::vector<Var>&, const Var&, const Var& g,
                                             const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = broadcast_all(g, shape);
                   });
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.val().numel()));
}

Var broadcast_all(const Var& a, std::vector<int> shape) {
  require(a.val().numel() == 1, "broadcast_all expects a scalar");
  return make_node(Tensor::full(shape, a.val()[0]), {a}, "broadcast_all",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = sum_all(g); });
}

Var sum_nhw(const Var& a) {
  const Tensor& x = a.val();
  require(x.rank() == 4, "sum_nhw expects NCHW");
  Tensor y({x.dim(1)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int h = 0; h < x.dim(2); ++h)
        for (int w = 0; w < x.dim(3); ++w) y[c] += x.at4(n, c, h, w);
  return make_node(std::move(y), {a}, "sum_nhw",
                   [shape = x.shape()](const std::vector<Var>&, const Var&, const Var& g,
                                       const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = broadcast_c(g, shape);
                   });
}

Var broadcast_c(const Var& b, std::vector<int> shape) {
  const Tensor& v = b.val();
  require(v.rank() == 1 && shape.size() == 4 && v.dim(0) == shape[1], "broadcast_c shape mismatch");
  Tensor y(shape);
  for (int n = 0; n < shape[0]; ++n)
    for (int c = 0; c < shape[1]; ++c)
      for (int h = 0; h < shape[2]; ++h)
        for (int w = 0; w < shape[3]; ++w) y.at4(n, c, h, w) = v[c];
  return make_node(std::move(y), {b}, "broadcast_c",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = sum_nhw(g); });
}

Var sum_c_keepdim(const Var& a) {
  const Tensor& x = a.val();
  require(x.rank() == 4, "sum_c_keepdim expects NCHW");
  Tensor y({x.dim(0), 1, x.dim(2), x.dim(3)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int h = 0; h < x.dim(2); ++h)
        for (int w = 0; w < x.dim(3); ++w) y.at4(n, 0, h, w) += x.at4(n, c, h, w);
  return make_node(std::move(y), {a}, "sum_c_keepdim",
                   [ch = x.dim(1)](const std::vector<Var>&, const Var&, const Var& g,
                                   const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = broadcast_c_keepdim(g, ch);
                   });
}

Var broadcast_c_keepdim(const Var& a, int channels) {
  const Tensor& x = a.val();
  require(x.rank() == 4 && x.dim(1) == 1, "broadcast_c_keepdim expects [N,1,H,W]");
  Tensor y({x.dim(0), channels, x.dim(2), x.dim(3)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < channels; ++c)
      for (int h = 0; h < x.dim(2); ++h)
        for (int w = 0; w < x.dim(3); ++w) y.at4(n, c, h, w) = x.at4(n, 0, h, w);
  return make_node(std::move(y), {a}, "broadcast_c_keepdim",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = sum_c_keepdim(g); });
}

// --------------------------------------------------------- slicing / shifting

Var slice_c(const Var& a, int c0, int c1) {
  const Tensor& x = a.val();
  require(x.rank() == 4 && 0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_c bounds");
  Tensor y({x.dim(0), c1 - c0, x.dim(2), x.dim(3)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = c0; c < c1; ++c)
      for (int h = 0; h < x.dim(2); ++h)
        for (int w = 0; w < x.dim(3); ++w) y.at4(n, c - c0, h, w) = x.at4(n, c, h, w);
  return make_node(std::move(y), {a}, "slice_c",
                   [c0, after = x.dim(1) - c1](const std::vector<Var>&, const Var&, const Var& g,
                                               const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = pad_c(g, c0, after);
                   });
}

Var pad_c(const Var& a, int before, int after) {
  const Tensor& x = a.val();
  require(x.rank() == 4 && before >= 0 && after >= 0, "pad_c bounds");
  Tensor y({x.dim(0), before + x.dim(1) + after, x.dim(2), x.dim(3)});
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int h = 0; h < x.dim(2); ++h)
        for (int w = 0; w < x.dim(3); ++w) y.at4(n, before + c, h, w) = x.at4(n, c, h, w);
  return make_node(std::move(y), {a}, "pad_c",
                   [before, c = x.dim(1)](const std::vector<Var>&, const Var&, const Var& g,
                                          const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = slice_c(g, before, before + c);
                   });
}

Var concat_c(const Var& a, const Var& b) {
  return add(pad_c(a, 0, b.val().dim(1)), pad_c(b, a.val().dim(1), 0));
}

Var shift_down_rows(const Var& a) {
  const Tensor& x = a.val();
  require(x.rank() == 4, "shift_down_rows expects NCHW");
  Tensor y(x.shape());
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int h = 1; h < x.dim(2); ++h)
        for (int w = 0; w < x.dim(3); ++w) y.at4(n, c, h, w) = x.at4(n, c, h - 1, w);
  return make_node(std::move(y), {a}, "shift_down_rows",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = shift_up_rows(g); });
}

Var shift_up_rows(const Var& a) {
  const Tensor& x = a.val();
  require(x.rank() == 4, "shift_up_rows expects NCHW");
  Tensor y(x.shape());
  for (int n = 0; n < x.dim(0); ++n)
    for (int c = 0; c < x.dim(1); ++c)
      for (int h = 0; h < x.dim(2) - 1; ++h)
        for (int w = 0; w < x.dim(3); ++w) y.at4(n, c, h, w) = x.at4(n, c, h + 1, w);
  return make_node(std::move(y), {a}, "shift_up_rows",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = shift_down_rows(g); });
}

// ----------------------------------------------------------------- conv family

namespace kernels {

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int ph, int pw) {
  require(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1), "conv2d shape mismatch");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H + 2 * ph - kh) / stride + 1;
  const int Wo = (W + 2 * pw - kw) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: input smaller than kernel");
  Tensor y({N, Co, Ho, Wo});
  parallel_for(int64_t(N) * Co, [&](int64_t idx) {
    const int n = static_cast<int>(idx / Co);
    const int oc = static_cast<int>(idx % Co);
    for (int oh = 0; oh < Ho; ++oh) {
      for (int ow = 0; ow < Wo; ++ow) {
        double acc = 0.0;
        for (int ic = 0; ic < Ci; ++ic) {
          for (int r = 0; r < kh; ++r) {
            const int ih = oh * stride - ph + r;
            if (ih < 0 || ih >= H) continue;
            for (int c = 0; c < kw; ++c) {
              const int iw = ow * stride - pw + c;
              if (iw < 0 || iw >= W) continue;
              acc += w.at4(oc, ic, r, c) * x.at4(n, ic, ih, iw);
            }
          }
        }
        y.at4(n, oc, oh, ow) = acc;
      }
    }
  });
  return y;
}

Tensor conv2d_dx(const Tensor& gy, const Tensor& w, int stride, int ph, int pw, int h, int w_out) {
  require(gy.rank() == 4 && w.rank() == 4 && gy.dim(1) == w.dim(0), "conv2d_dx shape mismatch");
  const int N = gy.dim(0), Co = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
  const int Ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  Tensor gx({N, Ci, h, w_out});
  parallel_for(N, [&](int64_t n) {
    for (int oc = 0; oc < Co; ++oc) {
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          const double g = gy.at4(static_cast<int>(n), oc, oh, ow);
          for (int ic = 0; ic < Ci; ++ic) {
            for (int r = 0; r < kh; ++r) {
              const int ih = oh * stride - ph + r;
              if (ih < 0 || ih >= h) continue;
              for (int c = 0; c < kw; ++c) {
                const int iw = ow * stride - pw + c;
                if (iw < 0 || iw >= w_out) continue;
                gx.at4(static_cast<int>(n), ic, ih, iw) += w.at4(oc, ic, r, c) * g;
              }
            }
          }
        }
      }
    }
  });
  return gx;
}

Tensor conv2d_dw(const Tensor& x, const Tensor& gy, int stride, int ph, int pw, int kh, int kw) {
  require(x.rank() == 4 && gy.rank() == 4 && x.dim(0) == gy.dim(0), "conv2d_dw shape mismatch");
  const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
  Tensor gw({Co, Ci, kh, kw});
  parallel_for(Co, [&](int64_t oc) {
    for (int ic = 0; ic < Ci; ++ic) {
      for (int r = 0; r < kh; ++r) {
        for (int c = 0; c < kw; ++c) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * stride - ph + r;
              if (ih < 0 || ih >= H) continue;
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * stride - pw + c;
                if (iw < 0 || iw >= W) continue;
                acc += x.at4(n, ic, ih, iw) * gy.at4(n, static_cast<int>(oc), oh, ow);
              }
            }
          }
          gw.at4(static_cast<int>(oc), ic, r, c) = acc;
        }
      }
    }
  });
  return gw;
}

}  // namespace kernels

Var conv2d(const Var& x, const Var& w, int stride, int ph, int pw) {
  Tensor y = kernels::conv2d(x.val(), w.val(), stride, ph, pw);
  return make_node(std::move(y), {x, w}, "conv2d",
                   [stride, ph, pw](const std::vector<Var>& p, const Var&, const Var& g,
                                    const std::vector<char>& needs, std::vector<Var>& out) {
                     const Tensor& xv = p[0].val();
                     const Tensor& wv = p[1].val();
                     if (needs[0]) out[0] = conv2d_dx(g, p[1], stride, ph, pw, xv.dim(2), xv.dim(3));
                     if (needs[1]) out[1] = conv2d_dw(p[0], g, stride, ph, pw, wv.dim(2), wv.dim(3));
                   });
}

Var conv2d_dx(const Var& gy, const Var& w, int stride, int ph, int pw, int h, int w_out) {
  Tensor y = kernels::conv2d_dx(gy.val(), w.val(), stride, ph, pw, h, w_out);
  return make_node(std::move(y), {gy, w}, "conv2d_dx",
                   [stride, ph, pw](const std::vector<Var>& p, const Var&, const Var& g,
                                    const std::vector<char>& needs, std::vector<Var>& out) {
                     const Tensor& wv = p[1].val();
                     if (needs[0]) out[0] = conv2d(g, p[1], stride, ph, pw);
                     if (needs[1]) out[1] = conv2d_dw(g, p[0], stride, ph, pw, wv.dim(2), wv.dim(3));
                   });
}

Var conv2d_dw(const Var& x, const Var& gy, int stride, int ph, int pw, int kh, int kw) {
  Tensor y = kernels::conv2d_dw(x.val(), gy.val(), stride, ph, pw, kh, kw);
  return make_node(std::move(y), {x, gy}, "conv2d_dw",
                   [stride, ph, pw](const std::vector<Var>& p, const Var&, const Var& g,
                                    const std::vector<char>& needs, std::vector<Var>& out) {
                     const Tensor& xv = p[0].val();
                     if (needs[0]) out[0] = conv2d_dx(p[1], g, stride, ph, pw, xv.dim(2), xv.dim(3));
                     if (needs[1]) out[1] = conv2d(p[0], g, stride, ph, pw);
                   });
}

Var conv_transpose2d(const Var& x, const Var& w, int stride, int ph, int pw) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  require(xv.rank() == 4 && wv.rank() == 4 && xv.dim(1) == wv.dim(0), "conv_transpose2d shape mismatch");
  const int Ho = (xv.dim(2) - 1) * stride + wv.dim(2) - 2 * ph;
  const int Wo = (xv.dim(3) - 1) * stride + wv.dim(3) - 2 * pw;
  require(Ho >= 1 && Wo >= 1, "conv_transpose2d: degenerate output");
  Tensor y = kernels::conv2d_dx(xv, wv, stride, ph, pw, Ho, Wo);
  return make_node(std::move(y), {x, w}, "conv_transpose2d",
                   [stride, ph, pw](const std::vector<Var>& p, const Var&, const Var& g,
                                    const std::vector<char>& needs, std::vector<Var>& out) {
                     const Tensor& wv2 = p[1].val();
                     if (needs[0]) out[0] = conv2d(g, p[1], stride, ph, pw);
                     if (needs[1]) out[1] = conv2d_dw(g, p[0], stride, ph, pw, wv2.dim(2), wv2.dim(3));
                   });
}

Var add_bias(const Var& x, const Var& bias) {
  return add(x, broadcast_c(bias, x.val().shape()));
}

// ------------------------------------------------------------------- indexing

Var embed(const Var& table, const ITensor& idx) {
  const Tensor& t = table.val();
  require(t.rank() == 2 && idx.rank() == 3, "embed expects [K,d] table and [N,H,W] indices");
  const int K = t.dim(0), d = t.dim(1);
  const int N = idx.dim(0), H = idx.dim(1), W = idx.dim(2);
  Tensor y({N, d, H, W});
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const int k = idx.at3(n, h, w);
        require(k >= 0 && k < K, "embed: index out of range");
        for (int c = 0; c < d; ++c) y.at4(n, c, h, w) = t.at2(k, c);
      }
  return make_node(std::move(y), {table}, "embed",
                   [idx, K](const std::vector<Var>&, const Var&, const Var& g,
                            const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = scatter_rows(g, idx, K);
                   });
}

Var scatter_rows(const Var& g, const ITensor& idx, int rows) {
  const Tensor& x = g.val();
  require(x.rank() == 4 && idx.rank() == 3, "scatter_rows expects [N,d,H,W] and [N,H,W]");
  const int N = x.dim(0), d = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y({rows, d});
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const int k = idx.at3(n, h, w);
        for (int c = 0; c < d; ++c) y.at2(k, c) += x.at4(n, c, h, w);
      }
  return make_node(std::move(y), {g}, "scatter_rows",
                   [idx](const std::vector<Var>&, const Var&, const Var& gg, const std::vector<char>&,
                         std::vector<Var>& out) { out[0] = embed(gg, idx); });
}

Var gather_c(const Var& x, const ITensor& idx) {
  const Tensor& v = x.val();
  require(v.rank() == 4 && idx.rank() == 3, "gather_c expects [N,C,H,W] and [N,H,W]");
  const int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  Tensor y({N, 1, H, W});
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        const int c = idx.at3(n, h, w);
        require(c >= 0 && c < C, "gather_c: index out of range");
        y.at4(n, 0, h, w) = v.at4(n, c, h, w);
      }
  return make_node(std::move(y), {x}, "gather_c",
                   [idx, C](const std::vector<Var>&, const Var&, const Var& g,
                            const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = scatter_c(g, idx, C);
                   });
}

Var scatter_c(const Var& g, const ITensor& idx, int channels) {
  const Tensor& v = g.val();
  require(v.rank() == 4 && v.dim(1) == 1, "scatter_c expects [N,1,H,W]");
  const int N = v.dim(0), H = v.dim(2), W = v.dim(3);
  Tensor y({N, channels, H, W});
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) y.at4(n, idx.at3(n, h, w), h, w) = v.at4(n, 0, h, w);
  return make_node(std::move(y), {g}, "scatter_c",
                   [idx](const std::vector<Var>&, const Var&, const Var& gg, const std::vector<char>&,
                         std::vector<Var>& out) { out[0] = gather_c(gg, idx); });
}

Var log_softmax_c(const Var& x) {
  const Tensor& v = x.val();
  require(v.rank() == 4, "log_softmax_c expects NCHW");
  const int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  Tensor y(v.shape());
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        double m = v.at4(n, 0, h, w);
        for (int c = 1; c < C; ++c) m = std::max(m, v.at4(n, c, h, w));
        double s = 0.0;
        for (int c = 0; c < C; ++c) s += std::exp(v.at4(n, c, h, w) - m);
        const double lse = m + std::log(s);
        for (int c = 0; c < C; ++c) y.at4(n, c, h, w) = v.at4(n, c, h, w) - lse;
      }
  return make_node(std::move(y), {x}, "log_softmax_c",
                   [C](const std::vector<Var>&, const Var& self, const Var& g,
                       const std::vector<char>&, std::vector<Var>& out) {
                     out[0] = sub(g, mul(exp_v(self), broadcast_c_keepdim(sum_c_keepdim(g), C)));
                   });
}

Var straight_through(const Var& features, Tensor quantized) {
  require(features.val().same_shape(quantized), "straight_through shape mismatch");
  return make_node(std::move(quantized), {features}, "straight_through",
                   [](const std::vector<Var>&, const Var&, const Var& g, const std::vector<char>&,
                      std::vector<Var>& out) { out[0] = g; });
}

// ---------------------------------------------------------------------- grad

std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt) {
  require(output.defined(), "grad: undefined output");
  std::vector<Var> topo;
  std::unordered_map<Node*, int> state;
  if (output.requires_grad()) {
    std::vector<std::pair<Var, size_t>> st;
    st.emplace_back(output, 0);
    state[output.get()] = 1;
    while (!st.empty()) {
      Node* n = st.back().first.get();
      bool descended = false;
      while (st.back().second < n->parents.size()) {
        const Var p = n->parents[st.back().second++];
        if (!p.requires_grad()) continue;
        int& s = state[p.get()];
        if (s == 0) {
          s = 1;
          st.emplace_back(p, 0);
          descended = true;
          break;
        }
      }
      if (descended) continue;
      topo.push_back(st.back().first);
      state[n] = 2;
      st.pop_back();
    }
  }
  std::unordered_map<Node*, Var> acc;
  acc.emplace(output.get(), constant(Tensor::full(output.val().shape(), 1.0)));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = it->get();
    auto g = acc.find(n);
    if (g == acc.end() || !n->backward) continue;
    std::vector<char> needs(n->parents.size(), 0);
    bool any = false;
    for (size_t i = 0; i < n->parents.size(); ++i) {
      needs[i] = n->parents[i].requires_grad() ? 1 : 0;
      any = any || needs[i];
    }
    if (!any) continue;
    std::vector<Var> outs(n->parents.size());
    n->backward(n->parents, *it, g->second, needs, outs);
    for (size_t i = 0; i < n->parents.size(); ++i) {
      if (!needs[i] || !outs[i].defined()) continue;
      Node* p = n->parents[i].get();
      auto a = acc.find(p);
      if (a == acc.end())
        acc.emplace(p, outs[i]);
      else
        a->second = add(a->second, outs[i]);
    }
  }
  std::vector<Var> res;
  res.reserve(wrt.size());
  for (const auto& v : wrt) {
    auto a = acc.find(v.get());
    res.push_back(a != acc.end() ? a->second : constant(Tensor(v.val().shape())));
  }
  return res;
}

}  // namespace ralgen::ag
