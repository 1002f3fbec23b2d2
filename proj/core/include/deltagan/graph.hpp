#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "deltagan/conv_kernels.hpp"
#include "deltagan/tensor.hpp"

namespace deltagan {

/// Handle to a node on a Graph tape.
using Var = int;

/// Reverse-mode autodiff tape over Tensor<T>.
///
/// A Graph is built per forward pass and discarded afterwards. Leaves are
/// either inputs (no gradient) or parameters registered through param();
/// parameter gradients are looked up after backward() via grad_for().
///
/// `training` selects batch-norm behaviour (batch stats vs. running stats).
/// Running statistics are updated only when both training and grad_enabled
/// are set, so inference-style forwards never mutate them.
///
/// All operations are deterministic; batch-level parallel loops assign each
/// sample to exactly one thread and never reduce across threads, so results
/// are bit-identical regardless of thread count.
template <typename T>
class Graph {
 public:
  explicit Graph(bool training = true, bool grad_enabled = true)
      : training_(training), grad_on_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }
  bool grad_enabled() const { return grad_on_; }

  Var input(Tensor<T> v) { return make(std::move(v), false, nullptr); }

  Var scalar_input(T v) { return input(Tensor<T>::scalar(v)); }

  /// Registers a persistent parameter tensor. The value is copied onto the
  /// tape; repeated registration of the same tensor returns the same node,
  /// so shared modules accumulate into one gradient.
  Var param(Tensor<T>& stored, bool trainable) {
    auto it = param_vars_.find(&stored);
    if (it != param_vars_.end()) return it->second;
    Var v = make(stored, grad_on_ && trainable, nullptr);
    param_vars_.emplace(&stored, v);
    return v;
  }

  const Tensor<T>& val(Var v) const { return nodes_[static_cast<std::size_t>(v)].val; }

  Tensor<T>& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v)];
    if (n.grad.data.empty()) n.grad = Tensor<T>(n.val.shape, T(0));
    return n.grad;
  }

  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v)].rg; }

  /// Gradient of a registered parameter after backward(); nullptr when the
  /// parameter was never touched by the loss.
  const Tensor<T>* grad_for(const Tensor<T>& stored) const {
    auto it = param_vars_.find(&stored);
    if (it == param_vars_.end()) return nullptr;
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (n.grad.data.empty()) return nullptr;
    return &n.grad;
  }

  void backward(Var root) {
    if (!grad_on_) throw std::logic_error("backward() on a no-grad graph");
    Node& r = nodes_[static_cast<std::size_t>(root)];
    if (r.val.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    grad(root).fill(T(1));
    for (Var v = root; v >= 0; --v) {
      Node& n = nodes_[static_cast<std::size_t>(v)];
      if (!n.rg || !n.back || n.grad.data.empty()) continue;
      n.back();
    }
  }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    require_same_shape(val(a), val(b), "add");
    Tensor<T> y = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += vb[i];
    return unary_or_binary(std::move(y), a, b, [this](Var out, Var a, Var b) {
      const Tensor<T>& g = nodes_[out].grad;
      if (requires_grad(a)) accumulate(a, g, T(1));
      if (requires_grad(b)) accumulate(b, g, T(1));
    });
  }

  Var sub(Var a, Var b) {
    require_same_shape(val(a), val(b), "sub");
    Tensor<T> y = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] -= vb[i];
    return unary_or_binary(std::move(y), a, b, [this](Var out, Var a, Var b) {
      const Tensor<T>& g = nodes_[out].grad;
      if (requires_grad(a)) accumulate(a, g, T(1));
      if (requires_grad(b)) accumulate(b, g, T(-1));
    });
  }

  Var mul(Var a, Var b) {
    require_same_shape(val(a), val(b), "mul");
    Tensor<T> y = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= vb[i];
    return unary_or_binary(std::move(y), a, b, [this](Var out, Var a, Var b) {
      const Tensor<T>& g = nodes_[out].grad;
      if (requires_grad(a)) {
        Tensor<T>& ga = grad(a);
        const Tensor<T>& vb = val(b);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
      }
      if (requires_grad(b)) {
        Tensor<T>& gb = grad(b);
        const Tensor<T>& va = val(a);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  Var div(Var a, Var b) {
    require_same_shape(val(a), val(b), "div");
    Tensor<T> y = val(a);
    const Tensor<T>& vb = val(b);
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] /= vb[i];
    return unary_or_binary(std::move(y), a, b, [this](Var out, Var a, Var b) {
      const Tensor<T>& g = nodes_[out].grad;
      const Tensor<T>& va = val(a);
      const Tensor<T>& vb = val(b);
      if (requires_grad(a)) {
        Tensor<T>& ga = grad(a);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / vb[i];
      }
      if (requires_grad(b)) {
        Tensor<T>& gb = grad(b);
        for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
      }
    });
  }

  Var scale(Var a, T s) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v *= s;
    return unary(std::move(y), a, [this, s](Var out, Var a) {
      accumulate(a, nodes_[out].grad, s);
    });
  }

  Var add_const(Var a, T c) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v += c;
    return unary(std::move(y), a, [this](Var out, Var a) {
      accumulate(a, nodes_[out].grad, T(1));
    });
  }

  Var relu(Var a) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v = v > T(0) ? v : T(0);
    return unary(std::move(y), a, [this](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      const Tensor<T>& x = val(a);
      Tensor<T>& ga = grad(a);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        if (x[i] > T(0)) ga[i] += g[i];
    });
  }

  Var leaky_relu(Var a, T alpha) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v = v > T(0) ? v : alpha * v;
    return unary(std::move(y), a, [this, alpha](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      const Tensor<T>& x = val(a);
      Tensor<T>& ga = grad(a);
      for (std::int64_t i = 0; i < g.numel(); ++i)
        ga[i] += x[i] > T(0) ? g[i] : alpha * g[i];
    });
  }

  Var tanh_(Var a) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v = std::tanh(v);
    return unary(std::move(y), a, [this](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      const Tensor<T>& y = nodes_[out].val;
      Tensor<T>& ga = grad(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  }

  Var abs_(Var a) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v = std::abs(v);
    return unary(std::move(y), a, [this](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      const Tensor<T>& x = val(a);
      Tensor<T>& ga = grad(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        if (x[i] > T(0)) ga[i] += g[i];
        else if (x[i] < T(0)) ga[i] -= g[i];
      }
    });
  }

  Var square(Var a) {
    Tensor<T> y = val(a);
    for (auto& v : y.data) v *= v;
    return unary(std::move(y), a, [this](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      const Tensor<T>& x = val(a);
      Tensor<T>& ga = grad(a);
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += T(2) * x[i] * g[i];
    });
  }

  // ---- reductions --------------------------------------------------------

  Var mean_all(Var a) {
    const Tensor<T>& x = val(a);
    T acc = T(0);
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    const T inv = T(1) / static_cast<T>(x.numel());
    return unary(Tensor<T>::scalar(acc * inv), a, [this, inv](Var out, Var a) {
      accumulate_const(a, nodes_[static_cast<std::size_t>(out)].grad[0] * inv);
    });
  }

  Var sum_all(Var a) {
    const Tensor<T>& x = val(a);
    T acc = T(0);
    for (std::int64_t i = 0; i < x.numel(); ++i) acc += x[i];
    return unary(Tensor<T>::scalar(acc), a, [this](Var out, Var a) {
      accumulate_const(a, nodes_[static_cast<std::size_t>(out)].grad[0]);
    });
  }

  // ---- shape / structure -------------------------------------------------

  Var detach(Var a) { return input(val(a)); }

  Var reshape(Var a, std::vector<int> shape) {
    Tensor<T> y = val(a);
    if (Tensor<T>::checked_numel(shape) != static_cast<std::size_t>(y.numel()))
      throw std::invalid_argument("reshape: element count mismatch");
    y.shape = std::move(shape);
    return unary(std::move(y), a, [this](Var out, Var a) {
      accumulate(a, nodes_[static_cast<std::size_t>(out)].grad, T(1));
    });
  }

  /// Concatenate along axis 1 (channels for 4D maps, features for 2D).
  Var concat1(Var a, Var b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.ndim() != vb.ndim() || va.ndim() < 2)
      throw std::invalid_argument("concat1: rank mismatch");
    for (int i = 0; i < va.ndim(); ++i)
      if (i != 1 && va.dim(i) != vb.dim(i))
        throw std::invalid_argument("concat1: incompatible shapes " + shape_str(va.shape) +
                                    " vs " + shape_str(vb.shape));
    std::vector<int> os = va.shape;
    os[1] = va.dim(1) + vb.dim(1);
    Tensor<T> y(os);
    const std::int64_t inner = va.numel() / (static_cast<std::int64_t>(va.dim(0)) * va.dim(1));
    const std::int64_t la = va.dim(1) * inner, lb = vb.dim(1) * inner;
    for (int n = 0; n < va.dim(0); ++n) {
      std::copy_n(va.ptr() + n * la, la, y.ptr() + n * (la + lb));
      std::copy_n(vb.ptr() + n * lb, lb, y.ptr() + n * (la + lb) + la);
    }
    return unary_or_binary(std::move(y), a, b, [this, la, lb](Var out, Var a, Var b) {
      const Tensor<T>& g = nodes_[out].grad;
      const int N = val(a).dim(0);
      if (requires_grad(a)) {
        Tensor<T>& ga = grad(a);
        for (int n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < la; ++i) ga[n * la + i] += g[n * (la + lb) + i];
      }
      if (requires_grad(b)) {
        Tensor<T>& gb = grad(b);
        for (int n = 0; n < N; ++n)
          for (std::int64_t i = 0; i < lb; ++i) gb[n * lb + i] += g[n * (la + lb) + la + i];
      }
    });
  }

  /// Broadcast a vector batch (N, D) across a spatial grid -> (N, D, H, W).
  Var tile_vec(Var z, int H, int W) {
    const Tensor<T>& v = val(z);
    if (v.ndim() != 2) throw std::invalid_argument("tile_vec: expected (N, D)");
    Tensor<T> y({v.dim(0), v.dim(1), H, W});
    for (int n = 0; n < v.dim(0); ++n)
      for (int d = 0; d < v.dim(1); ++d) {
        const T s = v.at2(n, d);
        T* dst = y.ptr() + (static_cast<std::size_t>(n) * v.dim(1) + d) * H * W;
        std::fill_n(dst, static_cast<std::size_t>(H) * W, s);
      }
    return unary(std::move(y), z, [this, H, W](Var out, Var z) {
      const Tensor<T>& g = nodes_[out].grad;
      Tensor<T>& gz = grad(z);
      const int N = gz.dim(0), D = gz.dim(1);
      for (int n = 0; n < N; ++n)
        for (int d = 0; d < D; ++d) {
          const T* src = g.ptr() + (static_cast<std::size_t>(n) * D + d) * H * W;
          T acc = T(0);
          for (int i = 0; i < H * W; ++i) acc += src[i];
          gz.at2(n, d) += acc;
        }
    });
  }

  /// Global average pool (N, C, H, W) -> (N, C).
  Var gap(Var a) {
    const Tensor<T>& x = val(a);
    if (x.ndim() != 4) throw std::invalid_argument("gap: expected 4D input");
    const int N = x.dim(0), C = x.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({N, C});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* src = x.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
        T acc = T(0);
        for (std::int64_t i = 0; i < hw; ++i) acc += src[i];
        y.at2(n, c) = acc / static_cast<T>(hw);
      }
    return unary(std::move(y), a, [this, hw](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      Tensor<T>& ga = grad(a);
      const int N = ga.dim(0), C = ga.dim(1);
      const T inv = T(1) / static_cast<T>(hw);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T s = g.at2(n, c) * inv;
          T* dst = ga.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) dst[i] += s;
        }
    });
  }

  Var avg_pool2(Var a) {
    const Tensor<T>& x = val(a);
    if (x.ndim() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
      throw std::invalid_argument("avg_pool2: expected 4D input with even H, W");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({N, C, H / 2, W / 2});
    for (int nc = 0; nc < N * C; ++nc) {
      const T* src = x.ptr() + static_cast<std::size_t>(nc) * H * W;
      T* dst = y.ptr() + static_cast<std::size_t>(nc) * (H / 2) * (W / 2);
      for (int h = 0; h < H / 2; ++h)
        for (int w = 0; w < W / 2; ++w)
          dst[h * (W / 2) + w] =
              (src[2 * h * W + 2 * w] + src[2 * h * W + 2 * w + 1] +
               src[(2 * h + 1) * W + 2 * w] + src[(2 * h + 1) * W + 2 * w + 1]) /
              T(4);
    }
    return unary(std::move(y), a, [this](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      Tensor<T>& ga = grad(a);
      const int N = ga.dim(0), C = ga.dim(1), H = ga.dim(2), W = ga.dim(3);
      for (int nc = 0; nc < N * C; ++nc) {
        const T* src = g.ptr() + static_cast<std::size_t>(nc) * (H / 2) * (W / 2);
        T* dst = ga.ptr() + static_cast<std::size_t>(nc) * H * W;
        for (int h = 0; h < H / 2; ++h)
          for (int w = 0; w < W / 2; ++w) {
            const T s = src[h * (W / 2) + w] / T(4);
            dst[2 * h * W + 2 * w] += s;
            dst[2 * h * W + 2 * w + 1] += s;
            dst[(2 * h + 1) * W + 2 * w] += s;
            dst[(2 * h + 1) * W + 2 * w + 1] += s;
          }
      }
    });
  }

  Var upsample2(Var a) {
    const Tensor<T>& x = val(a);
    if (x.ndim() != 4) throw std::invalid_argument("upsample2: expected 4D input");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y({N, C, H * 2, W * 2});
    for (int nc = 0; nc < N * C; ++nc) {
      const T* src = x.ptr() + static_cast<std::size_t>(nc) * H * W;
      T* dst = y.ptr() + static_cast<std::size_t>(nc) * H * W * 4;
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const T s = src[h * W + w];
          dst[2 * h * 2 * W + 2 * w] = s;
          dst[2 * h * 2 * W + 2 * w + 1] = s;
          dst[(2 * h + 1) * 2 * W + 2 * w] = s;
          dst[(2 * h + 1) * 2 * W + 2 * w + 1] = s;
        }
    }
    return unary(std::move(y), a, [this](Var out, Var a) {
      const Tensor<T>& g = nodes_[out].grad;
      Tensor<T>& ga = grad(a);
      const int N = ga.dim(0), C = ga.dim(1), H = ga.dim(2), W = ga.dim(3);
      for (int nc = 0; nc < N * C; ++nc) {
        const T* src = g.ptr() + static_cast<std::size_t>(nc) * H * W * 4;
        T* dst = ga.ptr() + static_cast<std::size_t>(nc) * H * W;
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w)
            dst[h * W + w] += src[2 * h * 2 * W + 2 * w] + src[2 * h * 2 * W + 2 * w + 1] +
                              src[(2 * h + 1) * 2 * W + 2 * w] +
                              src[(2 * h + 1) * 2 * W + 2 * w + 1];
      }
    });
  }

  // ---- dense / conv ------------------------------------------------------

  /// y = x W^T + b with x (N, Din), w (Dout, Din), b (Dout).
  Var linear(Var x, Var w, Var b) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    const Tensor<T>& vb = val(b);
    if (vx.ndim() != 2 || vw.ndim() != 2 || vx.dim(1) != vw.dim(1) || vb.dim(0) != vw.dim(0))
      throw std::invalid_argument("linear: shape mismatch x" + shape_str(vx.shape) + " w" +
                                  shape_str(vw.shape));
    const int N = vx.dim(0), Din = vx.dim(1), Dout = vw.dim(0);
    Tensor<T> y({N, Dout});
    detail::CMapRM<T> X(vx.ptr(), N, Din), W(vw.ptr(), Dout, Din);
    detail::MapRM<T> Y(y.ptr(), N, Dout);
    Y.noalias() = X * W.transpose();
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < Dout; ++d) y.at2(n, d) += vb[d];
    Var out = make(std::move(y), grad_on_ && (requires_grad(x) || requires_grad(w) ||
                                              requires_grad(b)),
                   nullptr);
    if (nodes_[static_cast<std::size_t>(out)].rg)
      nodes_[static_cast<std::size_t>(out)].back = [this, out, x, w, b, N, Din, Dout]() {
        const Tensor<T>& g = nodes_[static_cast<std::size_t>(out)].grad;
        detail::CMapRM<T> G(g.ptr(), N, Dout);
        if (requires_grad(x)) {
          detail::CMapRM<T> W(val(w).ptr(), Dout, Din);
          detail::MapRM<T> GX(grad(x).ptr(), N, Din);
          GX.noalias() += G * W;
        }
        if (requires_grad(w)) {
          detail::CMapRM<T> X(val(x).ptr(), N, Din);
          detail::MapRM<T> GW(grad(w).ptr(), Dout, Din);
          GW.noalias() += G.transpose() * X;
        }
        if (requires_grad(b)) {
          Tensor<T>& gb = grad(b);
          for (int n = 0; n < N; ++n)
            for (int d = 0; d < Dout; ++d) gb[d] += g.at2(n, d);
        }
      };
    return out;
  }

  /// 2D convolution, stride 1, zero padding. x (N,Cin,H,W), w (Cout,Cin,kh,kw).
  Var conv2d(Var x, Var w, Var b, int pad) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    if (vx.ndim() != 4 || vw.ndim() != 4 || vx.dim(1) != vw.dim(1))
      throw std::invalid_argument("conv2d: shape mismatch x" + shape_str(vx.shape) + " w" +
                                  shape_str(vw.shape));
    const int N = vx.dim(0), Cin = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
    const int Cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
    const int Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: kernel larger than input");
    const int rows = Cin * kh * kw;
    const std::int64_t cols = static_cast<std::int64_t>(Ho) * Wo;
    Tensor<T> y({N, Cout, Ho, Wo});
    const Tensor<T>& vb = val(b);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
      std::vector<T> col(static_cast<std::size_t>(rows) * cols);
      detail::im2col(vx.ptr() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H, W, kh, kw,
                     pad, col.data());
      detail::CMapRM<T> Wm(vw.ptr(), Cout, rows);
      detail::CMapCM<T> Col(col.data(), rows, cols);
      detail::MapRM<T> Yn(y.ptr() + static_cast<std::size_t>(n) * Cout * cols, Cout, cols);
      Yn.noalias() = Wm * Col;
      for (int c = 0; c < Cout; ++c)
        Yn.row(c).array() += vb[c];
    }
    Var out = make(std::move(y), grad_on_ && (requires_grad(x) || requires_grad(w) ||
                                              requires_grad(b)),
                   nullptr);
    if (nodes_[static_cast<std::size_t>(out)].rg)
      nodes_[static_cast<std::size_t>(out)].back = [this, out, x, w, b, pad, N, Cin, H, W,
                                                    Cout, kh, kw, Ho, Wo, rows, cols]() {
        const Tensor<T>& g = nodes_[static_cast<std::size_t>(out)].grad;
        const Tensor<T>& vx = val(x);
        const Tensor<T>& vw = val(w);
        const bool need_x = requires_grad(x);
        const bool need_w = requires_grad(w);
        const bool need_b = requires_grad(b);
        T* gx_ptr = need_x ? grad(x).ptr() : nullptr;
        // Per-sample weight-gradient partials, reduced in index order below.
        std::vector<Tensor<T>> dw_parts;
        if (need_w) dw_parts.assign(static_cast<std::size_t>(N), Tensor<T>(vw.shape, T(0)));
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
          std::vector<T> col(static_cast<std::size_t>(rows) * cols);
          detail::im2col(vx.ptr() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H, W, kh,
                         kw, pad, col.data());
          detail::CMapCM<T> Col(col.data(), rows, cols);
          detail::CMapRM<T> Gn(g.ptr() + static_cast<std::size_t>(n) * Cout * cols, Cout,
                               cols);
          if (need_w) {
            detail::MapRM<T> DW(dw_parts[static_cast<std::size_t>(n)].ptr(), Cout, rows);
            DW.noalias() = Gn * Col.transpose();
          }
          if (need_x) {
            std::vector<T> dcol(static_cast<std::size_t>(rows) * cols);
            detail::CMapRM<T> Wm(vw.ptr(), Cout, rows);
            detail::MapCM<T> DCol(dcol.data(), rows, cols);
            DCol.noalias() = Wm.transpose() * Gn;
            detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, pad,
                               gx_ptr + static_cast<std::size_t>(n) * Cin * H * W);
          }
        }
        if (need_w) {
          Tensor<T>& gw = grad(w);
          for (int n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < gw.numel(); ++i)
              gw[i] += dw_parts[static_cast<std::size_t>(n)][i];
        }
        if (need_b) {
          Tensor<T>& gb = grad(b);
          for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cout; ++c) {
              const T* src = g.ptr() + (static_cast<std::size_t>(n) * Cout + c) * cols;
              T acc = T(0);
              for (std::int64_t i = 0; i < cols; ++i) acc += src[i];
              gb[c] += acc;
            }
        }
      };
    return out;
  }

  /// Batch normalization over (N, H, W) per channel. In training mode the
  /// batch statistics normalize and, when gradients are enabled, update the
  /// running estimates in place; otherwise the running estimates normalize.
  Var batch_norm(Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                 T momentum, T eps) {
    const Tensor<T>& vx = val(x);
    if (vx.ndim() != 4) throw std::invalid_argument("batch_norm: expected 4D input");
    const int N = vx.dim(0), C = vx.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(vx.dim(2)) * vx.dim(3);
    const std::int64_t m = N * hw;
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vbeta = val(beta);

    auto xhat = std::make_shared<Tensor<T>>(vx.shape);
    auto istd = std::make_shared<Tensor<T>>(std::vector<int>{C});
    Tensor<T> y(vx.shape);

    if (training_) {
      for (int c = 0; c < C; ++c) {
        T mean = T(0);
        for (int n = 0; n < N; ++n) {
          const T* src = vx.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) mean += src[i];
        }
        mean /= static_cast<T>(m);
        T var = T(0);
        for (int n = 0; n < N; ++n) {
          const T* src = vx.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            const T d = src[i] - mean;
            var += d * d;
          }
        }
        var /= static_cast<T>(m);
        const T is = T(1) / std::sqrt(var + eps);
        (*istd)[c] = is;
        for (int n = 0; n < N; ++n) {
          const T* src = vx.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          T* xh = xhat->ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          T* dst = y.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            xh[i] = (src[i] - mean) * is;
            dst[i] = vg[c] * xh[i] + vbeta[c];
          }
        }
        if (grad_on_) {
          running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mean;
          running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
        }
      }
    } else {
      for (int c = 0; c < C; ++c) {
        const T is = T(1) / std::sqrt(running_var[c] + eps);
        (*istd)[c] = is;
        const T mean = running_mean[c];
        for (int n = 0; n < N; ++n) {
          const T* src = vx.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          T* xh = xhat->ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          T* dst = y.ptr() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) {
            xh[i] = (src[i] - mean) * is;
            dst[i] = vg[c] * xh[i] + vbeta[c];
          }
        }
      }
    }

    Var out = make(std::move(y), grad_on_ && (requires_grad(x) || requires_grad(gamma) ||
                                              requires_grad(beta)),
                   nullptr);
    const bool batch_stats = training_;
    if (nodes_[static_cast<std::size_t>(out)].rg)
      nodes_[static_cast<std::size_t>(out)].back = [this, out, x, gamma, beta, xhat, istd, N,
                                                    C, hw, m, batch_stats]() {
        const Tensor<T>& g = nodes_[static_cast<std::size_t>(out)].grad;
        const Tensor<T>& vg = val(gamma);
        if (requires_grad(gamma)) {
          Tensor<T>& gg = grad(gamma);
          for (int c = 0; c < C; ++c) {
            T acc = T(0);
            for (int n = 0; n < N; ++n) {
              const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i)
                acc += g[base + i] * (*xhat)[base + i];
            }
            gg[c] += acc;
          }
        }
        if (requires_grad(beta)) {
          Tensor<T>& gb = grad(beta);
          for (int c = 0; c < C; ++c) {
            T acc = T(0);
            for (int n = 0; n < N; ++n) {
              const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) acc += g[base + i];
            }
            gb[c] += acc;
          }
        }
        if (requires_grad(x)) {
          Tensor<T>& gx = grad(x);
          for (int c = 0; c < C; ++c) {
            const T gis = vg[c] * (*istd)[c];
            if (batch_stats) {
              T sum_g = T(0), sum_gx = T(0);
              for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                  sum_g += g[base + i];
                  sum_gx += g[base + i] * (*xhat)[base + i];
                }
              }
              const T mg = sum_g / static_cast<T>(m);
              const T mgx = sum_gx / static_cast<T>(m);
              for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i)
                  gx[base + i] += gis * (g[base + i] - mg - (*xhat)[base + i] * mgx);
              }
            } else {
              for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) gx[base + i] += gis * g[base + i];
              }
            }
          }
        }
      };
    return out;
  }

  /// Mean cross-entropy of logits (N, K) against integer labels.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor<T>& vl = val(logits);
    if (vl.ndim() != 2) throw std::invalid_argument("softmax_cross_entropy: expected (N, K)");
    const int N = vl.dim(0), K = vl.dim(1);
    if (static_cast<int>(labels.size()) != N)
      throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    for (int y : labels)
      if (y < 0 || y >= K)
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
    auto probs = std::make_shared<Tensor<T>>(vl.shape);
    T loss = T(0);
    for (int n = 0; n < N; ++n) {
      T mx = vl.at2(n, 0);
      for (int k = 1; k < K; ++k) mx = std::max(mx, vl.at2(n, k));
      T se = T(0);
      for (int k = 0; k < K; ++k) se += std::exp(vl.at2(n, k) - mx);
      const T lse = mx + std::log(se);
      for (int k = 0; k < K; ++k) probs->at2(n, k) = std::exp(vl.at2(n, k) - lse);
      loss += lse - vl.at2(n, labels[static_cast<std::size_t>(n)]);
    }
    loss /= static_cast<T>(N);
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return unary(Tensor<T>::scalar(loss), logits,
                 [this, probs, labels_copy, N, K](Var out, Var logits) {
                   const T g0 = nodes_[static_cast<std::size_t>(out)].grad[0];
                   Tensor<T>& gl = grad(logits);
                   const T inv = g0 / static_cast<T>(N);
                   for (int n = 0; n < N; ++n)
                     for (int k = 0; k < K; ++k)
                       gl.at2(n, k) +=
                           inv * (probs->at2(n, k) -
                                  (k == (*labels_copy)[static_cast<std::size_t>(n)] ? T(1)
                                                                                    : T(0)));
                 });
  }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool rg = false;
    std::function<void()> back;
  };

  Var make(Tensor<T> v, bool rg, std::function<void()> back) {
    nodes_.push_back(Node{std::move(v), {}, rg, std::move(back)});
    return static_cast<Var>(nodes_.size() - 1);
  }

  template <typename F>
  Var unary(Tensor<T> y, Var a, F&& fn) {
    Var out = make(std::move(y), grad_on_ && requires_grad(a), nullptr);
    if (nodes_[static_cast<std::size_t>(out)].rg)
      nodes_[static_cast<std::size_t>(out)].back = [fn = std::forward<F>(fn), out, a]() {
        fn(out, a);
      };
    return out;
  }

  template <typename F>
  Var unary_or_binary(Tensor<T> y, Var a, Var b, F&& fn) {
    Var out =
        make(std::move(y), grad_on_ && (requires_grad(a) || requires_grad(b)), nullptr);
    if (nodes_[static_cast<std::size_t>(out)].rg)
      nodes_[static_cast<std::size_t>(out)].back = [fn = std::forward<F>(fn), out, a, b]() {
        fn(out, a, b);
      };
    return out;
  }

  void accumulate(Var v, const Tensor<T>& g, T s) {
    Tensor<T>& gv = grad(v);
    for (std::int64_t i = 0; i < gv.numel(); ++i) gv[i] += s * g[i];
  }

  void accumulate_const(Var v, T s) {
    Tensor<T>& gv = grad(v);
    for (std::int64_t i = 0; i < gv.numel(); ++i) gv[i] += s;
  }

  std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
  std::unordered_map<const Tensor<T>*, Var> param_vars_;
  bool training_;
  bool grad_on_;
};

}  // namespace deltagan
