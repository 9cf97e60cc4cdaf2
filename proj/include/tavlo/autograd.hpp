#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<S>.
//
// A Var is a shared handle to a graph node. Operations that receive at
// least one input requiring gradients record a backward closure; the graph
// is released when the last Var referencing it goes away.

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tavlo/tensor.hpp"

namespace tavlo::ad {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<RowMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <class S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<S>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<S>(value.shape());
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor<S>& grad() const { return node_->grad_buffer(); }
  Tensor<S>& grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<S>(); }
  const std::shared_ptr<Node<S>>& node() const { return node_; }
  S item() const { return node_->value[0]; }

 private:
  std::shared_ptr<Node<S>> node_;
};

// Builds an op result. `bw` receives the result node and must accumulate
// into parents that require gradients.
template <class S>
Var<S> make_op(Tensor<S> value, std::vector<Var<S>> inputs,
               std::function<void(Node<S>&)> bw) {
  Var<S> out(std::move(value));
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& v : inputs) any = any || v.requires_grad();
  if (!any) return out;
  auto& n = *out.node();
  n.requires_grad = true;
  for (auto& v : inputs) n.parents.push_back(v.node());
  n.backward = std::move(bw);
  return out;
}

template <class S>
void backward(const Var<S>& root) {
  if (!root.requires_grad()) return;
  // iterative post-order DFS for a topological order
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<S>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& g = root.node()->grad_buffer();
  for (auto& x : g.vec()) x += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward) {
      n->grad_buffer();
      n->backward(*n);
    }
  }
}

namespace detail {
template <class S>
Node<S>& parent(Node<S>& n, std::size_t i) {
  return *n.parents[i];
}
template <class S>
bool wants(Node<S>& n, std::size_t i) {
  return n.parents[i]->requires_grad;
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (a.shape() != b.shape())
    throw InvalidInput("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<S>(std::move(out), {a, b}, [](Node<S>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(n, k)) continue;
      auto& g = detail::parent(n, k).grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
  Tensor<S> out = a.value();
  for (auto& x : out.vec()) x *= c;
  return make_op<S>(std::move(out), {a}, [c](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
  });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& x : out.vec()) x = x > S(0) ? x : S(0);
  return make_op<S>(std::move(out), {a}, [](Node<S>& n) {
    auto& p = detail::parent(n, 0);
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (p.value[i] > S(0)) g[i] += n.grad[i];
  });
}

// Exact (erf-based) GELU. The local derivative is stored during the forward
// pass.
template <class S>
Var<S> gelu(const Var<S>& a) {
  using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
  const std::size_t n = a.size();
  Eigen::Map<const Arr> x(a.value().data(), Eigen::Index(n));
  const Arr cdf = S(0.5) * (S(1) + (x * S(0.70710678118654752440)).erf());
  Tensor<S> out(a.shape());
  Eigen::Map<Arr>(out.data(), Eigen::Index(n)) = x * cdf;
  if (!grad_mode() || !a.requires_grad()) return make_op<S>(std::move(out), {a}, nullptr);
  Tensor<S> dydx(a.shape());
  Eigen::Map<Arr>(dydx.data(), Eigen::Index(n)) =
      cdf + x * S(0.39894228040143267794) * (S(-0.5) * x * x).exp();
  return make_op<S>(std::move(out), {a}, [dydx = std::move(dydx)](Node<S>& nd) {
    auto& g = detail::parent(nd, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i] * dydx[i];
  });
}

// Inverted dropout; identity when p == 0.
template <class S, class Rng>
Var<S> dropout(const Var<S>& a, S p, Rng& rng) {
  if (p <= S(0)) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  Tensor<S> mask(a.shape());
  const S s = S(1) / (S(1) - p);
  for (auto& m : mask.vec()) m = keep(rng) ? s : S(0);
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return make_op<S>(std::move(out), {a}, [mask = std::move(mask)](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * n.grad[i];
  });
}

template <class S>
Var<S> sum(const Var<S>& a) {
  S s = 0;
  for (S x : a.value().vec()) s += x;
  return make_op<S>(Tensor<S>({1}, s), {a}, [](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (auto& x : g.vec()) x += n.grad[0];
  });
}

// sum(a * w) for a constant weight tensor w; handy for gradient checks.
template <class S>
Var<S> weighted_sum(const Var<S>& a, const Tensor<S>& w) {
  if (a.shape() != w.shape()) throw InvalidInput("weighted_sum: shape mismatch");
  S s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) s += a.value()[i] * w[i];
  return make_op<S>(Tensor<S>({1}, s), {a}, [w](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += w[i] * n.grad[0];
  });
}

// ---------------------------------------------------------------- shape ops

template <class S>
Var<S> reshape(const Var<S>& a, Shape s) {
  Tensor<S> out = a.value().reshaped(std::move(s));
  return make_op<S>(std::move(out), {a}, [](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

namespace detail {
// (outer, axis_len, inner) decomposition of a shape around `axis`.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class S>
Var<S> concat(const Var<S>& a, const Var<S>& b, std::size_t axis) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size())
    throw InvalidInput("concat: rank mismatch");
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (i != axis && sa[i] != sb[i])
      throw InvalidInput("concat: shape mismatch " + shape_str(sa) + " vs " +
                         shape_str(sb));
  Shape so = sa;
  so[axis] = sa[axis] + sb[axis];
  std::size_t outer, inner;
  detail::split_axis(sa, axis, outer, inner);
  const std::size_t la = sa[axis] * inner, lb = sb[axis] * inner;
  Tensor<S> out(so);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.value().data() + o * la, la, out.data() + o * (la + lb));
    std::copy_n(b.value().data() + o * lb, lb, out.data() + o * (la + lb) + la);
  }
  return make_op<S>(std::move(out), {a, b}, [outer, la, lb](Node<S>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants(n, k)) continue;
      auto& g = detail::parent(n, k).grad_buffer();
      const std::size_t len = k == 0 ? la : lb, off = k == 0 ? 0 : la;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len; ++i)
          g[o * len + i] += n.grad[o * (la + lb) + off + i];
    }
  });
}

template <class S>
Var<S> slice(const Var<S>& a, std::size_t axis, std::size_t begin,
             std::size_t end) {
  const Shape& sa = a.shape();
  if (axis >= sa.size() || begin > end || end > sa[axis])
    throw InvalidInput("slice: bad range");
  Shape so = sa;
  so[axis] = end - begin;
  std::size_t outer, inner;
  detail::split_axis(sa, axis, outer, inner);
  const std::size_t src = sa[axis] * inner, len = (end - begin) * inner,
                    off = begin * inner;
  Tensor<S> out(so);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.value().data() + o * src + off, len, out.data() + o * len);
  return make_op<S>(std::move(out), {a}, [outer, src, len, off](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < len; ++i)
        g[o * src + off + i] += n.grad[o * len + i];
  });
}

// [A, X, Y, R] -> [A, Y, X, R]
template <class S>
Var<S> swap_middle(const Var<S>& a) {
  const Shape& s = a.shape();
  if (s.size() != 4) throw InvalidInput("swap_middle: expected rank 4");
  const std::size_t A = s[0], X = s[1], Y = s[2], R = s[3];
  Tensor<S> out({A, Y, X, R});
  const S* src = a.value().data();
  for (std::size_t i = 0; i < A; ++i)
    for (std::size_t x = 0; x < X; ++x)
      for (std::size_t y = 0; y < Y; ++y)
        std::copy_n(src + ((i * X + x) * Y + y) * R, R,
                    out.data() + ((i * Y + y) * X + x) * R);
  return make_op<S>(std::move(out), {a}, [A, X, Y, R](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t i = 0; i < A; ++i)
      for (std::size_t x = 0; x < X; ++x)
        for (std::size_t y = 0; y < Y; ++y)
          for (std::size_t r = 0; r < R; ++r)
            g[((i * X + x) * Y + y) * R + r] +=
                n.grad[((i * Y + y) * X + x) * R + r];
  });
}

// Numpy-style broadcast of `a` to `target` (right-aligned, size-1 or equal).
template <class S>
Var<S> broadcast_to(const Var<S>& a, const Shape& target) {
  const Shape& s = a.shape();
  if (s.size() > target.size()) throw InvalidInput("broadcast_to: rank too high");
  const std::size_t lead = target.size() - s.size();
  std::vector<std::size_t> src_stride(target.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t ti = i + lead;
    if (s[i] != target[ti] && s[i] != 1)
      throw InvalidInput("broadcast_to: cannot broadcast " + shape_str(s) +
                         " to " + shape_str(target));
    src_stride[ti] = s[i] == 1 ? 0 : stride;
    stride *= s[i];
  }
  const std::size_t total = shape_numel(target);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(target.size(), 0);
  for (std::size_t k = 0; k < total; ++k) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < target.size(); ++d) off += idx[d] * src_stride[d];
    map[k] = off;
    for (std::size_t d = target.size(); d-- > 0;) {
      if (++idx[d] < target[d]) break;
      idx[d] = 0;
    }
  }
  Tensor<S> out(target);
  for (std::size_t k = 0; k < total; ++k) out[k] = a.value()[map[k]];
  return make_op<S>(std::move(out), {a}, [map = std::move(map)](Node<S>& n) {
    auto& g = detail::parent(n, 0).grad_buffer();
    for (std::size_t k = 0; k < map.size(); ++k) g[map[k]] += n.grad[k];
  });
}

// ---------------------------------------------------------------- dense ops

// x[..., in] * w[in, out] (+ b[out])
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>* b = nullptr) {
  const Shape& sx = x.shape();
  if (w.shape().size() != 2 || sx.empty() || sx.back() != w.shape()[0])
    throw InvalidInput("linear: shape mismatch " + shape_str(sx) + " * " +
                       shape_str(w.shape()));
  const std::size_t in = w.shape()[0], outd = w.shape()[1];
  const std::size_t rows = x.size() / in;
  Shape so = sx;
  so.back() = outd;
  Tensor<S> out(so);
  MatMap<S> Y(out.data(), rows, outd);
  ConstMatMap<S> X(x.value().data(), rows, in);
  ConstMatMap<S> W(w.value().data(), in, outd);
  Y.noalias() = X * W;
  std::vector<Var<S>> inputs{x, w};
  if (b) {
    if (b->shape() != Shape{outd}) throw InvalidInput("linear: bias shape");
    const S* bp = b->value().data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < outd; ++c) Y(r, c) += bp[c];
    inputs.push_back(*b);
  }
  return make_op<S>(std::move(out), std::move(inputs),
                    [rows, in, outd](Node<S>& n) {
    ConstMatMap<S> G(n.grad.data(), rows, outd);
    auto& px = detail::parent(n, 0);
    auto& pw = detail::parent(n, 1);
    if (px.requires_grad) {
      MatMap<S> GX(px.grad_buffer().data(), rows, in);
      ConstMatMap<S> W(pw.value.data(), in, outd);
      GX.noalias() += G * W.transpose();
    }
    if (pw.requires_grad) {
      MatMap<S> GW(pw.grad_buffer().data(), in, outd);
      ConstMatMap<S> X(px.value.data(), rows, in);
      GW.noalias() += X.transpose() * G;
    }
    if (n.parents.size() > 2 && detail::wants(n, 2)) {
      auto& gb = detail::parent(n, 2).grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < outd; ++c) gb[c] += G(r, c);
    }
  });
}

// Layer normalization over the last axis.
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                  S eps = S(1e-5)) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    throw InvalidInput("layer_norm: parameter shape");
  const std::size_t rows = x.size() / d;
  Tensor<S> out(x.shape());
  Tensor<S> xhat(x.shape());
  std::vector<S> inv_std(rows);
  const S* xp = x.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    S mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xp[r * d + c];
    mean /= S(d);
    S var = 0;
    for (std::size_t c = 0; c < d; ++c) {
      S z = xp[r * d + c] - mean;
      var += z * z;
    }
    var /= S(d);
    inv_std[r] = S(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      S h = (xp[r * d + c] - mean) * inv_std[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_op<S>(std::move(out), {x, gamma, beta},
                    [rows, d, xhat = std::move(xhat),
                     inv_std = std::move(inv_std)](Node<S>& n) {
    auto& px = detail::parent(n, 0);
    auto& pg = detail::parent(n, 1);
    const S* gm = pg.value.data();
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c)
          gg[c] += n.grad[r * d + c] * xhat[r * d + c];
    }
    if (detail::wants(n, 2)) {
      auto& gb = detail::parent(n, 2).grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < d; ++c) gb[c] += n.grad[r * d + c];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        S m1 = 0, m2 = 0;
        for (std::size_t c = 0; c < d; ++c) {
          S gh = n.grad[r * d + c] * gm[c];
          m1 += gh;
          m2 += gh * xhat[r * d + c];
        }
        m1 /= S(d);
        m2 /= S(d);
        for (std::size_t c = 0; c < d; ++c) {
          S gh = n.grad[r * d + c] * gm[c];
          gx[r * d + c] += inv_std[r] * (gh - m1 - xhat[r * d + c] * m2);
        }
      }
    }
  });
}

struct Conv2dGeometry {
  std::size_t kh = 3, kw = 3;
  std::size_t sh = 1, sw = 1;
  std::size_t ph = 0, pw = 0;
  bool replicate = false;  // pad by repeating edge pixels instead of zeros
};

namespace detail {
// Source index of padded coordinate p, or -1 for a zero-padding tap.
inline std::ptrdiff_t pad_index(std::size_t p, std::size_t pad, std::size_t n, bool replicate) {
  const std::ptrdiff_t i = std::ptrdiff_t(p) - std::ptrdiff_t(pad);
  if (i >= 0 && i < std::ptrdiff_t(n)) return i;
  if (!replicate) return -1;
  return std::clamp<std::ptrdiff_t>(i, 0, std::ptrdiff_t(n) - 1);
}
}  // namespace detail

// NHWC convolution via im2col. Weight layout [kh*kw*Cin, Cout].
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& b,
              const Conv2dGeometry& g) {
  const Shape& sx = x.shape();
  if (sx.size() != 4) throw InvalidInput("conv2d: input must be NHWC");
  const std::size_t N = sx[0], H = sx[1], W = sx[2], C = sx[3];
  const std::size_t patch = g.kh * g.kw * C;
  if (w.shape().size() != 2 || w.shape()[0] != patch)
    throw InvalidInput("conv2d: weight shape " + shape_str(w.shape()) +
                       " does not match patch size " + std::to_string(patch));
  const std::size_t Co = w.shape()[1];
  if (H + 2 * g.ph < g.kh || W + 2 * g.pw < g.kw)
    throw InvalidInput("conv2d: kernel larger than padded input");
  const std::size_t Ho = (H + 2 * g.ph - g.kh) / g.sh + 1;
  const std::size_t Wo = (W + 2 * g.pw - g.kw) / g.sw + 1;
  const std::size_t rows = N * Ho * Wo;
  RowMat<S> cols = RowMat<S>::Zero(rows, patch);
  const S* xp = x.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        S* dst = cols.data() + ((n * Ho + oy) * Wo + ox) * patch;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const auto iy = detail::pad_index(oy * g.sh + ky, g.ph, H, g.replicate);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const auto ix = detail::pad_index(ox * g.sw + kx, g.pw, W, g.replicate);
            if (ix < 0) continue;
            std::copy_n(xp + ((n * H + iy) * W + ix) * C, C,
                        dst + (ky * g.kw + kx) * C);
          }
        }
      }
  Tensor<S> out({N, Ho, Wo, Co});
  MatMap<S> Y(out.data(), rows, Co);
  ConstMatMap<S> Wm(w.value().data(), patch, Co);
  Y.noalias() = cols * Wm;
  if (b.shape() != Shape{Co}) throw InvalidInput("conv2d: bias shape");
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(
      b.value().data(), Co);
  return make_op<S>(std::move(out), {x, w, b},
                    [=, cols = std::move(cols)](Node<S>& n) {
    ConstMatMap<S> G(n.grad.data(), rows, Co);
    auto& px = detail::parent(n, 0);
    auto& pw = detail::parent(n, 1);
    if (pw.requires_grad) {
      MatMap<S> GW(pw.grad_buffer().data(), patch, Co);
      GW.noalias() += cols.transpose() * G;
    }
    if (detail::wants(n, 2)) {
      auto& gb = detail::parent(n, 2).grad_buffer();
      Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gb.data(), Co) +=
          G.colwise().sum();
    }
    if (px.requires_grad) {
      ConstMatMap<S> Wm(pw.value.data(), patch, Co);
      RowMat<S> dcols = G * Wm.transpose();
      auto& gx = px.grad_buffer();
      for (std::size_t nn = 0; nn < N; ++nn)
        for (std::size_t oy = 0; oy < Ho; ++oy)
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const S* src = dcols.data() + ((nn * Ho + oy) * Wo + ox) * patch;
            for (std::size_t ky = 0; ky < g.kh; ++ky) {
              const auto iy = detail::pad_index(oy * g.sh + ky, g.ph, H, g.replicate);
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const auto ix = detail::pad_index(ox * g.sw + kx, g.pw, W, g.replicate);
                if (ix < 0) continue;
                S* d = gx.data() + ((nn * H + iy) * W + ix) * C;
                const S* s = src + (ky * g.kw + kx) * C;
                for (std::size_t c = 0; c < C; ++c) d[c] += s[c];
              }
            }
          }
    }
  });
}

// Scaled dot-product multi-head attention over independent groups.
// q, k, v: [G, L, D] with D divisible by `heads`; softmax over the L keys.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v,
                 std::size_t heads) {
  const Shape& s = q.shape();
  if (s.size() != 3 || k.shape() != s || v.shape() != s)
    throw InvalidInput("attention: q, k, v must share a [G, L, D] shape");
  const std::size_t G = s[0], L = s[1], D = s[2];
  if (heads == 0 || D % heads != 0)
    throw InvalidConfig("attention: heads must divide model dim");
  const std::size_t dh = D / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  using Strided = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
  // probabilities saved per (group, head): [G*heads, L, L]
  Tensor<S> probs({G * heads, L, L});
  Tensor<S> out(s);
  for (std::size_t gi = 0; gi < G; ++gi)
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = gi * L * D + h * dh;
      Strided Q(q.value().data() + base, L, dh, Eigen::OuterStride<>(D));
      Strided K(k.value().data() + base, L, dh, Eigen::OuterStride<>(D));
      Strided V(v.value().data() + base, L, dh, Eigen::OuterStride<>(D));
      MatMap<S> P(probs.data() + (gi * heads + h) * L * L, L, L);
      P.noalias() = (Q * K.transpose()) * scale;
      for (std::size_t r = 0; r < L; ++r) {
        S m = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - m).exp();
        P.row(r) /= P.row(r).sum();
      }
      StridedMut O(out.data() + base, L, dh, Eigen::OuterStride<>(D));
      O.noalias() = P * V;
    }
  return make_op<S>(std::move(out), {q, k, v},
                    [=, probs = std::move(probs)](Node<S>& n) {
    auto& pq = detail::parent(n, 0);
    auto& pk = detail::parent(n, 1);
    auto& pv = detail::parent(n, 2);
    S* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
    S* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
    S* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
    RowMat<S> dP(L, L), dS(L, L);
    for (std::size_t gi = 0; gi < G; ++gi)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = gi * L * D + h * dh;
        Strided Q(pq.value.data() + base, L, dh, Eigen::OuterStride<>(D));
        Strided K(pk.value.data() + base, L, dh, Eigen::OuterStride<>(D));
        Strided V(pv.value.data() + base, L, dh, Eigen::OuterStride<>(D));
        Strided dO(n.grad.data() + base, L, dh, Eigen::OuterStride<>(D));
        ConstMatMap<S> P(probs.data() + (gi * heads + h) * L * L, L, L);
        if (gv) {
          StridedMut dV(gv + base, L, dh, Eigen::OuterStride<>(D));
          dV.noalias() += P.transpose() * dO;
        }
        if (!gq && !gk) continue;
        dP.noalias() = dO * V.transpose();
        for (std::size_t r = 0; r < L; ++r) {
          S dot = P.row(r).dot(dP.row(r));
          dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
        }
        dS *= scale;
        if (gq) {
          StridedMut dQ(gq + base, L, dh, Eigen::OuterStride<>(D));
          dQ.noalias() += dS * K;
        }
        if (gk) {
          StridedMut dK(gk + base, L, dh, Eigen::OuterStride<>(D));
          dK.noalias() += dS.transpose() * Q;
        }
      }
  });
}

// Attention probabilities only (no graph); [G*heads, L, L].
template <class S>
Tensor<S> attention_probabilities(const Tensor<S>& q, const Tensor<S>& k,
                                  std::size_t heads) {
  const std::size_t G = q.dim(0), L = q.dim(1), D = q.dim(2), dh = D / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  Tensor<S> probs({G * heads, L, L});
  for (std::size_t gi = 0; gi < G; ++gi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        S* row = probs.data() + ((gi * heads + h) * L + i) * L;
        S m = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          S dot = 0;
          for (std::size_t c = 0; c < dh; ++c)
            dot += q[(gi * L + i) * D + h * dh + c] *
                   k[(gi * L + j) * D + h * dh + c];
          row[j] = dot * scale;
          m = std::max(m, row[j]);
        }
        S z = 0;
        for (std::size_t j = 0; j < L; ++j) z += (row[j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < L; ++j) row[j] /= z;
      }
  return probs;
}

}  // namespace tavlo::ad
