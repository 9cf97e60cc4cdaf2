#pragma once

// Temporal multiple-instance contrastive objective and localization maps.
//
// For clip i and timestamp t, the positive response is the best cosine
// between the clip's audio token and any of its own visual locations; the
// negative response against clip j is the mean cosine over clip j's visual
// locations at the same timestamp.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tavlo/autograd.hpp"
#include "tavlo/error.hpp"

namespace tavlo::obj {

using ad::Var;

// Cosine similarity; zero-norm operands give 0 and bump the counter.
template <class S>
double cosine(std::span<const S> a, std::span<const S> b, Diagnostics* diag = nullptr) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  if (na == 0.0 || nb == 0.0) {
    if (diag) ++diag->zero_norm_count;
    return 0.0;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// a_t: [D]; v_t: [H, W, D] (or [P, D]).
template <class S>
double positive_response(const Tensor<S>& a_t, const Tensor<S>& v_t,
                         Diagnostics* diag = nullptr) {
  const std::size_t D = a_t.size();
  if (D == 0 || v_t.size() % D != 0 || v_t.shape().back() != D)
    throw InvalidInput("positive_response: feature dims differ");
  const std::size_t P = v_t.size() / D;
  double best = -2.0;
  for (std::size_t p = 0; p < P; ++p)
    best = std::max(best, cosine<S>(a_t.span(), v_t.span().subspan(p * D, D), diag));
  return best;
}

template <class S>
double negative_response(const Tensor<S>& a_t, const Tensor<S>& v_t_other,
                         Diagnostics* diag = nullptr) {
  const std::size_t D = a_t.size();
  if (D == 0 || v_t_other.size() % D != 0 || v_t_other.shape().back() != D)
    throw InvalidInput("negative_response: feature dims differ");
  const std::size_t P = v_t_other.size() / D;
  double acc = 0;
  for (std::size_t p = 0; p < P; ++p)
    acc += cosine<S>(a_t.span(), v_t_other.span().subspan(p * D, D), diag);
  return acc / double(P);
}

enum class NegativeBag { kMean, kMax };
enum class Direction { kAudioToVisual, kTotal };

struct LossOptions {
  NegativeBag negative_bag = NegativeBag::kMean;
  Direction direction = Direction::kTotal;
  double temperature = 1.0;
};

namespace detail {

// Unit vectors per row of x ([rows, D]); zero rows stay zero.
template <class S>
void normalize_rows(const S* x, std::size_t rows, std::size_t D, std::vector<double>& unit,
                    std::vector<double>& norms, Diagnostics* diag) {
  unit.assign(rows * D, 0.0);
  norms.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double n2 = 0;
    for (std::size_t c = 0; c < D; ++c) n2 += double(x[r * D + c]) * double(x[r * D + c]);
    if (n2 == 0.0) {
      if (diag) ++diag->zero_norm_count;
      continue;
    }
    const double n = std::sqrt(n2);
    norms[r] = n;
    for (std::size_t c = 0; c < D; ++c) unit[r * D + c] = double(x[r * D + c]) / n;
  }
}

// d(x/|x|) backward for one row.
inline void unit_backward(const double* u, double norm, const double* gu, std::size_t D,
                          double* gx) {
  if (norm == 0.0) return;
  double dot = 0;
  for (std::size_t c = 0; c < D; ++c) dot += u[c] * gu[c];
  for (std::size_t c = 0; c < D; ++c) gx[c] = (gu[c] - u[c] * dot) / norm;
}

}  // namespace detail

// audio [B, T, D]; visual [B, T, H, W, D] (or [B, T, P, D]). Returns a scalar Var.
template <class S>
Var<S> contrastive_loss(const Var<S>& audio, const Var<S>& visual,
                        const LossOptions& opt = {}, Diagnostics* diag = nullptr) {
  const Shape& sa = audio.shape();
  const Shape& sv = visual.shape();
  if (sa.size() != 3 || sv.size() < 4 || sv[0] != sa[0] || sv[1] != sa[1] ||
      sv.back() != sa[2])
    throw InvalidInput("contrastive_loss: audio " + shape_str(sa) +
                       " and visual " + shape_str(sv) + " disagree");
  if (!(opt.temperature > 0)) throw InvalidConfig("objective.temperature must be > 0");
  const std::size_t B = sa[0], T = sa[1], D = sa[2];
  const std::size_t P = visual.size() / (B * T * D);
  if (B == 0) throw InvalidInput("contrastive_loss: empty batch");
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < D; ++c)
        if (!std::isfinite(double(audio.value()[(i * T + t) * D + c])))
          throw NumericalError("contrastive_loss: non-finite audio representation at clip " +
                               std::to_string(i) + ", t=" + std::to_string(t));
      for (std::size_t c = 0; c < P * D; ++c)
        if (!std::isfinite(double(visual.value()[(i * T + t) * P * D + c])))
          throw NumericalError("contrastive_loss: non-finite visual representation at clip " +
                               std::to_string(i) + ", t=" + std::to_string(t));
    }

  std::vector<double> ua, na, uv, nv;
  detail::normalize_rows(audio.value().data(), B * T, D, ua, na, diag);
  detail::normalize_rows(visual.value().data(), B * T * P, D, uv, nv, diag);

  // cos[((i * B + j) * T + t) * P + p] = <a_i^t, v_j^t,p>
  std::vector<double> cs(B * B * T * P);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t t = 0; t < T; ++t) {
        const double* a = &ua[(i * T + t) * D];
        for (std::size_t p = 0; p < P; ++p) {
          const double* v = &uv[((j * T + t) * P + p) * D];
          double dot = 0;
          for (std::size_t c = 0; c < D; ++c) dot += a[c] * v[c];
          cs[((i * B + j) * T + t) * P + p] = dot;
        }
      }
  auto at = [&](std::size_t i, std::size_t j, std::size_t t, std::size_t p) -> double& {
    return cs[((i * B + j) * T + t) * P + p];
  };

  // bag responses and their argmax locations (for max bags)
  std::vector<double> bag(B * B * T);
  std::vector<std::size_t> arg(B * B * T, 0);
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < B; ++j)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t k = (i * B + j) * T + t;
        const bool use_max = i == j || opt.negative_bag == NegativeBag::kMax;
        if (use_max) {
          std::size_t best = 0;
          for (std::size_t p = 1; p < P; ++p)
            if (at(i, j, t, p) > at(i, j, t, best)) best = p;
          arg[k] = best;
          bag[k] = at(i, j, t, best);
        } else {
          double acc = 0;
          for (std::size_t p = 0; p < P; ++p) acc += at(i, j, t, p);
          bag[k] = acc / double(P);
        }
      }
  auto resp = [&](std::size_t i, std::size_t j, std::size_t t) {
    return bag[(i * B + j) * T + t];
  };

  const double tau = opt.temperature;
  const double w_mean = 1.0 / double(B * T);
  std::vector<double> dbag(B * B * T, 0.0);
  double loss = 0;
  const int passes = opt.direction == Direction::kTotal ? 2 : 1;
  std::vector<double> logits(B);
  for (int pass = 0; pass < passes; ++pass)
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t t = 0; t < T; ++t) {
        // logits[0] = positive, others = negatives (row i or column i)
        const double pos = resp(i, i, t) / tau;
        double m = pos;
        std::size_t n = 0;
        logits[n++] = pos;
        for (std::size_t j = 0; j < B; ++j) {
          if (j == i) continue;
          const double neg = (pass == 0 ? resp(i, j, t) : resp(j, i, t)) / tau;
          logits[n++] = neg;
          m = std::max(m, neg);
        }
        double z = 0;
        for (std::size_t k = 0; k < n; ++k) z += std::exp(logits[k] - m);
        loss += w_mean * (m + std::log(z) - pos);
        // gradients of this term w.r.t. the bag responses
        std::size_t k = 1;
        dbag[(i * B + i) * T + t] += w_mean * (std::exp(logits[0] - m) / z - 1.0) / tau;
        for (std::size_t j = 0; j < B; ++j) {
          if (j == i) continue;
          const double g = w_mean * std::exp(logits[k++] - m) / z / tau;
          dbag[((pass == 0 ? i * B + j : j * B + i)) * T + t] += g;
        }
      }

  Tensor<S> out({1}, S(loss));
  const NegativeBag negative_bag = opt.negative_bag;
  return ad::make_op<S>(
      std::move(out), {audio, visual},
      [=, ua = std::move(ua), na = std::move(na), uv = std::move(uv), nv = std::move(nv),
       arg = std::move(arg), dbag = std::move(dbag)](ad::Node<S>& node) {
        const double up = double(node.grad[0]);
        // d loss / d cos
        std::vector<double> gua(B * T * D, 0.0), guv(B * T * P * D, 0.0);
        for (std::size_t i = 0; i < B; ++i)
          for (std::size_t j = 0; j < B; ++j)
            for (std::size_t t = 0; t < T; ++t) {
              const std::size_t k = (i * B + j) * T + t;
              const double g = dbag[k] * up;
              if (g == 0.0) continue;
              const double* a = &ua[(i * T + t) * D];
              double* ga = &gua[(i * T + t) * D];
              auto touch = [&](std::size_t p, double w) {
                const double* v = &uv[((j * T + t) * P + p) * D];
                double* gv = &guv[((j * T + t) * P + p) * D];
                for (std::size_t c = 0; c < D; ++c) {
                  ga[c] += w * v[c];
                  gv[c] += w * a[c];
                }
              };
              if (i == j || negative_bag == NegativeBag::kMax) {
                touch(arg[k], g);
              } else {
                for (std::size_t p = 0; p < P; ++p) touch(p, g / double(P));
              }
            }
        auto& pa = *node.parents[0];
        auto& pv = *node.parents[1];
        std::vector<double> tmp(D);
        if (pa.requires_grad) {
          auto& g = pa.grad_buffer();
          for (std::size_t r = 0; r < B * T; ++r) {
            detail::unit_backward(&ua[r * D], na[r], &gua[r * D], D, tmp.data());
            if (na[r] == 0.0) continue;
            for (std::size_t c = 0; c < D; ++c) g[r * D + c] += S(tmp[c]);
          }
        }
        if (pv.requires_grad) {
          auto& g = pv.grad_buffer();
          for (std::size_t r = 0; r < B * T * P; ++r) {
            if (nv[r] == 0.0) continue;
            detail::unit_backward(&uv[r * D], nv[r], &guv[r * D], D, tmp.data());
            for (std::size_t c = 0; c < D; ++c) g[r * D + c] += S(tmp[c]);
          }
        }
      });
}

template <class S>
double loss_a2v(const Tensor<S>& audio, const Tensor<S>& visual,
                NegativeBag bag = NegativeBag::kMean, Diagnostics* diag = nullptr) {
  ad::NoGradGuard ng;
  return double(contrastive_loss(Var<S>(audio), Var<S>(visual),
                                 {bag, Direction::kAudioToVisual, 1.0}, diag)
                    .item());
}

template <class S>
double loss_total(const Tensor<S>& audio, const Tensor<S>& visual,
                  NegativeBag bag = NegativeBag::kMean, Diagnostics* diag = nullptr) {
  ad::NoGradGuard ng;
  return double(contrastive_loss(Var<S>(audio), Var<S>(visual),
                                 {bag, Direction::kTotal, 1.0}, diag)
                    .item());
}

// Per-(t, x, y) cosine between a[t] and v[t, x, y]; a [T, D], v [T, H, W, D].
template <class S>
Tensor<double> localization_map(const Tensor<S>& a, const Tensor<S>& v,
                                Diagnostics* diag = nullptr) {
  if (a.rank() != 2 || v.rank() != 4 || v.dim(0) != a.dim(0) || v.dim(3) != a.dim(1))
    throw InvalidInput("localization_map: shapes " + shape_str(a.shape()) + " and " +
                       shape_str(v.shape()) + " disagree");
  const std::size_t T = v.dim(0), H = v.dim(1), W = v.dim(2), D = v.dim(3);
  Tensor<double> out({T, H, W});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t p = 0; p < H * W; ++p)
      out[t * H * W + p] = std::clamp(
          cosine<S>(a.span().subspan(t * D, D), v.span().subspan((t * H * W + p) * D, D), diag),
          -1.0, 1.0);
  return out;
}

// Bilinear resize of an [H, W] map with half-pixel centres and edge clamping.
inline Tensor<double> upsample_bilinear(const Tensor<double>& m, std::size_t out_h,
                                        std::size_t out_w) {
  const std::size_t H = m.dim(0), W = m.dim(1);
  Tensor<double> out({out_h, out_w});
  const double sy = double(H) / double(out_h), sx = double(W) / double(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(H - 1));
    const auto y0 = std::size_t(fy);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(W - 1));
      const auto x0 = std::size_t(fx);
      const std::size_t x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - double(x0);
      const double top = m[y0 * W + x0] * (1 - wx) + m[y0 * W + x1] * wx;
      const double bot = m[y1 * W + x0] * (1 - wx) + m[y1 * W + x1] * wx;
      out[y * out_w + x] = top * (1 - wy) + bot * wy;
    }
  }
  return out;
}

}  // namespace tavlo::obj
