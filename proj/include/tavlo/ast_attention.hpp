#pragma once

// Audio-Spatial-Temporal attention stack.
//
// The joint state is [B, T, N, D] with N = 1 + H*W: token 0 of each row is
// the audio token, tokens 1.. are row-major visual positions. Spatial
// attention mixes the N tokens of one (clip, timestamp) row and hands the
// temporal stage a transposed [B, N, T, D] view; temporal attention mixes
// the T entries of one (clip, token) column and transposes back.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tavlo/autograd.hpp"
#include "tavlo/encoders.hpp"
#include "tavlo/nn.hpp"

namespace tavlo::ast {

using ad::Var;

struct ASTBlockConfig {
  std::size_t depth = 3;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 means 4 * D
  double dropout = 0.1;
  double ln_eps = 1e-5;
  // Init scale of attention/FFN output projections relative to 1/sqrt(fan_in).
  double output_init_gain = 0.02;

  std::size_t hidden(std::size_t d) const { return ffn_hidden ? ffn_hidden : 4 * d; }

  void validate(std::size_t d_model) const {
    if (depth == 0) throw InvalidConfig("ast.depth must be >= 1");
    if (heads == 0 || d_model % heads != 0)
      throw InvalidConfig("ast.heads (" + std::to_string(heads) +
                          ") must divide the model dimension D=" +
                          std::to_string(d_model));
    if (!(dropout >= 0.0 && dropout < 1.0))
      throw InvalidConfig("ast.dropout must lie in [0, 1)");
  }
};

// Pre-norm MSA and FFN sublayers with residuals.
template <class S>
struct AttentionWeights {
  nn::LayerNorm<S> ln_attn, ln_ffn;
  nn::Linear<S> wq, wk, wv, wo;
  nn::Linear<S> ff1, ff2;

  template <class Rng>
  static AttentionWeights make(nn::ParameterSet<S>& ps, const std::string& name,
                               std::size_t d, const ASTBlockConfig& cfg, Rng& rng) {
    AttentionWeights w;
    w.ln_attn = nn::LayerNorm<S>::make(ps, name + ".ln_attn", d, S(cfg.ln_eps));
    w.wq = nn::Linear<S>::make(ps, name + ".wq", d, d, rng);
    w.wk = nn::Linear<S>::make(ps, name + ".wk", d, d, rng);
    w.wv = nn::Linear<S>::make(ps, name + ".wv", d, d, rng);
    w.wo = nn::Linear<S>::make(ps, name + ".wo", d, d, rng, cfg.output_init_gain);
    w.ln_ffn = nn::LayerNorm<S>::make(ps, name + ".ln_ffn", d, S(cfg.ln_eps));
    w.ff1 = nn::Linear<S>::make(ps, name + ".ff1", d, cfg.hidden(d), rng, std::sqrt(2.0));
    w.ff2 = nn::Linear<S>::make(ps, name + ".ff2", cfg.hidden(d), d, rng,
                                cfg.output_init_gain);
    return w;
  }

  // Zeroes both residual-branch output projections.
  void zero_output_projections() {
    for (auto* v : {&wo.weight, &wo.bias, &ff2.weight, &ff2.bias})
      v->mutable_value().fill(S(0));
  }
};

template <class S>
struct ASTLayer {
  AttentionWeights<S> spatial, temporal;
};

template <class S>
struct ASTStack {
  ASTBlockConfig cfg;
  std::vector<ASTLayer<S>> layers;

  template <class Rng>
  static ASTStack make(nn::ParameterSet<S>& ps, std::size_t d_model,
                       const ASTBlockConfig& cfg, Rng& rng) {
    cfg.validate(d_model);
    ASTStack st;
    st.cfg = cfg;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string base = "ast." + std::to_string(l);
      st.layers.push_back({AttentionWeights<S>::make(ps, base + ".spatial", d_model, cfg, rng),
                           AttentionWeights<S>::make(ps, base + ".temporal", d_model, cfg, rng)});
    }
    return st;
  }
};

// Runtime context: dropout RNG (null disables dropout) and layer index for
// error messages.
struct ForwardContext {
  std::mt19937_64* rng = nullptr;
  double dropout = 0.0;
  std::size_t layer = 0;
};

namespace detail {

template <class S>
void check_finite(const Var<S>& x, const char* stage, std::size_t layer) {
  if (!x.value().all_finite())
    throw NumericalError(std::string("non-finite values entering ") + stage +
                         " attention at layer " + std::to_string(layer));
}

template <class S>
Var<S> maybe_dropout(const Var<S>& x, const ForwardContext& ctx) {
  if (!ctx.rng || ctx.dropout <= 0) return x;
  return ad::dropout(x, S(ctx.dropout), *ctx.rng);
}

// x: [G, L, D]; attention runs within each group over L.
template <class S>
Var<S> sublayer(const Var<S>& x, const AttentionWeights<S>& w, std::size_t heads,
                const ForwardContext& ctx) {
  auto h = w.ln_attn(x);
  auto att = ad::attention(w.wq(h), w.wk(h), w.wv(h), heads);
  auto y = ad::add(x, maybe_dropout(w.wo(att), ctx));
  auto f = w.ff2(ad::gelu(w.ff1(w.ln_ffn(y))));
  return ad::add(y, maybe_dropout(f, ctx));
}

}  // namespace detail

// Joint state from encoded pair: [B, T, 1 + H*W, D], audio token first.
template <class S>
Var<S> build_joint(const enc::EncodedPair<S>& pair) {
  const Shape& sv = pair.v_tilde.shape();
  const Shape& sa = pair.a_tilde.shape();
  if (sv.size() != 5 || sa.size() != 3 || sa[0] != sv[0] || sa[1] != sv[1] ||
      sa[2] != sv[4])
    throw InvalidInput("build_joint: inconsistent shapes " + shape_str(sa) +
                       " and " + shape_str(sv));
  const std::size_t B = sv[0], T = sv[1], P = sv[2] * sv[3], D = sv[4];
  auto a = ad::reshape(pair.a_tilde, {B, T, 1, D});
  auto v = ad::reshape(pair.v_tilde, {B, T, P, D});
  return ad::concat(a, v, 2);
}

// [B, T, N, D] -> [B, N, T, D]
template <class S>
Var<S> spatial_attention(const Var<S>& z, const AttentionWeights<S>& w,
                         std::size_t heads, const ForwardContext& ctx = {}) {
  const Shape& s = z.shape();
  if (s.size() != 4) throw InvalidInput("spatial_attention: expected [B, T, N, D]");
  detail::check_finite(z, "spatial", ctx.layer);
  auto x = ad::reshape(z, {s[0] * s[1], s[2], s[3]});
  auto y = detail::sublayer(x, w, heads, ctx);
  return ad::swap_middle(ad::reshape(y, s));
}

// [B, N, T, D] -> [B, T, N, D]
template <class S>
Var<S> temporal_attention(const Var<S>& y, const AttentionWeights<S>& w,
                          std::size_t heads, const ForwardContext& ctx = {}) {
  const Shape& s = y.shape();
  if (s.size() != 4) throw InvalidInput("temporal_attention: expected [B, N, T, D]");
  detail::check_finite(y, "temporal", ctx.layer);
  auto x = ad::reshape(y, {s[0] * s[1], s[2], s[3]});
  auto out = detail::sublayer(x, w, heads, ctx);
  return ad::swap_middle(ad::reshape(out, s));
}

// Z^l = Temporal(Spatial(Z^{l-1})), l = 1..L.
template <class S>
Var<S> ast_forward(const Var<S>& z0, const ASTStack<S>& stack,
                   std::mt19937_64* dropout_rng = nullptr) {
  Var<S> z = z0;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    ForwardContext ctx{dropout_rng, stack.cfg.dropout, l};
    auto y = spatial_attention(z, stack.layers[l].spatial, stack.cfg.heads, ctx);
    z = temporal_attention(y, stack.layers[l].temporal, stack.cfg.heads, ctx);
  }
  return z;
}

template <class S>
struct SplitOutput {
  Var<S> audio;   // [B, T, D]
  Var<S> visual;  // [B, T, H, W, D]
};

template <class S>
SplitOutput<S> split_output(const Var<S>& z, std::size_t H, std::size_t W) {
  const Shape& s = z.shape();
  if (s.size() != 4 || s[2] != 1 + H * W)
    throw InvalidInput("split_output: state " + shape_str(s) +
                       " does not hold 1 + " + std::to_string(H) + "*" +
                       std::to_string(W) + " tokens");
  auto a = ad::reshape(ad::slice(z, 2, 0, 1), {s[0], s[1], s[3]});
  auto v = ad::reshape(ad::slice(z, 2, 1, s[2]), {s[0], s[1], H, W, s[3]});
  return {a, v};
}

}  // namespace tavlo::ast
