#pragma once

// Time-aligned visual and audio encoders plus modality-specific positional
// encodings.
//
// Shapes carry a leading batch axis B:
//   frames        [B, T, Hv, Wv, 3]
//   spectrogram   [B, Ha, Wa]
//   visual feats  [B, T, H, W, Df]
//   audio feats   [B, T, Df]

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tavlo/autograd.hpp"
#include "tavlo/media_ingest.hpp"
#include "tavlo/nn.hpp"

namespace tavlo::enc {

using ad::Var;

struct EncoderConfig {
  std::size_t T = 16;
  std::size_t frame_height = 64, frame_width = 64;
  std::size_t downsample = 16;  // power of two; one stride-2 stage per factor of 2
  std::vector<std::size_t> visual_channels = {32, 64, 64, 64};
  std::size_t d_f = 64;
  std::size_t d_t = 32;
  std::size_t n_freq_bins = 128;
  std::size_t spec_steps = 256;  // W_a of training clips
  std::size_t audio_hidden = 128;
  bool learned_positional = false;
  double positional_scale = 1.0;  // amplitude of the sinusoidal codes
  bool edge_padding = false;      // visual convs repeat border pixels instead of zero-padding

  std::size_t grid_h() const { return frame_height / downsample; }
  std::size_t grid_w() const { return frame_width / downsample; }
  std::size_t d_model() const { return d_f + d_t; }
  std::size_t stages() const {
    std::size_t s = 0;
    for (std::size_t f = downsample; f > 1; f >>= 1) ++s;
    return s;
  }

  void validate() const {
    if (downsample == 0 || (downsample & (downsample - 1)) != 0)
      throw InvalidConfig("encoders.downsample must be a power of two");
    if (frame_height % downsample || frame_width % downsample)
      throw InvalidConfig("encoders: frame size " + std::to_string(frame_height) +
                          "x" + std::to_string(frame_width) +
                          " not divisible by downsample factor " +
                          std::to_string(downsample));
    if (visual_channels.size() != stages())
      throw InvalidConfig("encoders.visual_channels must list one width per "
                          "stride-2 stage (" + std::to_string(stages()) + ")");
    if (T == 0 || d_f == 0 || d_t == 0 || n_freq_bins == 0 || audio_hidden == 0)
      throw InvalidConfig("encoders: T, d_f, d_t, n_freq_bins, audio_hidden must be >= 1");
    if (!(positional_scale >= 0) || !std::isfinite(positional_scale))
      throw InvalidConfig("encoders.positional_scale must be finite and >= 0");
    if (spec_steps < T)
      throw InvalidConfig("encoders.spec_steps (W_a) must be >= T");
  }
};

// First audio kernel: full frequency height, width floor(W_a / T).
inline std::pair<std::size_t, std::size_t> audio_kernel_dims(std::size_t W_a,
                                                             std::size_t H_a,
                                                             std::size_t T) {
  if (T == 0) throw InvalidInput("audio_kernel_dims: T must be >= 1");
  const std::size_t kw = W_a / T;
  if (kw == 0)
    throw InvalidInput("audio_kernel_dims: spectrogram has " + std::to_string(W_a) +
                       " steps for T=" + std::to_string(T) +
                       "; use a smaller hop so W_a >= T");
  return {kw, H_a};
}

// Fixed sinusoidal codes.
template <class S>
Tensor<S> sinusoid_1d(std::size_t n, std::size_t d) {
  Tensor<S> out({n, d});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -double(2 * (i / 2)) / double(d));
      out[p * d + i] = S(i % 2 == 0 ? std::sin(p * rate) : std::cos(p * rate));
    }
  return out;
}

// [H, W, D]: first half of channels encode the row, second half the column.
template <class S>
Tensor<S> sinusoid_2d(std::size_t h, std::size_t w, std::size_t d) {
  const std::size_t dy = d / 2, dx = d - dy;
  const auto ry = sinusoid_1d<S>(h, dy);
  const auto rx = sinusoid_1d<S>(w, dx);
  Tensor<S> out({h, w, d});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t i = 0; i < dy; ++i) out[(y * w + x) * d + i] = ry[y * dy + i];
      for (std::size_t i = 0; i < dx; ++i) out[(y * w + x) * d + dy + i] = rx[x * dx + i];
    }
  return out;
}

// Pos_s is shared across time, so it is stored as [H, W, D_f].
template <class S>
struct PositionalEncodings {
  Var<S> spatial;   // [H, W, D_f]
  Var<S> temporal;  // [T, D_t]

  static PositionalEncodings fixed(std::size_t T, std::size_t H, std::size_t W,
                                   std::size_t d_f, std::size_t d_t, double scale = 1.0) {
    return {Var<S>(scaled(sinusoid_2d<S>(H, W, d_f), scale)),
            Var<S>(scaled(sinusoid_1d<S>(T, d_t), scale))};
  }
  static PositionalEncodings learned(nn::ParameterSet<S>& ps, std::size_t T,
                                     std::size_t H, std::size_t W,
                                     std::size_t d_f, std::size_t d_t, double scale = 1.0) {
    return {ps.add("pos.spatial", scaled(sinusoid_2d<S>(H, W, d_f), scale)),
            ps.add("pos.temporal", scaled(sinusoid_1d<S>(T, d_t), scale))};
  }

 private:
  static Tensor<S> scaled(Tensor<S> t, double k) {
    if (k != 1.0)
      for (auto& x : t.vec()) x = S(double(x) * k);
    return t;
  }
};

template <class S>
struct EncodedPair {
  Var<S> v_tilde;  // [B, T, H, W, D]
  Var<S> a_tilde;  // [B, T, D]
};

// v_tilde = [v + Pos_s ; Pos_t], a_tilde = [a ; Pos_t] on the feature axis.
template <class S>
EncodedPair<S> apply_positional(const Var<S>& v, const Var<S>& a,
                                const PositionalEncodings<S>& pos) {
  const Shape& sv = v.shape();
  const Shape& sa = a.shape();
  if (sv.size() != 5 || sa.size() != 3)
    throw InvalidConfig("apply_positional: expected v [B,T,H,W,Df] and a [B,T,Df]");
  const std::size_t B = sv[0], T = sv[1], H = sv[2], W = sv[3], Df = sv[4];
  const Shape& ps = pos.spatial.shape();
  const Shape& pt = pos.temporal.shape();
  if (ps != Shape{H, W, Df})
    throw InvalidConfig("apply_positional: Pos_s shape " + shape_str(ps) +
                        " must be [H, W, D_f] = " + shape_str({H, W, Df}));
  if (sa[0] != B || sa[1] != T || sa[2] != Df)
    throw InvalidConfig("apply_positional: audio features " + shape_str(sa) +
                        " do not match visual " + shape_str(sv));
  if (pt.size() != 2 || pt[0] != T)
    throw InvalidConfig("apply_positional: Pos_t must be [T, D_t]");
  const std::size_t Dt = pt[1];
  auto vs = ad::add(v, ad::broadcast_to(pos.spatial, sv));
  auto pt4 = ad::reshape(pos.temporal, {T, 1, 1, Dt});
  auto v_tilde = ad::concat(vs, ad::broadcast_to(pt4, {B, T, H, W, Dt}), 4);
  auto a_tilde = ad::concat(a, ad::broadcast_to(pos.temporal, {B, T, Dt}), 2);
  return {v_tilde, a_tilde};
}

// Per-frame CNN: stride-2 3x3 conv + ReLU stages, then a 1x1 projection to D_f.
template <class S>
struct VisualEncoder {
  std::vector<nn::Conv2d<S>> stages;
  nn::Linear<S> proj;
  std::size_t d_f = 0;

  template <class Rng>
  static VisualEncoder make(nn::ParameterSet<S>& ps, const EncoderConfig& cfg,
                            Rng& rng) {
    cfg.validate();
    VisualEncoder e;
    std::size_t cin = 3;
    for (std::size_t i = 0; i < cfg.stages(); ++i) {
      const std::size_t cout = cfg.visual_channels[i];
      e.stages.push_back(nn::Conv2d<S>::make(ps, "visual.conv" + std::to_string(i),
                                             cin, cout, {3, 3, 2, 2, 1, 1, cfg.edge_padding},
                                             rng));
      cin = cout;
    }
    e.proj = nn::Linear<S>::make(ps, "visual.proj", cin, cfg.d_f, rng);
    e.d_f = cfg.d_f;
    return e;
  }

  // frames [B, T, Hv, Wv, 3] -> [B, T, H, W, Df]; weights shared across time.
  Var<S> operator()(const Var<S>& frames) const {
    const Shape& s = frames.shape();
    if (s.size() != 5 || s[4] != 3)
      throw InvalidInput("encode_visual: expected [B, T, Hv, Wv, 3], got " + shape_str(s));
    const std::size_t f = std::size_t(1) << stages.size();
    if (s[2] % f || s[3] % f)
      throw InvalidConfig("encode_visual: frame " + std::to_string(s[2]) + "x" +
                          std::to_string(s[3]) + " not divisible by factor " +
                          std::to_string(f));
    Tensor<S> centered = frames.value();
    for (auto& x : centered.vec()) x -= S(0.5);
    auto x = ad::make_op<S>(std::move(centered), {frames}, [](ad::Node<S>& n) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
    x = ad::reshape(x, {s[0] * s[1], s[2], s[3], 3});
    for (const auto& st : stages) x = ad::relu(st(x));
    auto y = proj(x);
    const Shape& sy = y.shape();
    return ad::reshape(y, {s[0], s[1], sy[1], sy[2], d_f});
  }
};

// Rectangular-kernel audio CNN. Layer 1 spans the full frequency axis and
// floor(W_a/T) steps with stride floor(W_a/T); the remaining layers are
// pointwise so each output row sees only its own segment.
template <class S>
struct AudioEncoder {
  nn::Conv2d<S> first;  // kernel (Ha x Kw), stride Kw
  nn::Linear<S> mid, out;
  std::size_t T = 0, n_freq_bins = 0, kw = 0;

  template <class Rng>
  static AudioEncoder make(nn::ParameterSet<S>& ps, const EncoderConfig& cfg,
                           Rng& rng) {
    cfg.validate();
    AudioEncoder e;
    e.T = cfg.T;
    e.n_freq_bins = cfg.n_freq_bins;
    const auto [kw, kh] = audio_kernel_dims(cfg.spec_steps, cfg.n_freq_bins, cfg.T);
    e.kw = kw;
    e.first = nn::Conv2d<S>::make(ps, "audio.conv0", 1, cfg.audio_hidden,
                                  {kh, kw, 1, kw, 0, 0}, rng);
    e.mid = nn::Linear<S>::make(ps, "audio.fc1", cfg.audio_hidden, cfg.audio_hidden,
                                rng, std::sqrt(2.0));
    e.out = nn::Linear<S>::make(ps, "audio.fc2", cfg.audio_hidden, cfg.d_f, rng);
    return e;
  }

  // Layer-1 response [B, T, C] (pre-activation).
  Var<S> first_layer(const Var<S>& spec) const {
    const Shape& s = spec.shape();
    if (s.size() != 3)
      throw InvalidInput("encode_audio: expected [B, Ha, Wa], got " + shape_str(s));
    if (s[1] != n_freq_bins)
      throw InvalidInput("encode_audio: spectrogram has " + std::to_string(s[1]) +
                         " bins, encoder expects " + std::to_string(n_freq_bins));
    const auto [kw_now, kh] = audio_kernel_dims(s[2], s[1], T);
    (void)kh;
    if (kw_now != kw)
      throw InvalidInput("encode_audio: W_a=" + std::to_string(s[2]) +
                         " gives kernel width " + std::to_string(kw_now) +
                         " but the encoder was built for " + std::to_string(kw));
    const S floor = S(spectrogram_log_floor());
    Tensor<S> norm = spec.value();
    for (auto& x : norm.vec()) x = (x - floor) / (-floor);
    auto x = ad::make_op<S>(std::move(norm), {spec}, [floor](ad::Node<S>& n) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / (-floor);
    });
    // discard trailing columns beyond T * Kw
    if (s[2] != T * kw) x = ad::slice(x, 2, 0, T * kw);
    x = ad::reshape(x, {s[0], s[1], T * kw, 1});
    auto y = first(x);  // [B, 1, T, C]
    return ad::reshape(y, {s[0], T, y.shape()[3]});
  }

  Var<S> operator()(const Var<S>& spec) const {
    auto h = ad::relu(first_layer(spec));
    h = ad::relu(mid(h));
    return out(h);
  }
};

}  // namespace tavlo::enc
