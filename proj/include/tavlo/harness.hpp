#pragma once

// Training loop, evaluation and heatmap export.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "tavlo/config.hpp"
#include "tavlo/dataset.hpp"
#include "tavlo/evaluation.hpp"
#include "tavlo/formats.hpp"
#include "tavlo/model.hpp"
#include "tavlo/objective.hpp"
#include "tavlo/tensor_io.hpp"

namespace tavlo {

// ---------------------------------------------------------------- inference

// Per-clip localization maps on the token grid, [T, H, W] each.
template <class S>
std::vector<Tensor<double>> infer_maps(const Model<S>& model, const data::Dataset& ds,
                                       std::size_t batch = 8, Diagnostics* diag = nullptr) {
  ad::NoGradGuard ng;
  std::vector<Tensor<double>> out;
  out.reserve(ds.size());
  for (std::size_t b0 = 0; b0 < ds.size(); b0 += batch) {
    std::vector<std::size_t> ids;
    for (std::size_t i = b0; i < std::min(ds.size(), b0 + batch); ++i) ids.push_back(i);
    auto [frames, spec] = make_batch<S>(ds, ids);
    const auto y = model.forward(Var<S>(std::move(frames)), Var<S>(std::move(spec)));
    const Shape& sv = y.visual.shape();  // [B, T, H, W, D]
    const std::size_t T = sv[1], H = sv[2], W = sv[3], D = sv[4];
    for (std::size_t b = 0; b < ids.size(); ++b) {
      Tensor<S> a({T, D}), v({T, H, W, D});
      std::copy_n(y.audio.value().data() + b * T * D, T * D, a.data());
      std::copy_n(y.visual.value().data() + b * T * H * W * D, T * H * W * D, v.data());
      out.push_back(obj::localization_map(a, v, diag));
    }
  }
  return out;
}

// Ground-truth-derived maps: 1 on sounding pixels, 0 elsewhere, at frame size.
inline std::vector<Tensor<double>> oracle_maps(const data::Dataset& ds) {
  std::vector<Tensor<double>> out;
  for (const auto& c : ds) {
    if (!c.truth) throw DataError("oracle heatmaps need ground truth for clip " + c.clip_id);
    const std::size_t H = c.truth->height, W = c.truth->width;
    Tensor<double> m({c.frame_indices.size(), H, W});
    for (std::size_t t = 0; t < c.frame_indices.size(); ++t) {
      const auto gt = c.truth->frames.at(c.frame_indices[t]).sounding_mask(H * W);
      for (std::size_t i = 0; i < H * W; ++i) m[t * H * W + i] = gt[i];
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Frame-resolution map t of a clip; grid maps are bilinearly upsampled.
inline Tensor<double> frame_map(const Tensor<double>& maps, std::size_t t, std::size_t H,
                                std::size_t W) {
  const std::size_t h = maps.dim(1), w = maps.dim(2);
  Tensor<double> m({h, w});
  std::copy_n(maps.data() + t * h * w, h * w, m.data());
  if (h == H && w == W) return m;
  return obj::upsample_bilinear(m, H, W);
}

inline std::vector<eval::EvalRecord> build_records(const data::Dataset& ds,
                                                   const std::vector<Tensor<double>>& maps,
                                                   const cfg::EvalConfig& ec) {
  std::vector<eval::EvalRecord> recs;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& c = ds[k];
    if (!c.truth) continue;
    if (!c.truth->scenario.empty() && !ec.scenarios.count(c.truth->scenario)) continue;
    const std::size_t H = c.truth->height, W = c.truth->width;
    for (std::size_t t = 0; t < c.frame_indices.size(); ++t) {
      const std::size_t f = c.frame_indices[t];
      if (f >= c.truth->frames.size())
        throw DataError("clip " + c.clip_id + ": no ground truth for frame " + std::to_string(f));
      const auto& lab = c.truth->frames[f];
      eval::EvalRecord r;
      r.heatmap = frame_map(maps[k], t, H, W);
      r.gt = lab.sounding_mask(H * W);
      r.tags = lab.tags;
      r.clip_id = c.clip_id;
      r.frame_index = f;
      r.cross_event = c.truth->cross_event;
      recs.push_back(std::move(r));
    }
  }
  return recs;
}

inline eval::MetricsReport report_from_maps(const data::Dataset& ds,
                                            const std::vector<Tensor<double>>& maps,
                                            const cfg::EvalConfig& ec,
                                            Diagnostics* diag = nullptr) {
  const auto recs = build_records(ds, maps, ec);
  if (recs.empty()) throw EmptySetError("evaluate: no labeled frames");
  eval::ReportOptions ro;
  ro.grid.points = ec.auc_points;
  ro.restricted_tn_percent = ec.restricted_tn_percent;
  return eval::scenario_report(recs, ec.policy, ro, diag);
}

template <class S>
eval::MetricsReport evaluate(const Model<S>& model, const data::Dataset& ds,
                             const cfg::EvalConfig& ec, Diagnostics* diag = nullptr) {
  if (ds.empty()) throw EmptySetError("evaluate: empty manifest");
  const auto& e = model.config.encoder;
  for (const auto& c : ds)
    if (c.frames.dim(0) != e.T || c.frames.dim(1) != e.frame_height ||
        c.frames.dim(2) != e.frame_width || c.spec.dim(0) != e.n_freq_bins)
      throw InvalidConfig("evaluate: clip " + c.clip_id + " has frames " +
                          shape_str(c.frames.shape()) + " and spectrogram " +
                          shape_str(c.spec.shape()) + "; checkpoint expects T=" +
                          std::to_string(e.T) + ", " + std::to_string(e.frame_height) + "x" +
                          std::to_string(e.frame_width) + ", " + std::to_string(e.n_freq_bins) +
                          " bins");
  return report_from_maps(ds, infer_maps(model, ds, 8, diag), ec, diag);
}

// ------------------------------------------------------------------- export

// 16-bit gray levels: score s in [-1, 1] maps to (s + 1) / 2 of full scale.
inline std::vector<std::uint16_t> heatmap_gray16(const Tensor<double>& m) {
  std::vector<std::uint16_t> px(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = std::clamp(m[i], -1.0, 1.0);
    px[i] = std::uint16_t(std::lround((s + 1.0) / 2.0 * 65535.0));
  }
  return px;
}

// Frame blended with the heatmap in the red channel; sounding boxes green,
// silent boxes yellow.
inline std::vector<std::uint8_t> overlay_rgb(const Tensor<float>& frame, const Tensor<double>& m,
                                             const synth::FrameLabel& lab) {
  const std::size_t H = m.dim(0), W = m.dim(1);
  std::vector<std::uint8_t> rgb(H * W * 3);
  for (std::size_t i = 0; i < H * W; ++i) {
    const double h = (std::clamp(m[i], -1.0, 1.0) + 1.0) / 2.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double base = 0.6 * frame[3 * i + c];
      const double tint = c == 0 ? 0.4 * h : 0.0;
      rgb[3 * i + c] = std::uint8_t(std::lround(std::clamp(base + tint, 0.0, 1.0) * 255.0));
    }
  }
  for (const auto& e : lab.entities) {
    const auto [x0, y0, x1, y1] = e.box;
    if (x1 < x0 || y1 < y0) continue;
    const std::array<std::uint8_t, 3> col =
        e.is_sounding ? std::array<std::uint8_t, 3>{0, 255, 0}
                      : std::array<std::uint8_t, 3>{255, 255, 0};
    auto put = [&](int x, int y) {
      if (x < 0 || y < 0 || x >= int(W) || y >= int(H)) return;
      for (int c = 0; c < 3; ++c) rgb[3 * (std::size_t(y) * W + std::size_t(x)) + c] = col[c];
    };
    for (int x = x0; x <= x1; ++x) {
      put(x, y0);
      put(x, y1);
    }
    for (int y = y0; y <= y1; ++y) {
      put(x0, y);
      put(x1, y);
    }
  }
  return rgb;
}

// heatmaps/{clip_id}_{frame_index}.pgm and overlays/{clip_id}_{frame_index}.ppm
// for every labeled frame. Returns the number of frames written.
inline std::size_t export_heatmaps(const data::Dataset& ds,
                                   const std::vector<Tensor<double>>& maps,
                                   const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir / "heatmaps", ec);
  fs::create_directories(out_dir / "overlays", ec);
  if (!fs::is_directory(out_dir / "heatmaps") || !fs::is_directory(out_dir / "overlays"))
    throw IoError("cannot create output directories under " + out_dir.string());
  std::size_t n = 0;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const auto& c = ds[k];
    if (!c.truth) continue;
    const std::size_t H = c.truth->height, W = c.truth->width;
    for (std::size_t t = 0; t < c.frame_indices.size(); ++t) {
      const std::size_t f = c.frame_indices[t];
      const auto m = frame_map(maps[k], t, H, W);
      const std::string stem = c.clip_id + "_" + std::to_string(f);
      io::write_pgm(out_dir / "heatmaps" / (stem + ".pgm"), W, H, heatmap_gray16(m), 65535);
      Tensor<float> frame({H, W, 3});
      std::copy_n(c.frames.data() + t * H * W * 3, H * W * 3, frame.data());
      io::write_ppm(out_dir / "overlays" / (stem + ".ppm"), W, H,
                    overlay_rgb(frame, m, c.truth->frames.at(f)));
      ++n;
    }
  }
  return n;
}

// ----------------------------------------------------------------- training

struct TrainOptions {
  fs::path out_dir;  // checkpoints and diagnostics; empty writes nothing
  std::ostream* log = nullptr;
  std::size_t log_every = 10;
};

inline double learning_rate(const cfg::OptimizerConfig& o, std::size_t step, std::size_t total) {
  double lr = o.lr;
  if (o.schedule == "cosine" && total > 0) {
    const double p = double(step) / double(total);
    lr *= o.min_lr_ratio + (1.0 - o.min_lr_ratio) * 0.5 * (1.0 + std::cos(M_PI * p));
  }
  if (o.warmup_steps > 0 && step < o.warmup_steps)
    lr *= double(step + 1) / double(o.warmup_steps);
  return lr;
}

// Batches of one epoch: a seeded permutation cut into full batches (a single
// short batch when the set is smaller than B).
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t B,
                                                           std::uint64_t seed,
                                                           std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::mt19937_64 rng(synth::splitmix64(seed * 1000003ull + epoch));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  if (n == 0) return out;
  if (n < B) return {order};
  for (std::size_t b = 0; b + B <= n; b += B)
    out.emplace_back(order.begin() + std::ptrdiff_t(b), order.begin() + std::ptrdiff_t(b + B));
  return out;
}

template <class S>
TrainState<S> init_state(const cfg::RunConfig& rc) {
  rc.validate();
  TrainState<S> st;
  st.config = rc;
  st.model = Model<S>::make(rc.model, rc.optimizer.seed);
  nn::AdamOptions ao;
  ao.lr = rc.optimizer.lr;
  ao.weight_decay = rc.optimizer.weight_decay;
  ao.grad_clip = rc.optimizer.grad_clip;
  st.adam = nn::Adam<S>(st.model->params, ao);
  return st;
}

namespace detail {

inline void dump_bad_batch(const fs::path& out_dir, std::size_t step,
                           const std::vector<std::string>& ids, const std::string& what) {
  if (out_dir.empty()) return;
  nlohmann::json j = {{"step", step}, {"clip_ids", ids}, {"error", what}};
  fmt::write_jsonl(out_dir / "nonfinite_batch.jsonl", {j});
}

}  // namespace detail

template <class S>
TrainState<S> train(const cfg::RunConfig& rc, const data::Dataset& train_set,
                    const data::Dataset* val_set = nullptr, const TrainOptions& opt = {}) {
  auto st = init_state<S>(rc);
  const auto& o = rc.optimizer;
  const auto& e = st.model->config.encoder;
  for (const auto& c : train_set)
    if (c.frames.dim(0) != e.T || c.spec.dim(0) != e.n_freq_bins ||
        c.spec.dim(1) / e.T != st.model->audio.kw)
      throw InvalidConfig("train: clip " + c.clip_id + " does not match model geometry (frames " +
                          shape_str(c.frames.shape()) + ", spectrogram " +
                          shape_str(c.spec.shape()) + ")");
  if (o.epochs > 0 && train_set.empty()) throw EmptySetError("train: empty training set");

  const std::size_t per_epoch = epoch_batches(train_set.size(), o.batch_size, o.seed, 0).size();
  const std::size_t total = per_epoch * o.epochs;
  std::mt19937_64 dropout_rng(synth::splitmix64(o.seed ^ 0xd50u));
  const auto ckpt = opt.out_dir.empty() ? fs::path() : opt.out_dir / "checkpoint.tkv";
  const auto t_start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    for (const auto& ids : epoch_batches(train_set.size(), o.batch_size, o.seed, epoch)) {
      std::vector<std::string> names;
      for (auto i : ids) names.push_back(train_set[i].clip_id);
      double loss_value = 0, gnorm = 0;
      try {
        auto [frames, spec] = make_batch<S>(train_set, ids);
        st.model->params.zero_grad();
        const auto y = st.model->forward(Var<S>(std::move(frames)), Var<S>(std::move(spec)),
                                         &dropout_rng);
        const auto loss = obj::contrastive_loss(y.audio, y.visual, rc.model.loss);
        loss_value = double(loss.item());
        if (!std::isfinite(loss_value)) throw NumericalError("non-finite loss");
        ad::backward(loss);
        for (auto& [name, p] : st.model->params.entries())
          if (!p.grad().all_finite()) throw NumericalError("non-finite gradient in " + name);
      } catch (const NumericalError& err) {
        // parameters are untouched by this step, so the current state is last-good
        detail::dump_bad_batch(opt.out_dir, st.step, names, err.what());
        if (!ckpt.empty()) save_checkpoint(ckpt, st);
        std::string list;
        for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
        throw NumericalError(std::string(err.what()) + " at step " + std::to_string(st.step) +
                             " (batch: " + list + ")");
      }
      gnorm = st.adam.step(st.model->params, learning_rate(o, st.step, total));
      st.history.loss.push_back(loss_value);
      ++st.step;

      if (opt.log && (st.step % std::max<std::size_t>(1, opt.log_every) == 0 || st.step == total)) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        *opt.log << "step " << st.step << "/" << total << " epoch " << epoch << " loss "
                 << std::fixed << std::setprecision(4) << loss_value << " |g| " << gnorm
                 << " lr " << std::scientific << std::setprecision(2)
                 << learning_rate(o, st.step - 1, total) << std::fixed << " t " << std::setprecision(1)
                 << secs << "s\n"
                 << std::defaultfloat << std::flush;
      }
      if (val_set && !val_set->empty() && o.validate_every && st.step % o.validate_every == 0) {
        const auto rep = evaluate(*st.model, *val_set, rc.eval);
        const double v = rep.total ? rep.total->ciou : 0.0;
        st.history.val_ciou.emplace_back(st.step, v);
        if (opt.log) *opt.log << "  val CIoU " << v << "\n" << std::flush;
      }
      if (!ckpt.empty() && o.checkpoint_every && st.step % o.checkpoint_every == 0)
        save_checkpoint(ckpt, st);
    }
  }
  if (!ckpt.empty()) save_checkpoint(ckpt, st);
  return st;
}

}  // namespace tavlo
