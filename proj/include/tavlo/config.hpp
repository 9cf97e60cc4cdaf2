#pragma once

// Run configuration: a single JSON document with model / optimizer / data /
// eval sections. Unknown keys are rejected so typos surface as config errors.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "tavlo/ast_attention.hpp"
#include "tavlo/encoders.hpp"
#include "tavlo/evaluation.hpp"
#include "tavlo/media_ingest.hpp"
#include "tavlo/objective.hpp"
#include "tavlo/synthetic.hpp"

namespace tavlo::cfg {

using nlohmann::json;
namespace fs = std::filesystem;

struct SpectrogramConfig {
  std::size_t n_freq_bins = 128;
  double hop_seconds = 1.0 / 128.0;
  double clip_seconds = 2.0;  // audio span per clip, from start_seconds
};

struct ModelConfig {
  enc::EncoderConfig encoder;
  ast::ASTBlockConfig ast;
  SpectrogramConfig spectrogram;
  obj::LossOptions loss;

  ModelConfig() {
    encoder.downsample = 8;
    encoder.visual_channels = {32, 64, 64};
  }
};

struct OptimizerConfig {
  double lr = 5e-4;
  std::string schedule = "cosine";  // constant | cosine
  std::size_t warmup_steps = 50;
  double min_lr_ratio = 0.05;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::size_t batch_size = 8;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // steps; 0 = end of training only
  std::size_t validate_every = 0;    // steps; 0 disables
};

struct SyntheticConfig {
  std::uint64_t seed = 7;
  synth::SuiteCounts counts{{50, 50, 50, 50, 50}};  // per scenario
  synth::SuiteGeometry geometry;
};

struct DataConfig {
  std::string train_manifest, val_manifest, test_manifest;
  SyntheticConfig synthetic;
  SamplingConfig sampling;
  double event_rms_interval = 0.1;  // finer interval for peak detection
  int raw_sample_rate = 8192;       // for headerless float32 audio files
};

struct EvalConfig {
  eval::ThresholdPolicy policy;
  std::size_t auc_points = 21;
  double restricted_tn_percent = 5.0;
  std::set<std::string> scenarios = {"single", "mixed", "multi_entity", "off_screen",
                                     "cross_event"};
};

struct RunConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  DataConfig data;
  EvalConfig eval;
  fs::path base_dir;  // relative manifest paths resolve against this

  void validate() const;
  fs::path resolve(const std::string& p) const {
    fs::path q(p);
    return q.is_absolute() || base_dir.empty() ? q : base_dir / q;
  }
};

namespace detail {

inline void check_keys(const json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw InvalidConfig(section + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw InvalidConfig(section + "." + it.key() + ": unknown field");
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidConfig(section + "." + key + ": wrong type");
  }
}

[[noreturn]] inline void fail(const std::string& field, const std::string& why) {
  throw InvalidConfig(field + ": " + why);
}

}  // namespace detail

inline RunConfig parse_config(const json& root, fs::path base_dir = {}) {
  using detail::check_keys;
  using detail::read;
  RunConfig c;
  c.base_dir = std::move(base_dir);
  check_keys(root, "config", {"model", "optimizer", "data", "eval"});

  if (root.contains("model")) {
    const auto& m = root["model"];
    check_keys(m, "model",
               {"T", "frame_height", "frame_width", "downsample", "visual_channels", "d_f",
                "d_t", "audio_hidden", "learned_positional", "positional_scale", "edge_padding", "depth", "heads", "ffn_hidden",
                "dropout", "ln_eps", "output_init_gain", "spectrogram", "negative_bag",
                "direction", "temperature"});
    auto& e = c.model.encoder;
    read(m, "T", e.T, "model");
    read(m, "frame_height", e.frame_height, "model");
    read(m, "frame_width", e.frame_width, "model");
    read(m, "downsample", e.downsample, "model");
    read(m, "visual_channels", e.visual_channels, "model");
    read(m, "d_f", e.d_f, "model");
    read(m, "d_t", e.d_t, "model");
    read(m, "audio_hidden", e.audio_hidden, "model");
    read(m, "learned_positional", e.learned_positional, "model");
    read(m, "positional_scale", e.positional_scale, "model");
    read(m, "edge_padding", e.edge_padding, "model");
    auto& a = c.model.ast;
    read(m, "depth", a.depth, "model");
    read(m, "heads", a.heads, "model");
    read(m, "ffn_hidden", a.ffn_hidden, "model");
    read(m, "dropout", a.dropout, "model");
    read(m, "ln_eps", a.ln_eps, "model");
    read(m, "output_init_gain", a.output_init_gain, "model");
    if (m.contains("spectrogram")) {
      const auto& s = m["spectrogram"];
      check_keys(s, "model.spectrogram", {"n_freq_bins", "hop_seconds", "clip_seconds"});
      read(s, "n_freq_bins", c.model.spectrogram.n_freq_bins, "model.spectrogram");
      read(s, "hop_seconds", c.model.spectrogram.hop_seconds, "model.spectrogram");
      read(s, "clip_seconds", c.model.spectrogram.clip_seconds, "model.spectrogram");
    }
    // the audio encoder's input height follows the spectrogram
    e.n_freq_bins = c.model.spectrogram.n_freq_bins;
    std::string bag = "mean", dir = "total";
    read(m, "negative_bag", bag, "model");
    read(m, "direction", dir, "model");
    if (bag != "mean" && bag != "max") detail::fail("model.negative_bag", "must be mean or max");
    if (dir != "total" && dir != "a2v") detail::fail("model.direction", "must be total or a2v");
    c.model.loss.negative_bag = bag == "max" ? obj::NegativeBag::kMax : obj::NegativeBag::kMean;
    c.model.loss.direction =
        dir == "a2v" ? obj::Direction::kAudioToVisual : obj::Direction::kTotal;
    read(m, "temperature", c.model.loss.temperature, "model");
  }

  if (root.contains("optimizer")) {
    const auto& o = root["optimizer"];
    check_keys(o, "optimizer",
               {"lr", "schedule", "warmup_steps", "min_lr_ratio", "weight_decay", "grad_clip",
                "batch_size", "epochs", "seed", "checkpoint_every", "validate_every"});
    auto& p = c.optimizer;
    read(o, "lr", p.lr, "optimizer");
    read(o, "schedule", p.schedule, "optimizer");
    read(o, "warmup_steps", p.warmup_steps, "optimizer");
    read(o, "min_lr_ratio", p.min_lr_ratio, "optimizer");
    read(o, "weight_decay", p.weight_decay, "optimizer");
    read(o, "grad_clip", p.grad_clip, "optimizer");
    read(o, "batch_size", p.batch_size, "optimizer");
    read(o, "epochs", p.epochs, "optimizer");
    read(o, "seed", p.seed, "optimizer");
    read(o, "checkpoint_every", p.checkpoint_every, "optimizer");
    read(o, "validate_every", p.validate_every, "optimizer");
  }

  if (root.contains("data")) {
    const auto& d = root["data"];
    check_keys(d, "data",
               {"train_manifest", "val_manifest", "test_manifest", "synthetic", "sampling",
                "event_rms_interval", "raw_sample_rate"});
    read(d, "train_manifest", c.data.train_manifest, "data");
    read(d, "val_manifest", c.data.val_manifest, "data");
    read(d, "test_manifest", c.data.test_manifest, "data");
    read(d, "event_rms_interval", c.data.event_rms_interval, "data");
    read(d, "raw_sample_rate", c.data.raw_sample_rate, "data");
    if (d.contains("synthetic")) {
      const auto& s = d["synthetic"];
      check_keys(s, "data.synthetic",
                 {"seed", "counts", "n_frames", "height", "width", "fps", "sample_rate",
                  "min_radius", "max_radius", "max_speed", "train_fraction", "val_fraction"});
      auto& sy = c.data.synthetic;
      read(s, "seed", sy.seed, "data.synthetic");
      if (s.contains("counts")) {
        const auto& k = s["counts"];
        check_keys(k, "data.synthetic.counts",
                   {"single", "mixed", "multi_entity", "off_screen", "cross_event"});
        for (auto sc : synth::kAllScenarios) {
          const auto name = synth::scenario_name(sc);
          read(k, name.c_str(), sy.counts[sc], "data.synthetic.counts");
        }
      }
      auto& g = sy.geometry;
      read(s, "n_frames", g.n_frames, "data.synthetic");
      read(s, "height", g.height, "data.synthetic");
      read(s, "width", g.width, "data.synthetic");
      read(s, "fps", g.fps, "data.synthetic");
      read(s, "sample_rate", g.sample_rate, "data.synthetic");
      read(s, "min_radius", g.min_radius, "data.synthetic");
      read(s, "max_radius", g.max_radius, "data.synthetic");
      read(s, "max_speed", g.max_speed, "data.synthetic");
      read(s, "train_fraction", g.train_fraction, "data.synthetic");
      read(s, "val_fraction", g.val_fraction, "data.synthetic");
    }
    if (d.contains("sampling")) {
      const auto& s = d["sampling"];
      check_keys(s, "data.sampling",
                 {"rms_threshold", "rms_interval", "window_length", "min_active_intervals",
                  "max_frames_per_clip", "event_exclusion_radius"});
      auto& sc = c.data.sampling;
      read(s, "rms_threshold", sc.rms_threshold, "data.sampling");
      read(s, "rms_interval", sc.rms_interval, "data.sampling");
      read(s, "window_length", sc.window_length, "data.sampling");
      read(s, "min_active_intervals", sc.min_active_intervals, "data.sampling");
      read(s, "max_frames_per_clip", sc.max_frames_per_clip, "data.sampling");
      read(s, "event_exclusion_radius", sc.event_exclusion_radius, "data.sampling");
    }
  }

  if (root.contains("eval")) {
    const auto& e = root["eval"];
    check_keys(e, "eval",
               {"policy", "percent", "fixed_cut", "auc_points", "restricted_tn_percent",
                "scenarios"});
    std::string policy = "global_top_percent";
    read(e, "policy", policy, "eval");
    if (policy == "global_top_percent")
      c.eval.policy.kind = eval::ThresholdPolicy::Kind::kGlobalTopPercent;
    else if (policy == "frame_minmax_fixed")
      c.eval.policy.kind = eval::ThresholdPolicy::Kind::kFrameMinMaxFixed;
    else
      detail::fail("eval.policy", "must be global_top_percent or frame_minmax_fixed");
    read(e, "percent", c.eval.policy.percent, "eval");
    read(e, "fixed_cut", c.eval.policy.fixed_cut, "eval");
    read(e, "auc_points", c.eval.auc_points, "eval");
    read(e, "restricted_tn_percent", c.eval.restricted_tn_percent, "eval");
    read(e, "scenarios", c.eval.scenarios, "eval");
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw InvalidConfig("config: cannot open " + p.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw InvalidConfig("config: " + std::string(e.what()));
  }
  return parse_config(j, p.parent_path());
}

inline json to_json(const RunConfig& c) {
  const auto& e = c.model.encoder;
  const auto& a = c.model.ast;
  const auto& s = c.model.spectrogram;
  const auto& o = c.optimizer;
  const auto& sy = c.data.synthetic;
  const auto& sa = c.data.sampling;
  json counts;
  for (auto sc : synth::kAllScenarios) counts[synth::scenario_name(sc)] = sy.counts[sc];
  return {
      {"model",
       {{"T", e.T},
        {"frame_height", e.frame_height},
        {"frame_width", e.frame_width},
        {"downsample", e.downsample},
        {"visual_channels", e.visual_channels},
        {"d_f", e.d_f},
        {"d_t", e.d_t},
        {"audio_hidden", e.audio_hidden},
        {"learned_positional", e.learned_positional},
        {"positional_scale", e.positional_scale},
        {"edge_padding", e.edge_padding},
        {"depth", a.depth},
        {"heads", a.heads},
        {"ffn_hidden", a.ffn_hidden},
        {"dropout", a.dropout},
        {"ln_eps", a.ln_eps},
        {"output_init_gain", a.output_init_gain},
        {"spectrogram",
         {{"n_freq_bins", s.n_freq_bins},
          {"hop_seconds", s.hop_seconds},
          {"clip_seconds", s.clip_seconds}}},
        {"negative_bag", c.model.loss.negative_bag == obj::NegativeBag::kMax ? "max" : "mean"},
        {"direction", c.model.loss.direction == obj::Direction::kTotal ? "total" : "a2v"},
        {"temperature", c.model.loss.temperature}}},
      {"optimizer",
       {{"lr", o.lr},
        {"schedule", o.schedule},
        {"warmup_steps", o.warmup_steps},
        {"min_lr_ratio", o.min_lr_ratio},
        {"weight_decay", o.weight_decay},
        {"grad_clip", o.grad_clip},
        {"batch_size", o.batch_size},
        {"epochs", o.epochs},
        {"seed", o.seed},
        {"checkpoint_every", o.checkpoint_every},
        {"validate_every", o.validate_every}}},
      {"data",
       {{"train_manifest", c.data.train_manifest},
        {"val_manifest", c.data.val_manifest},
        {"test_manifest", c.data.test_manifest},
        {"event_rms_interval", c.data.event_rms_interval},
        {"raw_sample_rate", c.data.raw_sample_rate},
        {"synthetic",
         {{"seed", sy.seed},
          {"counts", counts},
          {"n_frames", sy.geometry.n_frames},
          {"height", sy.geometry.height},
          {"width", sy.geometry.width},
          {"fps", sy.geometry.fps},
          {"sample_rate", sy.geometry.sample_rate},
          {"min_radius", sy.geometry.min_radius},
          {"max_radius", sy.geometry.max_radius},
          {"max_speed", sy.geometry.max_speed},
          {"train_fraction", sy.geometry.train_fraction},
          {"val_fraction", sy.geometry.val_fraction}}},
        {"sampling",
         {{"rms_threshold", sa.rms_threshold},
          {"rms_interval", sa.rms_interval},
          {"window_length", sa.window_length},
          {"min_active_intervals", sa.min_active_intervals},
          {"max_frames_per_clip", sa.max_frames_per_clip},
          {"event_exclusion_radius", sa.event_exclusion_radius}}}}},
      {"eval",
       {{"policy", c.eval.policy.kind == eval::ThresholdPolicy::Kind::kGlobalTopPercent
                       ? "global_top_percent"
                       : "frame_minmax_fixed"},
        {"percent", c.eval.policy.percent},
        {"fixed_cut", c.eval.policy.fixed_cut},
        {"auc_points", c.eval.auc_points},
        {"restricted_tn_percent", c.eval.restricted_tn_percent},
        {"scenarios", c.eval.scenarios}}}};
}

// Spectrogram steps W_a for one clip of clip_seconds.
inline std::size_t spectrogram_steps(const SpectrogramConfig& s) {
  return static_cast<std::size_t>(std::ceil(s.clip_seconds / s.hop_seconds - 1e-9));
}

inline void RunConfig::validate() const {
  using detail::fail;
  const auto& e = model.encoder;
  try {
    e.validate();
  } catch (const InvalidConfig& ex) {
    fail("model", ex.what());
  }
  try {
    model.ast.validate(e.d_model());
  } catch (const InvalidConfig& ex) {
    fail("model", ex.what());
  }
  if (!(model.ast.ln_eps > 0)) fail("model.ln_eps", "must be > 0");
  if (!(model.loss.temperature > 0)) fail("model.temperature", "must be > 0");
  const auto& s = model.spectrogram;
  if (s.n_freq_bins == 0) fail("model.spectrogram.n_freq_bins", "must be >= 1");
  if (!(s.hop_seconds > 0)) fail("model.spectrogram.hop_seconds", "must be > 0");
  if (!(s.clip_seconds > 0)) fail("model.spectrogram.clip_seconds", "must be > 0");
  if (s.n_freq_bins != e.n_freq_bins)
    fail("model.spectrogram.n_freq_bins", "must equal the encoder's frequency bins");
  if (spectrogram_steps(s) < e.T)
    fail("model.spectrogram.hop_seconds",
         "clip_seconds / hop_seconds must be >= T (audio kernel width would be 0)");

  const auto& o = optimizer;
  if (!(o.lr > 0)) fail("optimizer.lr", "must be > 0");
  if (o.schedule != "constant" && o.schedule != "cosine")
    fail("optimizer.schedule", "must be constant or cosine");
  if (!(o.min_lr_ratio >= 0 && o.min_lr_ratio <= 1))
    fail("optimizer.min_lr_ratio", "must lie in [0, 1]");
  if (o.weight_decay < 0) fail("optimizer.weight_decay", "must be >= 0");
  if (o.grad_clip < 0) fail("optimizer.grad_clip", "must be >= 0");
  if (o.batch_size == 0) fail("optimizer.batch_size", "must be >= 1");

  const auto& g = data.synthetic.geometry;
  if (g.n_frames == 0) fail("data.synthetic.n_frames", "must be >= 1");
  if (g.height < 8 || g.width < 8) fail("data.synthetic.height", "frames must be at least 8x8");
  if (!(g.fps > 0)) fail("data.synthetic.fps", "must be > 0");
  if (g.sample_rate <= 0) fail("data.synthetic.sample_rate", "must be > 0");
  if (!(g.min_radius > 0) || g.max_radius < g.min_radius)
    fail("data.synthetic.min_radius", "need 0 < min_radius <= max_radius");
  if (2 * g.max_radius * (1 + 0.12) + 4 > double(std::min(g.height, g.width)))
    fail("data.synthetic.max_radius", "discs do not fit the frame");
  if (g.max_speed < 0) fail("data.synthetic.max_speed", "must be >= 0");
  if (!(g.train_fraction >= 0 && g.val_fraction >= 0 &&
        g.train_fraction + g.val_fraction <= 1))
    fail("data.synthetic.train_fraction", "split fractions must lie in [0, 1] and sum <= 1");
  try {
    data.sampling.validate();
  } catch (const InvalidConfig& ex) {
    fail("data.sampling", ex.what());
  }
  if (!(data.event_rms_interval > 0)) fail("data.event_rms_interval", "must be > 0");
  if (data.raw_sample_rate <= 0) fail("data.raw_sample_rate", "must be > 0");

  try {
    eval.policy.validate();
  } catch (const InvalidConfig& ex) {
    fail("eval", ex.what());
  }
  if (eval.auc_points < 2) fail("eval.auc_points", "must be >= 2");
  if (!(eval.restricted_tn_percent > 0 && eval.restricted_tn_percent < 100))
    fail("eval.restricted_tn_percent", "must lie in (0, 100)");
  for (const auto& s2 : eval.scenarios) {
    bool ok = false;
    for (auto sc : synth::kAllScenarios) ok |= synth::scenario_name(sc) == s2;
    if (!ok) fail("eval.scenarios", "unknown scenario '" + s2 + "'");
  }
}

}  // namespace tavlo::cfg
