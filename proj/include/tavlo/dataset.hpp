#pragma once

// In-memory clip tensors for training and evaluation, built from synthetic
// suites or from manifests on disk.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tavlo/config.hpp"
#include "tavlo/formats.hpp"
#include "tavlo/media_ingest.hpp"
#include "tavlo/synthetic.hpp"
#include "tavlo/tensor_io.hpp"

namespace tavlo::data {

namespace fs = std::filesystem;

struct ClipData {
  std::string clip_id;
  Tensor<float> frames;  // [T, Hv, Wv, 3]
  Tensor<float> spec;    // [Ha, Wa]
  std::vector<std::size_t> frame_indices;
  std::optional<fmt::ClipTruth> truth;

  bool labeled() const { return truth.has_value(); }
};

using Dataset = std::vector<ClipData>;

// Audio span [start, start + clip_seconds), zero-padded past the end.
inline Waveform audio_segment(const Waveform& w, double start_seconds, double clip_seconds) {
  const auto n = static_cast<std::size_t>(std::llround(clip_seconds * w.sample_rate));
  const auto s0 = static_cast<std::size_t>(std::llround(start_seconds * w.sample_rate));
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.assign(n, 0.0);
  for (std::size_t i = 0; i < n && s0 + i < w.samples.size(); ++i)
    out.samples[i] = w.samples[s0 + i];
  return out;
}

inline Tensor<float> model_spectrogram(const Waveform& w, double start_seconds,
                                       const cfg::SpectrogramConfig& sc) {
  const auto seg = audio_segment(w, start_seconds, sc.clip_seconds);
  return compute_spectrogram(seg, sc.n_freq_bins, sc.hop_seconds).values.cast<float>();
}

inline Tensor<float> select_frames(const Tensor<float>& all,
                                   const std::vector<std::size_t>& idx,
                                   const cfg::ModelConfig& mc, const std::string& clip_id) {
  const auto& e = mc.encoder;
  if (all.rank() != 4 || all.dim(3) != 3)
    throw DataError("clip " + clip_id + ": frames must be [T, H, W, 3]");
  if (all.dim(1) != e.frame_height || all.dim(2) != e.frame_width)
    throw DataError("clip " + clip_id + ": frames are " + std::to_string(all.dim(1)) + "x" +
                    std::to_string(all.dim(2)) + ", model expects " +
                    std::to_string(e.frame_height) + "x" + std::to_string(e.frame_width));
  if (idx.size() != e.T)
    throw DataError("clip " + clip_id + ": " + std::to_string(idx.size()) +
                    " selected frames, model expects T=" + std::to_string(e.T));
  const std::size_t px = all.size() / all.dim(0);
  Tensor<float> out({e.T, all.dim(1), all.dim(2), 3});
  for (std::size_t t = 0; t < idx.size(); ++t) {
    if (idx[t] >= all.dim(0))
      throw DataError("clip " + clip_id + ": frame index " + std::to_string(idx[t]) +
                      " out of range");
    std::copy_n(all.data() + idx[t] * px, px, out.data() + t * px);
  }
  return out;
}

inline ClipData from_labeled(const synth::LabeledClip& c, const cfg::ModelConfig& mc) {
  ClipData d;
  d.clip_id = c.clip_id;
  d.frame_indices.resize(c.frames.count());
  for (std::size_t t = 0; t < d.frame_indices.size(); ++t) d.frame_indices[t] = t;
  d.frames = select_frames(c.frames.frames, d.frame_indices, mc, c.clip_id);
  d.spec = model_spectrogram(c.audio, 0.0, mc.spectrogram);
  d.truth = fmt::truth_of(c);
  return d;
}

inline Dataset from_suite(const std::vector<synth::LabeledClip>& clips,
                          const cfg::ModelConfig& mc, std::optional<synth::Split> split = {}) {
  Dataset ds;
  for (const auto& c : clips)
    if (!split || c.split == *split) ds.push_back(from_labeled(c, mc));
  return ds;
}

// ------------------------------------------------------------------ on disk

inline Waveform load_audio(const fs::path& p, int raw_sample_rate) {
  Waveform w;
  if (p.extension() == ".wav") {
    auto wav = io::read_wav(p);
    w.samples = std::move(wav.samples);
    w.sample_rate = wav.sample_rate;
  } else {
    w.samples = io::read_raw_f32(p);
    w.sample_rate = raw_sample_rate;
  }
  if (w.samples.empty()) throw DataError("empty audio: " + p.string());
  return w;
}

// <stem>.frames.t4 (u8 or f32), else numbered P5/P6 images in <stem>.frames/.
inline Tensor<float> load_frames(const fs::path& media) {
  const auto t4 = fmt::frames_path(media);
  if (fs::exists(t4)) {
    const auto f = io::load_t4(t4);
    auto t = f.as<float>();
    if (f.dtype == io::DType::kU8)
      for (auto& x : t.vec()) x /= 255.0f;
    else if (f.dtype == io::DType::kU16)
      for (auto& x : t.vec()) x /= 65535.0f;
    return t;
  }
  const auto dir = fs::path(media).replace_extension(".frames");
  if (!fs::is_directory(dir))
    throw DataError("no frames for " + media.string() + " (looked for " + t4.string() +
                    " and " + dir.string() + "/)");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ppm" || e.path().extension() == ".pgm")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("empty frame directory " + dir.string());
  Tensor<float> out;
  for (std::size_t t = 0; t < files.size(); ++t) {
    const auto img = io::read_netpbm(files[t]);
    if (t == 0) out = Tensor<float>({files.size(), img.height, img.width, 3});
    if (img.height != out.dim(1) || img.width != out.dim(2))
      throw DataError("frame size changes at " + files[t].string());
    float* dst = out.data() + t * img.height * img.width * 3;
    for (std::size_t i = 0; i < img.height * img.width; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        dst[3 * i + c] = float(img.px[i * img.channels + (img.channels == 3 ? c : 0)]) /
                         float(img.maxval);
  }
  return out;
}

inline Dataset load_manifest(const fs::path& manifest, const cfg::RunConfig& rc) {
  Dataset ds;
  for (const auto& rec : fmt::read_manifest(manifest)) {
    const auto media = fmt::resolve(manifest, rec.media_path);
    ClipData d;
    d.clip_id = rec.clip_id;
    d.frame_indices = rec.selected_frame_indices;
    d.frames = select_frames(load_frames(media), rec.selected_frame_indices, rc.model, rec.clip_id);
    d.spec = model_spectrogram(load_audio(media, rc.data.raw_sample_rate), rec.start_seconds,
                               rc.model.spectrogram);
    const auto gt = fmt::gt_path(media);
    if (fs::exists(gt)) d.truth = fmt::read_truth(gt);
    ds.push_back(std::move(d));
  }
  return ds;
}

// Writes clips/<id>.wav, .frames.t4, .gt.jsonl and one manifest per split.
inline void write_suite(const fs::path& out_dir, const std::vector<synth::LabeledClip>& clips) {
  fs::create_directories(out_dir / "clips");
  std::map<std::string, std::vector<fmt::ClipRecord>> by_split;
  for (auto s : {synth::Split::kTrain, synth::Split::kVal, synth::Split::kTest})
    by_split[synth::split_name(s)];
  for (const auto& c : clips) {
    const fs::path rel = fs::path("clips") / (c.clip_id + ".wav");
    io::write_wav_f32(out_dir / rel, c.audio.samples, c.audio.sample_rate);
    Tensor<std::uint8_t> u8(c.frames.frames.shape());
    for (std::size_t i = 0; i < u8.size(); ++i)
      u8[i] = std::uint8_t(std::lround(c.frames.frames[i] * 255.0f));
    io::save_t4(fmt::frames_path(out_dir / rel), u8);
    fmt::write_truth(fmt::gt_path(out_dir / rel), fmt::truth_of(c));
    fmt::ClipRecord r;
    r.clip_id = c.clip_id;
    r.media_path = rel.generic_string();
    r.start_seconds = 0.0;
    for (std::size_t t = 0; t < c.frames.count(); ++t) r.selected_frame_indices.push_back(t);
    by_split[synth::split_name(c.split)].push_back(std::move(r));
  }
  for (const auto& [name, recs] : by_split) fmt::write_manifest(out_dir / (name + ".jsonl"), recs);
}

}  // namespace tavlo::data
