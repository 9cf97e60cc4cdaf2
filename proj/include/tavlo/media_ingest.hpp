#pragma once

// Audio/frame ingestion: RMS energy, audio-driven clip and frame sampling,
// Laplacian sharpness and log-magnitude spectrograms.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tavlo/error.hpp"
#include "tavlo/tensor.hpp"

namespace tavlo {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 0;

  double duration() const {
    return sample_rate > 0 ? double(samples.size()) / sample_rate : 0.0;
  }
  void validate() const {
    if (sample_rate <= 0) throw InvalidInput("waveform sample_rate must be > 0");
    if (samples.empty()) throw InvalidInput("waveform is empty");
  }
};

// values: [n_freq_bins, n_steps] log-magnitude.
struct Spectrogram {
  Tensor<double> values;
  double frame_hop_seconds = 0.0;

  std::size_t n_freq_bins() const { return values.dim(0); }
  std::size_t n_steps() const { return values.dim(1); }
};

// frames: [T, H, W, 3], channel values in [0, 1].
struct FrameSequence {
  Tensor<float> frames;
  double fps = 0.0;
  std::vector<double> timestamps;

  std::size_t count() const { return frames.rank() ? frames.dim(0) : 0; }

  static FrameSequence uniform(Tensor<float> frames, double fps,
                               double t0 = 0.0) {
    FrameSequence fs;
    fs.fps = fps;
    fs.timestamps.resize(frames.dim(0));
    for (std::size_t i = 0; i < fs.timestamps.size(); ++i)
      fs.timestamps[i] = t0 + double(i) / fps;
    fs.frames = std::move(frames);
    return fs;
  }

  void validate() const {
    if (frames.rank() != 4 || frames.dim(3) != 3)
      throw InvalidInput("frames must be T x H x W x 3, got " +
                         shape_str(frames.shape()));
    if (frames.dim(0) == 0) throw InvalidInput("frame sequence is empty");
    if (!(fps > 0)) throw InvalidInput("fps must be > 0");
    if (timestamps.size() != frames.dim(0))
      throw InvalidInput("timestamp count does not match frame count");
    for (std::size_t i = 1; i < timestamps.size(); ++i)
      if (!(timestamps[i] > timestamps[i - 1]))
        throw InvalidInput("frame timestamps must be strictly increasing");
  }
};

struct AudioEvent {
  double peak_time = 0.0;
  double peak_rms = 0.0;
  static constexpr double kHalfWindow = 0.1;

  double window_begin() const { return peak_time - kHalfWindow; }
  double window_end() const { return peak_time + kHalfWindow; }
};

struct SamplingConfig {
  double rms_threshold = 0.01;
  double rms_interval = 1.0;
  double window_length = 10.0;
  int min_active_intervals = 5;
  int max_frames_per_clip = 5;
  double event_exclusion_radius = 0.7;

  void validate() const {
    if (!(rms_threshold > 0) || !(rms_interval > 0) || !(window_length > 0) ||
        min_active_intervals <= 0 || max_frames_per_clip <= 0 ||
        !(event_exclusion_radius > 0))
      throw InvalidConfig("media_ingest.sampling: all fields must be positive");
    if (min_active_intervals > window_length / rms_interval + 1e-9)
      throw InvalidConfig(
          "media_ingest.sampling.min_active_intervals exceeds the number of "
          "intervals per window");
  }
};

namespace detail {
inline std::size_t interval_samples(const Waveform& w, double seconds) {
  const double n = seconds * w.sample_rate;
  if (n < 1.0 - 1e-9)
    throw InvalidInput("interval shorter than one sample");
  return static_cast<std::size_t>(std::floor(n + 1e-9));
}
}  // namespace detail

// One RMS value per non-overlapping interval; a trailing partial interval
// is included.
inline std::vector<double> compute_rms(const Waveform& w, double interval_seconds) {
  w.validate();
  const std::size_t n = detail::interval_samples(w, interval_seconds);
  const std::size_t N = w.samples.size();
  std::vector<double> out;
  out.reserve((N + n - 1) / n);
  for (std::size_t b = 0; b < N; b += n) {
    const std::size_t e = std::min(N, b + n);
    double acc = 0;
    for (std::size_t i = b; i < e; ++i) acc += w.samples[i] * w.samples[i];
    out.push_back(std::sqrt(acc / double(e - b)));
  }
  return out;
}

// Start times (seconds) of every window placement with at least
// cfg.min_active_intervals intervals above the RMS threshold.
inline std::vector<double> sample_clips(const Waveform& w,
                                        const SamplingConfig& cfg,
                                        Diagnostics* diag = nullptr) {
  cfg.validate();
  w.validate();
  if (w.duration() + 1e-9 < cfg.window_length) {
    if (diag)
      diag->warn("sample_clips: waveform shorter than window (" +
                 std::to_string(w.duration()) + " s)");
    return {};
  }
  const auto rms = compute_rms(w, cfg.rms_interval);
  const auto per_window =
      static_cast<std::size_t>(std::llround(cfg.window_length / cfg.rms_interval));
  std::vector<double> starts;
  for (std::size_t k = 0; k + per_window <= rms.size(); ++k) {
    const double start = double(k) * cfg.rms_interval;
    if (start + cfg.window_length > w.duration() + 1e-9) break;
    int active = 0;
    for (std::size_t j = k; j < k + per_window; ++j)
      if (rms[j] > cfg.rms_threshold) ++active;
    if (active >= cfg.min_active_intervals) starts.push_back(start);
  }
  return starts;
}

// Strict local maxima of the interval RMS sequence above threshold; plateaus
// resolve to their earliest interval.
inline std::vector<AudioEvent> detect_audio_events(const Waveform& w,
                                                   const SamplingConfig& cfg) {
  const auto rms = compute_rms(w, cfg.rms_interval);
  const std::size_t n = detail::interval_samples(w, cfg.rms_interval);
  std::vector<AudioEvent> events;
  for (std::size_t k = 0; k < rms.size(); ++k) {
    if (!(rms[k] > cfg.rms_threshold)) continue;
    if (k > 0 && !(rms[k] > rms[k - 1])) continue;
    if (k + 1 < rms.size() && rms[k] < rms[k + 1]) continue;
    const double b = double(k * n);
    const double e = double(std::min(w.samples.size(), (k + 1) * n));
    events.push_back({0.5 * (b + e) / w.sample_rate, rms[k]});
  }
  return events;
}

// Variance of the 4-neighbour Laplacian response over the valid interior of
// the channel-mean grayscale image. Accepts [H, W] or [H, W, C].
template <class S>
double laplacian_sharpness(const Tensor<S>& frame) {
  if (frame.rank() != 2 && frame.rank() != 3)
    throw InvalidInput("laplacian_sharpness: expected a 2-D or 3-D frame");
  const std::size_t H = frame.dim(0), W = frame.dim(1);
  const std::size_t C = frame.rank() == 3 ? frame.dim(2) : 1;
  if (H < 3 || W < 3 || C == 0)
    throw InvalidInput("laplacian_sharpness: frame smaller than 3x3");
  std::vector<double> gray(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += double(frame[i * C + c]);
    gray[i] = s / double(C);
  }
  const std::size_t n = (H - 2) * (W - 2);
  std::vector<double> resp;
  resp.reserve(n);
  for (std::size_t y = 1; y + 1 < H; ++y)
    for (std::size_t x = 1; x + 1 < W; ++x)
      resp.push_back(gray[(y - 1) * W + x] + gray[(y + 1) * W + x] +
                     gray[y * W + x - 1] + gray[y * W + x + 1] -
                     4.0 * gray[y * W + x]);
  const double mean = std::accumulate(resp.begin(), resp.end(), 0.0) / double(n);
  double var = 0;
  for (double r : resp) var += (r - mean) * (r - mean);
  return var / double(n);
}

inline Tensor<float> frame_at(const FrameSequence& fs, std::size_t t) {
  const std::size_t H = fs.frames.dim(1), W = fs.frames.dim(2), C = fs.frames.dim(3);
  const std::size_t len = H * W * C;
  Tensor<float> f({H, W, C});
  std::copy_n(fs.frames.data() + t * len, len, f.data());
  return f;
}

// Frame selection with precomputed per-frame sharpness.
inline std::vector<std::size_t> sample_frames(
    const std::vector<double>& timestamps, const std::vector<double>& sharpness,
    const std::vector<AudioEvent>& events, const SamplingConfig& cfg,
    Diagnostics* diag = nullptr) {
  if (sharpness.size() != timestamps.size())
    throw InvalidInput("sample_frames: sharpness/timestamp length mismatch");
  for (std::size_t i = 1; i < events.size(); ++i)
    if (events[i].peak_time < events[i - 1].peak_time)
      throw InvalidInput("sample_frames: events must be sorted by peak_time");
  std::vector<std::size_t> order(events.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return events[a].peak_rms > events[b].peak_rms;
  });
  std::vector<double> kept_peaks;
  std::vector<std::size_t> picked;
  for (std::size_t ei : order) {
    if (picked.size() >= std::size_t(cfg.max_frames_per_clip)) break;
    const AudioEvent& ev = events[ei];
    bool excluded = false;
    for (double p : kept_peaks)
      if (std::abs(p - ev.peak_time) <= cfg.event_exclusion_radius) excluded = true;
    if (excluded) continue;
    std::optional<std::size_t> best;
    for (std::size_t f = 0; f < timestamps.size(); ++f) {
      if (timestamps[f] < ev.window_begin() || timestamps[f] > ev.window_end())
        continue;
      if (!best || sharpness[f] > sharpness[*best]) best = f;
    }
    if (!best) {
      if (diag)
        diag->warn("sample_frames: no frame inside event window at t=" +
                   std::to_string(ev.peak_time));
      continue;
    }
    kept_peaks.push_back(ev.peak_time);
    picked.push_back(*best);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

inline std::vector<std::size_t> sample_frames(const FrameSequence& fs,
                                              const std::vector<AudioEvent>& events,
                                              const SamplingConfig& cfg,
                                              Diagnostics* diag = nullptr) {
  fs.validate();
  std::vector<double> sharp(fs.count());
  for (std::size_t t = 0; t < fs.count(); ++t)
    sharp[t] = laplacian_sharpness(frame_at(fs, t));
  return sample_frames(fs.timestamps, sharp, events, cfg, diag);
}

// Log of the magnitude floor; silent input maps to this value everywhere.
inline constexpr double kSpectrogramMagnitudeFloor = 1e-5;
inline double spectrogram_log_floor() { return std::log(kSpectrogramMagnitudeFloor); }

// Short-time log-magnitude transform. Frame k starts at sample
// floor(k * hop * sr) and spans 2 * n_freq_bins samples under a periodic
// Hann window (zero-padded past the end). Bins 0 .. n_freq_bins-1 are kept;
// magnitudes are scaled so a unit-amplitude sinusoid peaks near 1.
inline Spectrogram compute_spectrogram(const Waveform& w, std::size_t n_freq_bins,
                                       double hop_seconds) {
  w.validate();
  if (n_freq_bins == 0) throw InvalidInput("spectrogram: n_freq_bins must be >= 1");
  const double hop = hop_seconds * w.sample_rate;
  if (hop < 1.0 - 1e-9) throw InvalidInput("spectrogram: hop shorter than one sample");
  const std::size_t N = w.samples.size();
  const auto steps = static_cast<std::size_t>(std::ceil(double(N) / hop - 1e-9));
  const std::size_t nfft = 2 * n_freq_bins;

  std::vector<double> window(nfft);
  double wsum = 0;
  for (std::size_t i = 0; i < nfft; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(i) / double(nfft));
    wsum += window[i];
  }
  const double norm = 2.0 / wsum;

  double* in = fftw_alloc_real(nfft);
  fftw_complex* out = fftw_alloc_complex(nfft / 2 + 1);
  fftw_plan plan = fftw_plan_dft_r2c_1d(int(nfft), in, out, FFTW_ESTIMATE);

  Spectrogram spec;
  spec.frame_hop_seconds = hop_seconds;
  spec.values = Tensor<double>({n_freq_bins, steps});
  const double floor_mag = kSpectrogramMagnitudeFloor;
  for (std::size_t k = 0; k < steps; ++k) {
    const auto start = static_cast<std::size_t>(std::floor(double(k) * hop + 1e-9));
    for (std::size_t i = 0; i < nfft; ++i)
      in[i] = start + i < N ? w.samples[start + i] * window[i] : 0.0;
    fftw_execute(plan);
    for (std::size_t b = 0; b < n_freq_bins; ++b) {
      const double mag = std::hypot(out[b][0], out[b][1]) * norm;
      spec.values[b * steps + k] = std::log(std::max(mag, floor_mag));
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(out);
  fftw_free(in);
  return spec;
}

}  // namespace tavlo
