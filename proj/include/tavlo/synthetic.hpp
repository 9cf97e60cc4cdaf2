#pragma once

// Synthetic audio-visual scenes with exact ground truth.
//
// Each entity is a filled disc of a category colour that emits its
// category tone while active. Sounding discs pulse in radius on alternate
// frames; silent discs keep a constant radius. Off-screen sources emit a
// tone whose category is not visible.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tavlo/error.hpp"
#include "tavlo/media_ingest.hpp"
#include "tavlo/tensor.hpp"

namespace tavlo::synth {

enum class Scenario { kSingle, kMixed, kMultiEntity, kOffScreen, kCrossEvent };
inline constexpr std::array<Scenario, 5> kAllScenarios = {
    Scenario::kSingle, Scenario::kMixed, Scenario::kMultiEntity,
    Scenario::kOffScreen, Scenario::kCrossEvent};

inline std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::kSingle: return "single";
    case Scenario::kMixed: return "mixed";
    case Scenario::kMultiEntity: return "multi_entity";
    case Scenario::kOffScreen: return "off_screen";
    case Scenario::kCrossEvent: return "cross_event";
  }
  return "?";
}
inline Scenario scenario_from_name(const std::string& n) {
  for (auto s : kAllScenarios)
    if (scenario_name(s) == n) return s;
  throw InvalidConfig("unknown scenario '" + n + "'");
}

// Per-frame scenario tags (bit set).
enum Tag : unsigned {
  kTagSingle = 1u,
  kTagMixed = 2u,
  kTagMultiEntity = 4u,
  kTagOffScreen = 8u,
};
using TagSet = unsigned;
inline constexpr std::array<std::pair<Tag, const char*>, 4> kTagNames = {{
    {kTagSingle, "single"},
    {kTagMixed, "mixed"},
    {kTagMultiEntity, "multi_entity"},
    {kTagOffScreen, "off_screen"},
}};

inline std::vector<std::string> tag_names(TagSet t) {
  std::vector<std::string> out;
  for (auto [bit, name] : kTagNames)
    if (t & bit) out.emplace_back(name);
  return out;
}
inline TagSet tags_from_names(const std::vector<std::string>& names) {
  TagSet t = 0;
  for (const auto& n : names) {
    bool found = false;
    for (auto [bit, name] : kTagNames)
      if (n == name) {
        t |= bit;
        found = true;
      }
    if (!found) throw DataError("unknown scenario tag '" + n + "'");
  }
  return t;
}

// Scenario tags as a function of what is visible and audible in one frame.
inline TagSet derive_tags(int visible_sounding, int silent_same_look,
                          bool offscreen_active) {
  TagSet t = 0;
  if (visible_sounding == 1 && silent_same_look == 0) t |= kTagSingle;
  if (visible_sounding >= 2) t |= kTagMixed;
  if (visible_sounding >= 1 && silent_same_look >= 1) t |= kTagMultiEntity;
  if (visible_sounding == 0 && offscreen_active) t |= kTagOffScreen;
  return t;
}

struct Category {
  std::array<float, 3> color;
  double tone_hz;
};

inline const std::vector<Category>& categories() {
  static const std::vector<Category> cats = {
      {{0.90f, 0.15f, 0.15f}, 320.0},  {{0.15f, 0.80f, 0.20f}, 560.0},
      {{0.20f, 0.30f, 0.95f}, 880.0},  {{0.95f, 0.85f, 0.10f}, 1200.0},
      {{0.85f, 0.20f, 0.85f}, 1600.0}, {{0.10f, 0.85f, 0.85f}, 2000.0},
      {{1.00f, 0.55f, 0.10f}, 2480.0}, {{0.97f, 0.97f, 0.97f}, 3000.0},
  };
  return cats;
}

using Span = std::pair<int, int>;  // [begin, end) frames

struct EntityTrack {
  int entity_id = 0;
  int category = 0;
  std::vector<std::array<double, 2>> centers;  // (x, y) per frame
  double radius = 10.0;
  double tone_hz = 0.0;
  std::vector<Span> active;
};

struct SceneSpec {
  std::string clip_id;
  Scenario scenario = Scenario::kSingle;
  std::vector<EntityTrack> entities;
  std::vector<Span> offscreen_schedule;
  int offscreen_category = -1;
  double offscreen_tone_hz = 0.0;
  std::size_t n_frames = 16;
  std::size_t height = 64, width = 64;
  double fps = 8.0;
  int sample_rate = 8192;
  double tone_amplitude = 0.3;
  double noise_amplitude = 0.003;
  double pulse = 0.12;  // relative radius swing of sounding discs
  std::uint64_t seed = 0;

  void validate() const;
};

inline bool span_covers(const std::vector<Span>& spans, int frame) {
  for (auto [b, e] : spans)
    if (frame >= b && frame < e) return true;
  return false;
}

inline void SceneSpec::validate() const {
  if (n_frames == 0 || height < 3 || width < 3 || !(fps > 0) || sample_rate <= 0)
    throw InvalidInput("scene: invalid geometry");
  std::set<double> tones;
  for (const auto& e : entities) {
    if (e.centers.size() != n_frames)
      throw InvalidInput("scene: track length differs from duration");
    for (auto [b, s] : e.active)
      if (b < 0 || s > int(n_frames) || b >= s)
        throw InvalidInput("scene: active span outside [0, T)");
    for (const auto& c : e.centers)
      if (c[0] + e.radius < 0 || c[0] - e.radius >= double(width) ||
          c[1] + e.radius < 0 || c[1] - e.radius >= double(height))
        throw InvalidInput("scene: entity leaves the frame");
    if (!tones.insert(e.tone_hz).second)
      throw InvalidInput("scene: entities must have distinct tone frequencies");
  }
  for (auto [b, s] : offscreen_schedule)
    if (b < 0 || s > int(n_frames) || b >= s)
      throw InvalidInput("scene: off-screen span outside [0, T)");
}

struct EntityLabel {
  int entity_id = 0;
  int category = 0;
  std::array<int, 4> box{0, 0, -1, -1};  // x0, y0, x1, y1 inclusive
  std::vector<std::uint8_t> mask;        // H*W
  bool is_sounding = false;
};

struct FrameLabel {
  std::vector<EntityLabel> entities;
  TagSet tags = 0;

  // Union of sounding entity masks.
  std::vector<std::uint8_t> sounding_mask(std::size_t npx) const {
    std::vector<std::uint8_t> m(npx, 0);
    for (const auto& e : entities)
      if (e.is_sounding)
        for (std::size_t i = 0; i < npx; ++i) m[i] |= e.mask[i];
    return m;
  }
};

enum class Split { kTrain, kVal, kTest };
inline std::string split_name(Split s) {
  return s == Split::kTrain ? "train" : s == Split::kVal ? "val" : "test";
}

struct LabeledClip {
  std::string clip_id;
  Scenario scenario = Scenario::kSingle;
  Split split = Split::kTrain;
  FrameSequence frames;
  Waveform audio;
  std::vector<FrameLabel> labels;
  bool cross_event = false;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline double disc_radius_at(const SceneSpec& spec, const EntityTrack& e, int t) {
  if (!span_covers(e.active, t)) return e.radius;
  return e.radius * (1.0 + ((t % 2) ? spec.pulse : -spec.pulse));
}

// Category-set change across frames, counting visible and off-screen sources.
inline bool is_cross_event(const SceneSpec& spec) {
  std::set<int> first;
  bool have_first = false;
  for (int t = 0; t < int(spec.n_frames); ++t) {
    std::set<int> cur;
    for (const auto& e : spec.entities)
      if (span_covers(e.active, t)) cur.insert(e.category);
    if (span_covers(spec.offscreen_schedule, t)) cur.insert(spec.offscreen_category);
    if (!have_first) {
      first = cur;
      have_first = true;
    } else if (cur != first) {
      return true;
    }
  }
  return false;
}

inline TagSet frame_tags(const SceneSpec& spec, int t) {
  int sounding = 0, same_look = 0;
  std::set<int> sounding_cats;
  for (const auto& e : spec.entities)
    if (span_covers(e.active, t)) {
      ++sounding;
      sounding_cats.insert(e.category);
    }
  for (const auto& e : spec.entities)
    if (!span_covers(e.active, t) && sounding_cats.count(e.category)) ++same_look;
  return derive_tags(sounding, same_look, span_covers(spec.offscreen_schedule, t));
}

inline LabeledClip render_scene(const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t T = spec.n_frames, H = spec.height, W = spec.width;

  LabeledClip clip;
  clip.clip_id = spec.clip_id;
  clip.scenario = spec.scenario;
  clip.cross_event = is_cross_event(spec);

  // textured background: per-clip gray level, oriented stripes, pixel noise
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double base = 0.35 + 0.2 * u01(rng);
  const double angle = M_PI * u01(rng);
  const double freq = 0.15 + 0.25 * u01(rng);
  const double phase = 2 * M_PI * u01(rng);
  std::vector<double> background(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      background[y * W + x] =
          base + 0.05 * std::sin(freq * (std::cos(angle) * x + std::sin(angle) * y) + phase);

  Tensor<float> frames({T, H, W, 3});
  std::uniform_real_distribution<double> noise(-0.03, 0.03);
  auto quantize = [](double v) {
    return float(std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0);
  };
  clip.labels.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> px(H * W * 3);
    for (std::size_t i = 0; i < H * W; ++i) {
      const double v = background[i] + noise(rng);
      px[3 * i] = px[3 * i + 1] = px[3 * i + 2] = v;
    }
    for (const auto& e : spec.entities) {
      EntityLabel lab;
      lab.entity_id = e.entity_id;
      lab.category = e.category;
      lab.is_sounding = span_covers(e.active, int(t));
      lab.mask.assign(H * W, 0);
      const double r = disc_radius_at(spec, e, int(t));
      const auto [cx, cy] = e.centers[t];
      const auto& col = categories()[e.category].color;
      int x0 = int(W), y0 = int(H), x1 = -1, y1 = -1;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dx = double(x) - cx, dy = double(y) - cy;
          if (dx * dx + dy * dy > r * r) continue;
          lab.mask[y * W + x] = 1;
          for (int c = 0; c < 3; ++c) px[3 * (y * W + x) + c] = col[c];
          x0 = std::min(x0, int(x));
          y0 = std::min(y0, int(y));
          x1 = std::max(x1, int(x));
          y1 = std::max(y1, int(y));
        }
      lab.box = {x0, y0, x1, y1};
      clip.labels[t].entities.push_back(std::move(lab));
    }
    clip.labels[t].tags = frame_tags(spec, int(t));
    float* dst = frames.data() + t * H * W * 3;
    for (std::size_t i = 0; i < H * W * 3; ++i) dst[i] = quantize(px[i]);
  }
  clip.frames = FrameSequence::uniform(std::move(frames), spec.fps);

  // audio: sum of active tones with short ramps, plus low-level noise
  const auto n_samples = static_cast<std::size_t>(
      std::llround(double(T) / spec.fps * spec.sample_rate));
  std::vector<double> wave(n_samples, 0.0);
  const double ramp = 0.005 * spec.sample_rate;
  auto add_tone = [&](double hz, const std::vector<Span>& spans, double ph) {
    for (auto [b, e] : spans) {
      const auto s0 = std::size_t(std::llround(b / spec.fps * spec.sample_rate));
      const auto s1 = std::min(n_samples,
                               std::size_t(std::llround(e / spec.fps * spec.sample_rate)));
      for (std::size_t i = s0; i < s1; ++i) {
        const double env = std::min({1.0, double(i - s0 + 1) / ramp, double(s1 - i) / ramp});
        wave[i] += spec.tone_amplitude * env *
                   std::sin(2 * M_PI * hz * double(i) / spec.sample_rate + ph);
      }
    }
  };
  for (const auto& e : spec.entities) add_tone(e.tone_hz, e.active, 2 * M_PI * u01(rng));
  if (spec.offscreen_category >= 0)
    add_tone(spec.offscreen_tone_hz, spec.offscreen_schedule, 2 * M_PI * u01(rng));
  std::normal_distribution<double> gauss(0.0, spec.noise_amplitude);
  for (auto& s : wave) s = double(float(s + gauss(rng)));
  clip.audio.samples = std::move(wave);
  clip.audio.sample_rate = spec.sample_rate;
  return clip;
}

struct SuiteCounts {
  std::array<std::size_t, 5> per_scenario{};  // indexed like kAllScenarios

  std::size_t& operator[](Scenario s) { return per_scenario[std::size_t(s)]; }
  std::size_t operator[](Scenario s) const { return per_scenario[std::size_t(s)]; }
  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : per_scenario) n += c;
    return n;
  }
};

struct SuiteGeometry {
  std::size_t n_frames = 16;
  std::size_t height = 64, width = 64;
  double fps = 8.0;
  int sample_rate = 8192;
  double min_radius = 8.0, max_radius = 11.0;
  double max_speed = 1.5;  // pixels per frame
  double train_fraction = 0.8, val_fraction = 0.1;
};

namespace detail {

inline std::vector<std::array<double, 2>> linear_track(std::mt19937_64& rng,
                                                       const SuiteGeometry& g,
                                                       double radius) {
  std::uniform_real_distribution<double> ux(radius, double(g.width) - 1 - radius);
  std::uniform_real_distribution<double> uy(radius, double(g.height) - 1 - radius);
  std::uniform_real_distribution<double> uv(-g.max_speed, g.max_speed);
  const double x0 = ux(rng), y0 = uy(rng);
  double vx = uv(rng), vy = uv(rng);
  std::vector<std::array<double, 2>> c(g.n_frames);
  double x = x0, y = y0;
  for (std::size_t t = 0; t < g.n_frames; ++t) {
    c[t] = {x, y};
    // bounce off the borders so the disc stays fully visible
    if (x + vx < radius || x + vx > double(g.width) - 1 - radius) vx = -vx;
    if (y + vy < radius || y + vy > double(g.height) - 1 - radius) vy = -vy;
    x += vx;
    y += vy;
  }
  return c;
}

inline bool separated(const std::vector<EntityTrack>& placed,
                      const std::vector<std::array<double, 2>>& c, double r,
                      double pulse) {
  for (const auto& e : placed)
    for (std::size_t t = 0; t < c.size(); ++t) {
      const double dx = e.centers[t][0] - c[t][0], dy = e.centers[t][1] - c[t][1];
      const double need = (e.radius + r) * (1 + pulse) + 2.0;
      if (dx * dx + dy * dy < need * need) return false;
    }
  return true;
}

}  // namespace detail

// Random scene of a scenario kind. Entity categories are drawn without
// replacement except for multi-entity look-alikes.
inline SceneSpec random_scene(Scenario sc, std::uint64_t seed,
                              const SuiteGeometry& g, std::string clip_id) {
  std::mt19937_64 rng(seed);
  SceneSpec s;
  s.clip_id = std::move(clip_id);
  s.scenario = sc;
  s.n_frames = g.n_frames;
  s.height = g.height;
  s.width = g.width;
  s.fps = g.fps;
  s.sample_rate = g.sample_rate;
  s.seed = splitmix64(seed ^ 0x5eedull);

  std::vector<int> cats(categories().size());
  for (std::size_t i = 0; i < cats.size(); ++i) cats[i] = int(i);
  std::shuffle(cats.begin(), cats.end(), rng);
  std::uniform_real_distribution<double> ur(g.min_radius, g.max_radius);
  const int T = int(g.n_frames);

  auto place = [&](int category, double tone, std::vector<Span> active) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double r = ur(rng);
      auto track = detail::linear_track(rng, g, r);
      if (!detail::separated(s.entities, track, r, s.pulse)) continue;
      EntityTrack e;
      e.entity_id = int(s.entities.size());
      e.category = category;
      e.centers = std::move(track);
      e.radius = r;
      e.tone_hz = tone;
      e.active = std::move(active);
      s.entities.push_back(std::move(e));
      return;
    }
    throw DataError("synthetic: could not place non-overlapping entities");
  };
  auto tone = [](int c) { return categories()[c].tone_hz; };

  switch (sc) {
    case Scenario::kSingle:
      place(cats[0], tone(cats[0]), {{0, T}});
      break;
    case Scenario::kMixed:
      place(cats[0], tone(cats[0]), {{0, T}});
      place(cats[1], tone(cats[1]), {{0, T}});
      break;
    case Scenario::kMultiEntity:
      // look-alikes share colour and radius range; tones differ slightly
      place(cats[0], tone(cats[0]), {{0, T}});
      place(cats[0], tone(cats[0]) + 48.0, {});
      break;
    case Scenario::kOffScreen:
      place(cats[0], tone(cats[0]), {});
      s.offscreen_category = cats[1];
      s.offscreen_tone_hz = tone(cats[1]);
      s.offscreen_schedule = {{0, T}};
      break;
    case Scenario::kCrossEvent: {
      std::uniform_int_distribution<int> cut(T / 4, T - T / 4);
      const int m = cut(rng);
      place(cats[0], tone(cats[0]), {{0, m}});
      place(cats[1], tone(cats[1]), {{m, T}});
      break;
    }
  }
  return s;
}

// Clips per scenario; each clip gets a seed-derived split.
inline std::vector<LabeledClip> make_suite(std::uint64_t seed,
                                           const SuiteCounts& counts,
                                           const SuiteGeometry& g = {}) {
  std::vector<LabeledClip> out;
  out.reserve(counts.total());
  for (Scenario sc : kAllScenarios)
    for (std::size_t i = 0; i < counts[sc]; ++i) {
      const std::uint64_t clip_seed =
          splitmix64(seed * 0x100000001b3ull + std::uint64_t(sc) * 1000003ull + i);
      const std::string id = scenario_name(sc) + "_" + std::to_string(seed) + "_" +
                             std::to_string(i);
      LabeledClip c = render_scene(random_scene(sc, clip_seed, g, id));
      const double u = double(splitmix64(clip_seed ^ 0x51u) >> 11) * 0x1.0p-53;
      c.split = u < g.train_fraction                      ? Split::kTrain
                : u < g.train_fraction + g.val_fraction ? Split::kVal
                                                        : Split::kTest;
      out.push_back(std::move(c));
    }
  return out;
}

}  // namespace tavlo::synth
