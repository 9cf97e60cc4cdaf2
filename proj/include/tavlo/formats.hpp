#pragma once

// Line-delimited JSON formats: clip manifests, per-clip ground truth with
// run-length masks, and metric reports.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tavlo/error.hpp"
#include "tavlo/evaluation.hpp"
#include "tavlo/synthetic.hpp"

namespace tavlo::fmt {

namespace fs = std::filesystem;
using nlohmann::json;

struct ClipRecord {
  std::string clip_id;
  std::string media_path;  // relative to the manifest directory unless absolute
  double start_seconds = 0.0;
  std::vector<std::size_t> selected_frame_indices;
  std::vector<double> event_peak_times;

  bool operator==(const ClipRecord&) const = default;
};

inline json to_json(const ClipRecord& r) {
  return {{"clip_id", r.clip_id},
          {"media_path", r.media_path},
          {"start_seconds", r.start_seconds},
          {"selected_frame_indices", r.selected_frame_indices},
          {"event_peak_times", r.event_peak_times}};
}

inline std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open " + p.string());
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const fs::path& p, const std::vector<json>& rows) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write " + p.string());
  for (const auto& r : rows) os << r.dump() << '\n';
  if (!os) throw IoError("write failed: " + p.string());
}

inline ClipRecord clip_record_from_json(const json& j) {
  try {
    ClipRecord r;
    r.clip_id = j.at("clip_id").get<std::string>();
    r.media_path = j.at("media_path").get<std::string>();
    r.start_seconds = j.at("start_seconds").get<double>();
    r.selected_frame_indices = j.at("selected_frame_indices").get<std::vector<std::size_t>>();
    r.event_peak_times = j.at("event_peak_times").get<std::vector<double>>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest record: ") + e.what());
  }
}

inline void write_manifest(const fs::path& p, const std::vector<ClipRecord>& recs) {
  std::vector<json> rows;
  for (const auto& r : recs) rows.push_back(to_json(r));
  write_jsonl(p, rows);
}

inline std::vector<ClipRecord> read_manifest(const fs::path& p) {
  std::vector<ClipRecord> out;
  for (const auto& j : read_jsonl(p)) out.push_back(clip_record_from_json(j));
  return out;
}

inline fs::path resolve(const fs::path& manifest, const std::string& media_path) {
  fs::path m(media_path);
  return m.is_absolute() ? m : manifest.parent_path() / m;
}

// Sibling files of a clip's audio: <stem>.frames.t4 and <stem>.gt.jsonl.
inline fs::path frames_path(const fs::path& media) {
  return fs::path(media).replace_extension(".frames.t4");
}
inline fs::path gt_path(const fs::path& media) {
  return fs::path(media).replace_extension(".gt.jsonl");
}

// Row-major run lengths, first run counts zeros.
inline std::vector<std::size_t> rle_encode(const std::vector<std::uint8_t>& mask) {
  std::vector<std::size_t> runs;
  std::uint8_t cur = 0;
  std::size_t n = 0;
  for (auto v : mask) {
    const std::uint8_t b = v != 0;
    if (b != cur) {
      runs.push_back(n);
      cur = b;
      n = 0;
    }
    ++n;
  }
  runs.push_back(n);
  return runs;
}

inline std::vector<std::uint8_t> rle_decode(const std::vector<std::size_t>& runs,
                                            std::size_t n) {
  std::vector<std::uint8_t> m;
  m.reserve(n);
  std::uint8_t cur = 0;
  for (auto r : runs) {
    m.insert(m.end(), r, cur);
    cur ^= 1;
  }
  if (m.size() != n)
    throw DataError("mask run lengths sum to " + std::to_string(m.size()) + ", expected " +
                    std::to_string(n));
  return m;
}

struct ClipTruth {
  std::string clip_id;
  std::string scenario;
  bool cross_event = false;
  std::size_t height = 0, width = 0, n_frames = 0;
  std::vector<synth::FrameLabel> frames;

  bool operator==(const ClipTruth& o) const {
    if (clip_id != o.clip_id || scenario != o.scenario || cross_event != o.cross_event ||
        height != o.height || width != o.width || frames.size() != o.frames.size())
      return false;
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const auto& a = frames[t];
      const auto& b = o.frames[t];
      if (a.tags != b.tags || a.entities.size() != b.entities.size()) return false;
      for (std::size_t k = 0; k < a.entities.size(); ++k) {
        const auto& x = a.entities[k];
        const auto& y = b.entities[k];
        if (x.entity_id != y.entity_id || x.category != y.category || x.box != y.box ||
            x.mask != y.mask || x.is_sounding != y.is_sounding)
          return false;
      }
    }
    return true;
  }
};

inline ClipTruth truth_of(const synth::LabeledClip& c) {
  ClipTruth t;
  t.clip_id = c.clip_id;
  t.scenario = synth::scenario_name(c.scenario);
  t.cross_event = c.cross_event;
  t.height = c.frames.frames.dim(1);
  t.width = c.frames.frames.dim(2);
  t.n_frames = c.labels.size();
  t.frames = c.labels;
  return t;
}

// One header record, then one record per frame and per (frame, entity).
inline void write_truth(const fs::path& p, const ClipTruth& t) {
  std::vector<json> rows;
  rows.push_back({{"record", "clip"},
                  {"clip_id", t.clip_id},
                  {"scenario", t.scenario},
                  {"cross_event", t.cross_event},
                  {"height", t.height},
                  {"width", t.width},
                  {"n_frames", t.frames.size()}});
  for (std::size_t f = 0; f < t.frames.size(); ++f) {
    const auto tags = synth::tag_names(t.frames[f].tags);
    rows.push_back({{"record", "frame"}, {"frame_index", f}, {"tags", tags}});
    for (const auto& e : t.frames[f].entities)
      rows.push_back({{"record", "entity"},
                      {"frame_index", f},
                      {"entity_id", e.entity_id},
                      {"category", e.category},
                      {"box", e.box},
                      {"mask_rle", rle_encode(e.mask)},
                      {"is_sounding", e.is_sounding},
                      {"tags", tags}});
  }
  write_jsonl(p, rows);
}

inline ClipTruth read_truth(const fs::path& p) {
  const auto rows = read_jsonl(p);
  if (rows.empty() || rows[0].value("record", "") != "clip")
    throw DataError(p.string() + ": missing clip header record");
  ClipTruth t;
  try {
    const auto& h = rows[0];
    t.clip_id = h.at("clip_id").get<std::string>();
    t.scenario = h.value("scenario", "");
    t.cross_event = h.at("cross_event").get<bool>();
    t.height = h.at("height").get<std::size_t>();
    t.width = h.at("width").get<std::size_t>();
    t.n_frames = h.at("n_frames").get<std::size_t>();
    t.frames.resize(t.n_frames);
    for (std::size_t k = 1; k < rows.size(); ++k) {
      const auto& r = rows[k];
      const auto f = r.at("frame_index").get<std::size_t>();
      if (f >= t.n_frames) throw DataError(p.string() + ": frame_index out of range");
      auto& fl = t.frames[f];
      fl.tags = synth::tags_from_names(r.at("tags").get<std::vector<std::string>>());
      if (r.at("record") == "entity") {
        synth::EntityLabel e;
        e.entity_id = r.at("entity_id").get<int>();
        e.category = r.value("category", 0);
        e.box = r.at("box").get<std::array<int, 4>>();
        e.mask = rle_decode(r.at("mask_rle").get<std::vector<std::size_t>>(),
                            t.height * t.width);
        e.is_sounding = r.at("is_sounding").get<bool>();
        fl.entities.push_back(std::move(e));
      }
    }
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
  return t;
}

// Report: one JSON cell per line after a header line.
inline void write_report(const fs::path& jsonl, const eval::MetricsReport& rep) {
  std::vector<json> rows;
  rows.push_back({{"record", "header"}, {"policy", rep.policy}, {"auc_points", rep.auc_points}});
  for (const auto& c : rep.cells())
    rows.push_back({{"scenario", c.scenario}, {"metric", c.metric}, {"value", c.value},
                    {"count", c.count}});
  write_jsonl(jsonl, rows);
}

inline eval::MetricsReport read_report(const fs::path& jsonl) {
  eval::MetricsReport rep;
  const auto rows = read_jsonl(jsonl);
  try {
    for (const auto& r : rows) {
      if (r.contains("record")) {
        rep.policy = r.at("policy").get<std::string>();
        rep.auc_points = r.at("auc_points").get<std::size_t>();
        continue;
      }
      const auto scen = r.at("scenario").get<std::string>();
      const auto metric = r.at("metric").get<std::string>();
      const auto value = r.at("value").get<double>();
      const auto count = r.at("count").get<std::size_t>();
      auto set_ca = [&](eval::CiouAuc& c) {
        c.count = count;
        if (metric == "ciou") c.ciou = value;
        else if (metric == "auc") c.auc = value;
      };
      if (scen == "off_screen") {
        rep.offscreen_frames = count;
        (metric == "tn" ? rep.tn : rep.tn_restricted) = value;
      } else if (scen == "total") {
        if (!rep.total) rep.total.emplace();
        set_ca(*rep.total);
      } else if (scen == "cross_event") {
        if (metric.rfind("delta", 0) == 0) continue;  // derived
        if (!rep.cross_event) rep.cross_event.emplace();
        set_ca(*rep.cross_event);
      } else {
        set_ca(rep.scenarios[scen]);
      }
    }
  } catch (const json::exception& e) {
    throw DataError(jsonl.string() + ": " + e.what());
  }
  return rep;
}

}  // namespace tavlo::fmt
