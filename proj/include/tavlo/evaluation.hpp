#pragma once

// Frame-level localization metrics: CIoU, AUC, off-screen pixel TN and the
// scenario / cross-event report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tavlo/error.hpp"
#include "tavlo/synthetic.hpp"
#include "tavlo/tensor.hpp"

namespace tavlo::eval {

using synth::TagSet;
using Mask = std::vector<std::uint8_t>;

struct EvalRecord {
  Tensor<double> heatmap;  // [Hv, Wv]
  Mask gt;                 // Hv*Wv, union of sounding regions; may be empty-valued
  TagSet tags = 0;
  std::string clip_id;
  std::size_t frame_index = 0;
  bool cross_event = false;

  bool has_gt() const {
    return std::any_of(gt.begin(), gt.end(), [](std::uint8_t v) { return v != 0; });
  }
};

struct ThresholdPolicy {
  enum class Kind { kGlobalTopPercent, kFrameMinMaxFixed };
  Kind kind = Kind::kGlobalTopPercent;
  double percent = 10.0;
  double fixed_cut = 0.5;

  void validate() const {
    if (kind == Kind::kGlobalTopPercent && !(percent > 0 && percent < 100))
      throw InvalidConfig("eval.policy.percent must lie in (0, 100)");
  }
  std::string describe() const {
    std::ostringstream os;
    if (kind == Kind::kGlobalTopPercent) os << "global_top_percent(" << percent << ")";
    else os << "frame_minmax_fixed(" << fixed_cut << ")";
    return os.str();
  }
};

// Nearest-rank value at quantile q of `values` (no interpolation): the
// element at sorted position ceil(q * N) - 1.
inline double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw EmptySetError("percentile of an empty set");
  const auto n = values.size();
  auto k = static_cast<std::size_t>(std::ceil(q * double(n) - 1e-12));
  k = std::clamp<std::size_t>(k, 1, n) - 1;
  std::nth_element(values.begin(), values.begin() + std::ptrdiff_t(k), values.end());
  return values[k];
}

// Pooled cut: pixels strictly above it are positive.
inline double global_cut(const std::vector<const EvalRecord*>& records, double percent) {
  std::vector<double> pool;
  for (const auto* r : records) pool.insert(pool.end(), r->heatmap.vec().begin(), r->heatmap.vec().end());
  if (pool.empty()) throw EmptySetError("binarize: no heatmap pixels");
  return nearest_rank(std::move(pool), 1.0 - percent / 100.0);
}

inline std::vector<const EvalRecord*> pointers(const std::vector<EvalRecord>& records) {
  std::vector<const EvalRecord*> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(&r);
  return out;
}

inline Mask binarize_frame(const Tensor<double>& heatmap, const ThresholdPolicy& policy,
                           double cut, Diagnostics* diag = nullptr) {
  Mask m(heatmap.size(), 0);
  if (policy.kind == ThresholdPolicy::Kind::kGlobalTopPercent) {
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = heatmap[i] > cut;
    return m;
  }
  const auto [lo, hi] = std::minmax_element(heatmap.vec().begin(), heatmap.vec().end());
  if (*hi == *lo) {
    if (diag) diag->warn("binarize: constant heatmap under min-max normalization");
    return m;
  }
  for (std::size_t i = 0; i < m.size(); ++i)
    m[i] = (heatmap[i] - *lo) / (*hi - *lo) > policy.fixed_cut;
  return m;
}

struct Binarized {
  std::vector<Mask> masks;
  double cut = 0.0;  // global cut (global policy only)
};

inline Binarized binarize(const std::vector<const EvalRecord*>& records,
                          const ThresholdPolicy& policy, Diagnostics* diag = nullptr) {
  policy.validate();
  Binarized out;
  if (policy.kind == ThresholdPolicy::Kind::kGlobalTopPercent) {
    if (records.empty()) throw EmptySetError("binarize: no records");
    out.cut = global_cut(records, policy.percent);
  }
  for (const auto* r : records) out.masks.push_back(binarize_frame(r->heatmap, policy, out.cut, diag));
  return out;
}

inline Binarized binarize(const std::vector<EvalRecord>& records, const ThresholdPolicy& policy,
                          Diagnostics* diag = nullptr) {
  return binarize(pointers(records), policy, diag);
}

inline double frame_iou(const Mask& pred, const Mask& gt) {
  if (pred.size() != gt.size()) throw InvalidInput("frame_iou: mask shape mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) throw InvalidInput("frame_iou: both masks empty");
  return double(inter) / double(uni);
}

struct AucGrid {
  std::size_t points = 21;  // thresholds k / (points - 1), both ends included
  double at(std::size_t k) const { return double(k) / double(points - 1); }
};

struct CiouAuc {
  double ciou = 0.0;  // percent
  double auc = 0.0;   // percent
  std::size_t count = 0;
};

inline CiouAuc ciou_auc_from_ious(const std::vector<double>& ious, AucGrid grid = {}) {
  if (ious.empty()) throw EmptySetError("ciou_auc: no frames with ground truth");
  if (grid.points < 2) throw InvalidConfig("eval.auc_points must be >= 2");
  CiouAuc r;
  r.count = ious.size();
  std::size_t hit = 0;
  for (double v : ious) hit += v >= 0.5;
  r.ciou = 100.0 * double(hit) / double(ious.size());
  double acc = 0;
  for (std::size_t k = 0; k < grid.points; ++k) {
    const double tau = grid.at(k);
    std::size_t s = 0;
    for (double v : ious) s += v >= tau;
    acc += double(s) / double(ious.size());
  }
  r.auc = 100.0 * acc / double(grid.points);
  return r;
}

// CIoU/AUC over gt-bearing records; the threshold is pooled over `records`.
inline CiouAuc ciou_auc(const std::vector<EvalRecord>& records, const ThresholdPolicy& policy,
                        AucGrid grid = {}, Diagnostics* diag = nullptr) {
  const auto bin = binarize(records, policy, diag);
  std::vector<double> ious;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].has_gt()) ious.push_back(frame_iou(bin.masks[i], records[i].gt));
  return ciou_auc_from_ious(ious, grid);
}

inline bool is_offscreen(const EvalRecord& r) {
  return (r.tags & synth::kTagOffScreen) && !r.has_gt();
}

// Percentage of off-screen pixels predicted negative.
inline double tn_percent(const std::vector<const EvalRecord*>& records,
                         const std::vector<Mask>& masks) {
  std::size_t neg = 0, total = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!is_offscreen(*records[i])) continue;
    for (auto m : masks[i]) neg += m == 0;
    total += masks[i].size();
  }
  if (total == 0) throw EmptySetError("offscreen_tn: no off-screen frames");
  return 100.0 * double(neg) / double(total);
}

inline double offscreen_tn(const std::vector<EvalRecord>& records, const ThresholdPolicy& policy,
                           Diagnostics* diag = nullptr) {
  const auto ptrs = pointers(records);
  const auto bin = binarize(ptrs, policy, diag);
  return tn_percent(ptrs, bin.masks);
}

// Variant restricted to clips that contain off-screen frames, with its own
// pooled threshold at `percent`.
inline double offscreen_tn_restricted(const std::vector<EvalRecord>& records,
                                      double percent = 5.0, Diagnostics* diag = nullptr) {
  std::set<std::string> clips;
  for (const auto& r : records)
    if (is_offscreen(r)) clips.insert(r.clip_id);
  if (clips.empty()) throw EmptySetError("offscreen_tn: no off-screen frames");
  std::vector<const EvalRecord*> subset;
  for (const auto& r : records)
    if (clips.count(r.clip_id)) subset.push_back(&r);
  ThresholdPolicy pol;
  pol.percent = percent;
  const auto bin = binarize(subset, pol, diag);
  return tn_percent(subset, bin.masks);
}

struct ReportCell {
  std::string scenario;
  std::string metric;
  double value = 0.0;
  std::size_t count = 0;

  bool operator==(const ReportCell&) const = default;
};

struct MetricsReport {
  std::string policy;
  std::size_t auc_points = 21;
  std::map<std::string, CiouAuc> scenarios;  // single / mixed / multi_entity
  std::optional<double> tn, tn_restricted;
  std::size_t offscreen_frames = 0;
  std::optional<CiouAuc> total, cross_event;

  std::optional<double> delta_ciou() const {
    if (!total || !cross_event) return std::nullopt;
    return cross_event->ciou - total->ciou;
  }
  std::optional<double> delta_auc() const {
    if (!total || !cross_event) return std::nullopt;
    return cross_event->auc - total->auc;
  }

  std::vector<ReportCell> cells() const {
    std::vector<ReportCell> out;
    for (const auto& [name, c] : scenarios) {
      out.push_back({name, "ciou", c.ciou, c.count});
      out.push_back({name, "auc", c.auc, c.count});
    }
    if (tn) out.push_back({"off_screen", "tn", *tn, offscreen_frames});
    if (tn_restricted) out.push_back({"off_screen", "tn_restricted", *tn_restricted, offscreen_frames});
    if (total) {
      out.push_back({"total", "ciou", total->ciou, total->count});
      out.push_back({"total", "auc", total->auc, total->count});
    }
    if (cross_event) {
      out.push_back({"cross_event", "ciou", cross_event->ciou, cross_event->count});
      out.push_back({"cross_event", "auc", cross_event->auc, cross_event->count});
      out.push_back({"cross_event", "delta_ciou", *delta_ciou(), cross_event->count});
      out.push_back({"cross_event", "delta_auc", *delta_auc(), cross_event->count});
    }
    return out;
  }

  const ReportCell* find(const std::vector<ReportCell>& cs, const std::string& scen,
                         const std::string& metric) const {
    for (const auto& c : cs)
      if (c.scenario == scen && c.metric == metric) return &c;
    return nullptr;
  }

  void print_table(std::ostream& os) const {
    os << "policy: " << policy << "   auc grid: " << auc_points << " points\n";
    os << std::left << std::setw(14) << "scenario" << std::right << std::setw(10) << "CIoU%"
       << std::setw(10) << "AUC%" << std::setw(10) << "TN%" << std::setw(10) << "+TN%"
       << std::setw(10) << "delta" << std::setw(8) << "n" << '\n';
    auto num = [&](std::optional<double> v) {
      std::ostringstream s;
      if (v) s << std::fixed << std::setprecision(2) << *v;
      else s << "-";
      return s.str();
    };
    auto row = [&](const std::string& name, std::optional<CiouAuc> c, std::optional<double> tn_,
                   std::optional<double> tnr, std::optional<double> delta, std::size_t n) {
      os << std::left << std::setw(14) << name << std::right << std::setw(10)
         << num(c ? std::optional<double>(c->ciou) : std::nullopt) << std::setw(10)
         << num(c ? std::optional<double>(c->auc) : std::nullopt) << std::setw(10) << num(tn_)
         << std::setw(10) << num(tnr) << std::setw(10) << num(delta) << std::setw(8) << n
         << '\n';
    };
    for (const char* s : {"single", "mixed", "multi_entity"}) {
      auto it = scenarios.find(s);
      if (it != scenarios.end()) row(s, it->second, {}, {}, {}, it->second.count);
    }
    if (tn) row("off_screen", std::nullopt, tn, tn_restricted, {}, offscreen_frames);
    if (total) row("total", total, {}, {}, {}, total->count);
    if (cross_event) row("cross_event", cross_event, {}, {}, delta_ciou(), cross_event->count);
  }
};

struct ReportOptions {
  AucGrid grid;
  double restricted_tn_percent = 5.0;
};

inline MetricsReport scenario_report(const std::vector<EvalRecord>& records,
                                     const ThresholdPolicy& policy, ReportOptions opt = {},
                                     Diagnostics* diag = nullptr) {
  if (records.empty()) throw EmptySetError("scenario_report: no records");
  const auto ptrs = pointers(records);
  const auto bin = binarize(ptrs, policy, diag);
  MetricsReport rep;
  rep.policy = policy.describe();
  rep.auc_points = opt.grid.points;

  std::vector<double> iou(records.size(), -1.0);
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].has_gt()) iou[i] = frame_iou(bin.masks[i], records[i].gt);

  auto collect = [&](auto pred) {
    std::vector<double> v;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (iou[i] >= 0 && pred(records[i])) v.push_back(iou[i]);
    return v;
  };
  for (auto [bit, name] : synth::kTagNames) {
    if (bit == synth::kTagOffScreen) continue;
    auto v = collect([bit = bit](const EvalRecord& r) { return (r.tags & bit) != 0; });
    if (!v.empty()) rep.scenarios[name] = ciou_auc_from_ious(v, opt.grid);
  }
  for (const auto& r : records) rep.offscreen_frames += is_offscreen(r);
  if (rep.offscreen_frames) {
    rep.tn = tn_percent(ptrs, bin.masks);
    rep.tn_restricted = offscreen_tn_restricted(records, opt.restricted_tn_percent, diag);
  }
  auto all = collect([](const EvalRecord&) { return true; });
  if (!all.empty()) rep.total = ciou_auc_from_ious(all, opt.grid);
  auto cross = collect([](const EvalRecord& r) { return r.cross_event; });
  if (!cross.empty()) rep.cross_event = ciou_auc_from_ious(cross, opt.grid);
  return rep;
}

}  // namespace tavlo::eval
