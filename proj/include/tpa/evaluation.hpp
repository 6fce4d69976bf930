#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tpa/geometry.hpp"
#include "tpa/image.hpp"
#include "tpa/losses.hpp"
#include "tpa/scene_data.hpp"

namespace tpa {

/// Detections and ground truth of one scene, the unit all metrics pool over.
struct SceneEval {
  std::string scene_id;
  std::vector<Detection> detections;
  std::vector<InstanceAnnotation> ground_truth;
};

inline constexpr double kMatchIou = 0.5;

namespace detail {

struct ClassMatch {
  std::vector<double> scores;
  std::vector<bool> true_positive;
  long num_gt = 0;
};

// Greedy per-class matching: detections in descending score order (ties by
// scene id, then corner order) each take the unmatched ground truth of the
// same class with the highest IoU, provided it reaches the threshold.
inline ClassMatch match_class(std::span<const SceneEval> scenes, int cls, double min_score) {
  struct Ref {
    std::size_t scene;
    const Detection* det;
  };
  ClassMatch out;
  std::vector<Ref> refs;
  std::vector<std::vector<bool>> used(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    used[s].assign(scenes[s].ground_truth.size(), false);
    for (const auto& g : scenes[s].ground_truth) out.num_gt += g.label == cls;
    for (const auto& d : scenes[s].detections)
      if (d.predicted_class() == cls && d.score >= min_score) refs.push_back({s, &d});
  }
  std::stable_sort(refs.begin(), refs.end(), [&](const Ref& a, const Ref& b) {
    if (a.det->score != b.det->score) return a.det->score > b.det->score;
    if (scenes[a.scene].scene_id != scenes[b.scene].scene_id)
      return scenes[a.scene].scene_id < scenes[b.scene].scene_id;
    return corner_less(a.det->box, b.det->box);
  });
  for (const auto& r : refs) {
    const auto& gts = scenes[r.scene].ground_truth;
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gts[g].label != cls || used[r.scene][g]) continue;
      const double v = iou(r.det->box, gts[g].box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    const bool tp = best >= 0 && best_iou >= kMatchIou;
    if (tp) used[r.scene][best] = true;
    out.scores.push_back(r.det->score);
    out.true_positive.push_back(tp);
  }
  return out;
}

inline int class_count(std::span<const SceneEval> scenes) {
  int n = 0;
  for (const auto& s : scenes) {
    for (const auto& g : s.ground_truth) n = std::max(n, g.label + 1);
    for (const auto& d : s.detections) n = std::max(n, d.predicted_class() + 1);
  }
  return n;
}

}  // namespace detail

/// Area under the all-point-interpolated precision/recall curve.
inline double average_precision(const std::vector<bool>& tp_in_rank_order, long num_gt) {
  if (num_gt <= 0) return 0.0;
  std::vector<double> recall, precision;
  long tp = 0;
  for (std::size_t i = 0; i < tp_in_rank_order.size(); ++i) {
    tp += tp_in_rank_order[i];
    recall.push_back(static_cast<double>(tp) / num_gt);
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

/// mAP at IoU 0.5, pooled over scenes. Classes without ground truth are
/// left out; no ground truth at all gives nullopt.
inline std::optional<double> map50(std::span<const SceneEval> scenes) {
  const int classes = detail::class_count(scenes);
  double sum = 0.0;
  int counted = 0;
  for (int c = 0; c < classes; ++c) {
    const auto m = detail::match_class(scenes, c, 0.0);
    if (m.num_gt == 0) continue;
    sum += average_precision(m.true_positive, m.num_gt);
    ++counted;
  }
  if (counted == 0) return std::nullopt;
  return sum / counted;
}

/// Fraction of ground truth matched (IoU 0.5, same class) by detections
/// scoring at least `score_threshold`; nullopt without ground truth.
inline std::optional<double> recall50(std::span<const SceneEval> scenes,
                                      double score_threshold = 0.3) {
  const int classes = detail::class_count(scenes);
  long matched = 0, total = 0;
  for (int c = 0; c < classes; ++c) {
    const auto m = detail::match_class(scenes, c, score_threshold);
    total += m.num_gt;
    matched += std::count(m.true_positive.begin(), m.true_positive.end(), true);
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(matched) / static_cast<double>(total);
}

/// Fraction of spatial positions where any channel changed.
inline double l0_fraction(const Image& x, const Image& x_adv) {
  require_same_shape(x, x_adv, "l0_fraction");
  if (x.plane() == 0) return 0.0;
  long changed = 0;
  for (int y = 0; y < x.height; ++y)
    for (int xx = 0; xx < x.width; ++xx) {
      bool any = false;
      for (int c = 0; c < x.channels && !any; ++c)
        any = std::abs(x_adv.at(c, y, xx) - x.at(c, y, xx)) > 1e-12;
      changed += any;
    }
  return static_cast<double>(changed) / static_cast<double>(x.plane());
}

inline double l2_norm(const Image& x, const Image& x_adv) {
  require_same_shape(x, x_adv, "l2_norm");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x_adv.data[i] - x.data[i];
    s += d * d;
  }
  return std::sqrt(s);
}

/// Per-scene section of an attack report.
struct SceneReport {
  std::string scene_id;
  std::vector<InstanceAnnotation> ground_truth;
  std::vector<Detection> clean_detections;
  std::vector<Detection> adv_detections;
  std::vector<bool> success;  // one flag per clean detection
  double l0 = 0.0;
  double l2 = 0.0;
  double mask_fraction = 0.0;
  bool nothing_to_attack = false;
  std::vector<LossBreakdown> loss_trace;
};

struct AggregateMetrics {
  std::optional<double> map;
  std::optional<double> recall;
  std::optional<double> clean_map;
  std::optional<double> clean_recall;
  double mean_l0 = 0.0;
  double mean_l2 = 0.0;
  double success_rate = 0.0;  // over all clean detections
};

struct AttackReport {
  std::vector<SceneReport> per_scene;
  AggregateMetrics aggregate;
};

/// Dataset-level metrics. mAP and recall pool detections across scenes;
/// the perturbation norms are averaged per scene.
inline AggregateMetrics aggregate_metrics(std::span<const SceneReport> scenes,
                                          double score_threshold = 0.3) {
  std::vector<SceneEval> adv, clean;
  AggregateMetrics m;
  long flags = 0, hits = 0;
  for (const auto& s : scenes) {
    adv.push_back({s.scene_id, s.adv_detections, s.ground_truth});
    clean.push_back({s.scene_id, s.clean_detections, s.ground_truth});
    m.mean_l0 += s.l0;
    m.mean_l2 += s.l2;
    flags += static_cast<long>(s.success.size());
    hits += std::count(s.success.begin(), s.success.end(), true);
  }
  if (!scenes.empty()) {
    m.mean_l0 /= static_cast<double>(scenes.size());
    m.mean_l2 /= static_cast<double>(scenes.size());
  }
  m.success_rate = flags ? static_cast<double>(hits) / flags : 0.0;
  m.map = map50(adv);
  m.recall = recall50(adv, score_threshold);
  m.clean_map = map50(clean);
  m.clean_recall = recall50(clean, score_threshold);
  return m;
}

inline AttackReport aggregate(std::vector<SceneReport> scenes, double score_threshold = 0.3) {
  AttackReport r;
  r.aggregate = aggregate_metrics(scenes, score_threshold);
  r.per_scene = std::move(scenes);
  return r;
}

}  // namespace tpa
