#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "tpa/detector.hpp"
#include "tpa/errors.hpp"
#include "tpa/geometry.hpp"

namespace tpa {

enum class BoxLoss { none, bdl, cbl };

inline const char* to_string(BoxLoss b) {
  switch (b) {
    case BoxLoss::none: return "none";
    case BoxLoss::bdl: return "bdl";
    case BoxLoss::cbl: return "cbl";
  }
  return "?";
}

inline BoxLoss parse_box_loss(const std::string& s) {
  if (s == "none") return BoxLoss::none;
  if (s == "bdl") return BoxLoss::bdl;
  if (s == "cbl") return BoxLoss::cbl;
  throw ConfigError("invalid box_loss '" + s + "' (expected bdl, cbl or none)");
}

struct LossConfig {
  BoxLoss box_loss = BoxLoss::bdl;
  double cbl_tau = 1e5;
  double cbl_iou_thresh = 0.1;
  double cbl_score_thresh = 0.4;
  double cls_score_thresh = 0.3;

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(cbl_iou_thresh) || !unit(cbl_score_thresh) || !unit(cls_score_thresh))
      throw ConfigError("loss thresholds must lie in [0,1]");
    if (!(cbl_tau > 0.0)) throw ConfigError("cbl_tau must be > 0");
  }
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double box_term = 0.0;
  std::vector<double> per_instance_best_iou;
};

/// IoU of a fixed box and a variable box, with the gradient w.r.t. the
/// variable box's (cx, cy, w, h). Min/max clamps give an exactly zero
/// gradient once the boxes are disjoint.
inline double iou_with_grad(const Box& fixed, const Box& cur, std::array<double, 4>* d_cur) {
  if (d_cur) *d_cur = {0, 0, 0, 0};
  const double ix1 = std::max(fixed.x1(), cur.x1()), ix2 = std::min(fixed.x2(), cur.x2());
  const double iy1 = std::max(fixed.y1(), cur.y1()), iy2 = std::min(fixed.y2(), cur.y2());
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = fixed.area() + cur.area() - inter;
  const double value = inter / uni;
  if (!d_cur) return value;

  // d(iou)/d(inter) and d(iou)/d(area of cur)
  const double d_inter = (uni + inter) / (uni * uni);
  const double d_area = -inter / (uni * uni);
  // The variable box owns a clamp side only when it is strictly inside.
  const double d_x1 = cur.x1() > fixed.x1() ? -ih : 0.0;
  const double d_x2 = cur.x2() < fixed.x2() ? ih : 0.0;
  const double d_y1 = cur.y1() > fixed.y1() ? -iw : 0.0;
  const double d_y2 = cur.y2() < fixed.y2() ? iw : 0.0;
  auto& g = *d_cur;
  g[0] = d_inter * (d_x1 + d_x2);
  g[1] = d_inter * (d_y1 + d_y2);
  g[2] = d_inter * 0.5 * (d_x2 - d_x1) + d_area * cur.h();
  g[3] = d_inter * 0.5 * (d_y2 - d_y1) + d_area * cur.w();
  return value;
}

struct BoxTermResult {
  double value = 0.0;
  std::vector<double> best_iou;
  bool no_instances = false;  // N = 0: the term is defined as 0
};

/// Bounding-box drifting loss: mean over the initial detections of the best
/// IoU with any current detection (raw cells scoring above the threshold).
/// Only the best-matching cell per instance receives gradient.
inline BoxTermResult bdl(const DetectionSet& initial, const RawOutputs& current,
                         double score_thresh, RawGradient* grad = nullptr) {
  BoxTermResult res;
  const auto n = initial.size();
  if (n == 0) {
    res.no_instances = true;
    return res;
  }
  std::vector<int> active;
  for (int j = 0; j < current.cells(); ++j)
    if (current.score(j) > score_thresh) active.push_back(j);

  for (const auto& det : initial.detections) {
    int best = -1;
    double best_iou = 0.0;
    for (int j : active) {
      const double v = iou(det.box, current.boxes[j]);
      if (v > best_iou) {
        best_iou = v;
        best = j;
      }
    }
    res.best_iou.push_back(best_iou);
    res.value += best_iou;
    if (grad && best >= 0) {
      std::array<double, 4> d;
      iou_with_grad(det.box, current.boxes[best], &d);
      for (int k = 0; k < 4; ++k) grad->boxes[best][k] += d[k] / static_cast<double>(n);
    }
  }
  res.value /= static_cast<double>(n);
  return res;
}

/// Classification loss: mean squared max class probability over the raw
/// cells scoring above the threshold; 0 when none do.
inline double cls_loss(const RawOutputs& current, double score_thresh, RawGradient* grad = nullptr) {
  std::vector<int> active;
  for (int j = 0; j < current.cells(); ++j)
    if (current.score(j) > score_thresh) active.push_back(j);
  if (active.empty()) return 0.0;
  const double k = static_cast<double>(active.size());
  double sum = 0.0;
  for (int j : active) {
    const double p = current.score(j);
    sum += p * p;
    if (grad) grad->prob(current, j, current.predicted_class(j)) += 2.0 * p / k;
  }
  return sum / k;
}

/// Coordinate-based loss. Proposal j is active when its box still overlaps
/// the same proposal on the clean image (IoU > cbl_iou_thresh) and its max
/// class probability exceeds cbl_score_thresh; active proposals are pulled
/// toward the far offset tau in all four coordinates.
inline double cbl(const RawOutputs& clean, const RawOutputs& current, const LossConfig& cfg,
                  RawGradient* grad = nullptr) {
  if (clean.cells() != current.cells())
    throw ContractError("cbl: clean and current outputs differ in proposal count");
  double sum = 0.0;
  for (int j = 0; j < current.cells(); ++j) {
    if (!(iou(clean.boxes[j], current.boxes[j]) > cfg.cbl_iou_thresh)) continue;
    if (!(current.score(j) > cfg.cbl_score_thresh)) continue;
    const auto& b = current.boxes[j];
    const std::array<double, 4> v = {b.cx(), b.cy(), b.w(), b.h()};
    for (int k = 0; k < 4; ++k) {
      const double d = v[k] - cfg.cbl_tau;
      sum += d * d;
      if (grad) grad->boxes[j][k] += 2.0 * d;
    }
  }
  return sum;
}

/// Classification loss plus the configured box term.
inline LossBreakdown total_loss(const LossConfig& cfg, const DetectionSet& initial,
                                const RawOutputs& clean, const RawOutputs& current,
                                RawGradient* grad = nullptr) {
  LossBreakdown out;
  out.cls = cls_loss(current, cfg.cls_score_thresh, grad);
  const bool use_bdl = cfg.box_loss == BoxLoss::bdl;
  const BoxTermResult drift = bdl(initial, current, cfg.cls_score_thresh, use_bdl ? grad : nullptr);
  out.per_instance_best_iou = drift.best_iou;
  if (use_bdl) {
    out.box_term = drift.value;
  } else if (cfg.box_loss == BoxLoss::cbl) {
    out.box_term = cbl(clean, current, cfg, grad);
  }
  out.total = out.cls + out.box_term;
  return out;
}

/// Wraps total_loss as a functional for Detector::loss_gradient. When
/// `last` is given it receives the breakdown of the most recent evaluation.
inline LossFunctional make_total_loss(LossConfig cfg, DetectionSet initial,
                                      std::shared_ptr<const RawOutputs> clean,
                                      LossBreakdown* last = nullptr) {
  return [cfg, initial = std::move(initial), clean = std::move(clean), last](
             const RawOutputs& current, RawGradient& grad) {
    LossBreakdown b = total_loss(cfg, initial, *clean, current, &grad);
    const double total = b.total;
    if (last) *last = std::move(b);
    return total;
  };
}

}  // namespace tpa
