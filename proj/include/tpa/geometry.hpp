#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "tpa/errors.hpp"

namespace tpa {

/// Axis-aligned box in center form, in pixels. Width and height are
/// strictly positive; construction rejects anything else.
class Box {
 public:
  static Box center(double cx, double cy, double w, double h) {
    if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(cx) || !std::isfinite(cy) ||
        !std::isfinite(w) || !std::isfinite(h)) {
      throw InvalidBoxError("invalid box: cx=" + std::to_string(cx) + " cy=" + std::to_string(cy) +
                            " w=" + std::to_string(w) + " h=" + std::to_string(h));
    }
    return Box(cx, cy, w, h);
  }

  static Box corners(double x1, double y1, double x2, double y2) {
    return center(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1);
  }

  double cx() const { return cx_; }
  double cy() const { return cy_; }
  double w() const { return w_; }
  double h() const { return h_; }
  double x1() const { return cx_ - 0.5 * w_; }
  double y1() const { return cy_ - 0.5 * h_; }
  double x2() const { return cx_ + 0.5 * w_; }
  double y2() const { return cy_ + 0.5 * h_; }
  double area() const { return w_ * h_; }

  std::array<double, 4> corner_form() const { return {x1(), y1(), x2(), y2()}; }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  Box(double cx, double cy, double w, double h) : cx_(cx), cy_(cy), w_(w), h_(h) {}

  double cx_, cy_, w_, h_;
};

/// Lexicographic order on (x1, y1, x2, y2); the deterministic tie-break
/// used wherever two boxes compare equal on everything else.
inline bool corner_less(const Box& a, const Box& b) {
  return a.corner_form() < b.corner_form();
}

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  // Areas from the same corner differences as the intersection, so that
  // iou(a, a) is exactly 1.
  auto extent = [](const Box& r) { return (r.x2() - r.x1()) * (r.y2() - r.y1()); };
  const double uni = extent(a) + extent(b) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

/// A detector output: box, per-class probabilities, and score = max prob.
/// `anchor` links the detection back to the raw output cell it was decoded
/// from, or -1 for detections that did not come from raw outputs.
struct Detection {
  Box box;
  std::vector<double> class_probs;
  double score = 0.0;
  int anchor = -1;

  static Detection make(const Box& box, std::vector<double> probs, int anchor = -1) {
    if (probs.empty()) throw ContractError("detection needs at least one class probability");
    for (double p : probs) {
      if (!(p >= 0.0 && p <= 1.0)) throw ContractError("class probability outside [0,1]");
    }
    const double s = *std::max_element(probs.begin(), probs.end());
    return Detection{box, std::move(probs), s, anchor};
  }

  int predicted_class() const {
    return static_cast<int>(std::max_element(class_probs.begin(), class_probs.end()) -
                            class_probs.begin());
  }
};

enum class SourceTag { clean, adversarial, masked };

inline const char* to_string(SourceTag t) {
  switch (t) {
    case SourceTag::clean: return "clean";
    case SourceTag::adversarial: return "adversarial";
    case SourceTag::masked: return "masked";
  }
  return "?";
}

/// Canonical detection order: descending score, ties by corner order.
inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return corner_less(a.box, b.box);
}

struct DetectionSet {
  std::vector<Detection> detections;
  SourceTag source = SourceTag::clean;

  static DetectionSet from(std::vector<Detection> dets, SourceTag tag) {
    std::stable_sort(dets.begin(), dets.end(), detection_before);
    return DetectionSet{std::move(dets), tag};
  }

  bool empty() const { return detections.empty(); }
  std::size_t size() const { return detections.size(); }
};

struct Match {
  std::optional<Detection> detection;
  double iou = 0.0;
};

/// Candidate with the highest IoU to `ref`. Ties go to the higher score,
/// then the lexicographically smaller corners. No match when nothing overlaps.
inline Match match_best(const Box& ref, std::span<const Detection> candidates) {
  const Detection* best = nullptr;
  double best_iou = 0.0;
  for (const auto& d : candidates) {
    const double v = iou(ref, d.box);
    if (v <= 0.0) continue;
    bool better = best == nullptr || v > best_iou;
    if (!better && v == best_iou) {
      better = d.score > best->score ||
               (d.score == best->score && corner_less(d.box, best->box));
    }
    if (better) {
      best = &d;
      best_iou = v;
    }
  }
  if (best == nullptr) return {};
  return {*best, best_iou};
}

inline Match match_best(const Box& ref, const DetectionSet& candidates) {
  return match_best(ref, std::span<const Detection>(candidates.detections));
}

inline constexpr double kSuccessIou = 0.5;

/// True when the instance found on the clean image vanished, drifted below
/// IoU 0.5, or changed predicted class.
inline bool attack_success(const Detection& initial, const DetectionSet& after) {
  const Match m = match_best(initial.box, after);
  if (!m.detection) return true;
  if (m.iou < kSuccessIou) return true;
  return m.detection->predicted_class() != initial.predicted_class();
}

/// Greedy class-agnostic NMS: keep the best remaining detection, drop every
/// other one overlapping it with IoU > iou_threshold.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> kept;
  std::vector<bool> dropped(dets.size(), false);
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dropped[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (!dropped[j] && iou(dets[i].box, dets[j].box) > iou_threshold) dropped[j] = true;
    }
  }
  return kept;
}

/// Integer pixel rectangle, half-open: columns [left, left+width).
struct PixelRect {
  int left = 0;
  int top = 0;
  int width = 0;
  int height = 0;

  int right() const { return left + width; }
  int bottom() const { return top + height; }
  long area() const { return static_cast<long>(width) * height; }
  bool contains(int x, int y) const { return x >= left && x < right() && y >= top && y < bottom(); }

  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

/// Pixel extent covered by a box: corners rounded half-up to the pixel grid,
/// then clipped to an image of the given size (when positive).
inline PixelRect pixel_extent(const Box& b, int image_w = 0, int image_h = 0) {
  auto rnd = [](double v) { return static_cast<int>(std::floor(v + 0.5)); };
  int l = rnd(b.x1()), t = rnd(b.y1()), r = rnd(b.x2()), bt = rnd(b.y2());
  if (image_w > 0) {
    l = std::clamp(l, 0, image_w);
    r = std::clamp(r, 0, image_w);
  }
  if (image_h > 0) {
    t = std::clamp(t, 0, image_h);
    bt = std::clamp(bt, 0, image_h);
  }
  return PixelRect{l, t, std::max(0, r - l), std::max(0, bt - t)};
}

}  // namespace tpa
