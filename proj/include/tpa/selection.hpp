#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tpa/detector.hpp"
#include "tpa/errors.hpp"
#include "tpa/geometry.hpp"
#include "tpa/image.hpp"
#include "tpa/losses.hpp"
#include "tpa/segmentation.hpp"

namespace tpa {

enum class Selector { fod, gf, rd };

inline const char* to_string(Selector s) {
  switch (s) {
    case Selector::fod: return "fod";
    case Selector::gf: return "gf";
    case Selector::rd: return "rd";
  }
  return "?";
}

inline Selector parse_selector(const std::string& s) {
  if (s == "fod") return Selector::fod;
  if (s == "gf") return Selector::gf;
  if (s == "rd") return Selector::rd;
  throw ConfigError("invalid selector '" + s + "' (expected fod, gf or rd)");
}

enum class MaskFill { zero, mean };

struct PatchScore {
  SubPatch subpatch;
  double score = 0.0;
};

/// Copy of `image` with `rect` overwritten by the fill value (0, or the
/// per-channel image mean).
inline Image mask_rect(const Image& image, const PixelRect& rect, MaskFill fill) {
  Image out = image;
  for (int c = 0; c < image.channels; ++c) {
    double v = 0.0;
    if (fill == MaskFill::mean) {
      for (std::size_t i = 0; i < image.plane(); ++i) v += image.data[c * image.plane() + i];
      v /= static_cast<double>(image.plane());
    }
    for (int y = rect.top; y < rect.bottom(); ++y)
      for (int x = rect.left; x < rect.right(); ++x) out.at(c, y, x) = v;
  }
  return out;
}

/// First-order-difference score of one masked image for one clean instance:
/// drop in the clean class's probability plus (1 - IoU) of the matched box.
/// A vanished instance contributes probability 0 and IoU 0.
inline double fod_value(const Detection& clean, const DetectionSet& masked) {
  const Match m = match_best(clean.box, masked);
  const double p_masked = m.detection ? m.detection->class_probs[clean.predicted_class()] : 0.0;
  return (clean.score - p_masked) + (1.0 - m.iou);
}

/// FOD scores. `instance_id` of every sub-patch indexes the detections of
/// the clean image, which this function computes itself: one detector
/// forward for the clean image plus one per sub-patch.
inline std::vector<PatchScore> fod_scores(const Detector& model, const Image& image,
                                          std::span<const SubPatch> subpatches,
                                          MaskFill fill = MaskFill::zero) {
  const DetectionSet clean = model.detect(image, SourceTag::clean);
  std::vector<PatchScore> out;
  out.reserve(subpatches.size());
  for (const auto& sp : subpatches) {
    if (sp.instance_id < 0 || static_cast<std::size_t>(sp.instance_id) >= clean.size())
      throw SelectionError("sub-patch refers to unknown instance " + std::to_string(sp.instance_id));
    const DetectionSet masked = model.detect(mask_rect(image, sp.rect, fill), SourceTag::masked);
    out.push_back({sp, fod_value(clean.detections[sp.instance_id], masked)});
  }
  return out;
}

/// Sum of |g| over a rectangle, all channels.
inline double l1_in_rect(const Image& g, const PixelRect& rect) {
  double s = 0.0;
  for (int c = 0; c < g.channels; ++c)
    for (int y = rect.top; y < rect.bottom(); ++y)
      for (int x = rect.left; x < rect.right(); ++x) s += std::abs(g.at(c, y, x));
  return s;
}

inline std::vector<PatchScore> gf_scores_from_gradient(const Image& gradient,
                                                       std::span<const SubPatch> subpatches) {
  std::vector<PatchScore> out;
  out.reserve(subpatches.size());
  for (const auto& sp : subpatches) out.push_back({sp, l1_in_rect(gradient, sp.rect)});
  return out;
}

/// Gradient-feedback scores: l1 norm of the total-loss gradient on the clean
/// image inside each sub-patch.
inline std::vector<PatchScore> gf_scores(const Detector& model, const Image& image,
                                         std::span<const SubPatch> subpatches,
                                         const LossConfig& loss_cfg) {
  auto clean = std::make_shared<const RawOutputs>(model.forward(image));
  const DetectionSet initial = model.detections_from(*clean, SourceTag::clean);
  const LossGradient lg =
      model.loss_gradient(image, make_total_loss(loss_cfg, initial, clean), "total");
  return gf_scores_from_gradient(lg.gradient, subpatches);
}

/// Random scores, i.i.d. uniform in [0,1), reproducible per seed.
inline std::vector<PatchScore> rd_scores(std::span<const SubPatch> subpatches, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<PatchScore> out;
  out.reserve(subpatches.size());
  for (const auto& sp : subpatches) out.push_back({sp, uni(rng)});
  return out;
}

/// Per instance, the `k_per_instance[instance_id]` highest-scoring
/// sub-patches; equal scores go to the lower cell index.
inline std::vector<SubPatch> select_topk(std::span<const PatchScore> scores,
                                         std::span<const int> k_per_instance) {
  std::vector<std::vector<PatchScore>> groups(k_per_instance.size());
  for (const auto& s : scores) {
    const int id = s.subpatch.instance_id;
    if (id < 0 || static_cast<std::size_t>(id) >= groups.size())
      throw SelectionError("no budget for instance " + std::to_string(id));
    if (!std::isfinite(s.score)) throw SelectionError("non-finite patch score");
    groups[id].push_back(s);
  }
  std::vector<SubPatch> out;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    auto& g = groups[i];
    const int k = k_per_instance[i];
    if (k < 0 || static_cast<std::size_t>(k) > g.size()) {
      throw SelectionError("instance " + std::to_string(i) + ": k=" + std::to_string(k) +
                           " exceeds its " + std::to_string(g.size()) + " sub-patches");
    }
    std::stable_sort(g.begin(), g.end(), [](const PatchScore& a, const PatchScore& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.subpatch.index < b.subpatch.index;
    });
    for (int j = 0; j < k; ++j) out.push_back(g[j].subpatch);
  }
  return out;
}

/// Binary attack map: 1 on the union of the selected rectangles.
inline Mask build_attack_map(std::span<const SubPatch> selected, int height, int width) {
  Mask m(height, width);
  for (const auto& sp : selected) {
    const auto& r = sp.rect;
    if (r.left < 0 || r.top < 0 || r.width < 0 || r.height < 0 || r.right() > width ||
        r.bottom() > height) {
      throw ContractError("sub-patch rectangle lies outside the image");
    }
    for (int y = r.top; y < r.bottom(); ++y)
      for (int x = r.left; x < r.right(); ++x) m.at(y, x) = 1;
  }
  return m;
}

}  // namespace tpa
