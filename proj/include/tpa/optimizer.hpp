#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tpa/detector.hpp"
#include "tpa/errors.hpp"
#include "tpa/evaluation.hpp"
#include "tpa/image.hpp"
#include "tpa/losses.hpp"
#include "tpa/scene_data.hpp"
#include "tpa/segmentation.hpp"
#include "tpa/selection.hpp"

namespace tpa {

struct AttackConfig {
  double epsilon = 10.0 / 255.0;
  double alpha = 1.0 / 255.0;
  int iterations = 10;
  GridScheme scheme = GridScheme::scale_adaptive(1, 2, 3);
  Selector selector = Selector::fod;
  LossConfig loss;
  std::uint64_t seed = 0;
  bool clamp_min_one = false;
  /// Step against the gradient (shrinking the objective). false reproduces
  /// the literal "+ alpha * sign(g)" update.
  bool descend = true;
  MaskFill mask_fill = MaskFill::zero;

  void validate() const {
    if (!(alpha > 0.0) || !(alpha <= epsilon) || !(epsilon <= 1.0))
      throw ConfigError("attack requires 0 < alpha <= epsilon <= 1");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    loss.validate();
  }
};

/// Perturbation state of one attack run. xi is zero off the attack map.
struct AttackState {
  Image xi;
  int t = 0;
  std::vector<LossBreakdown> loss_trace;

  static AttackState start(const Image& x) { return {Image(x.channels, x.height, x.width), 0, {}}; }
};

/// What the objective compares against: the clean detections and the clean
/// raw outputs (proposal-indexed counterparts for the coordinate loss).
struct AttackObjective {
  DetectionSet initial;
  std::shared_ptr<const RawOutputs> clean_raw;
};

/// x + M * xi.
inline Image compose(const Image& x, const Mask& m, const Image& xi) {
  require_same_shape(x, xi, "compose");
  Image out = x;
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx)
        if (m.at(y, xx)) out.at(c, y, xx) = x.at(c, y, xx) + xi.at(c, y, xx);
  return out;
}

/// Shrinks xi toward zero by single ulps until x + xi is in [0,1] and
/// |(x + xi) - x| <= eps hold exactly in double arithmetic.
inline void settle(const Image& x, Image& xi, double eps) {
  for (std::size_t i = 0; i < xi.size(); ++i) {
    double& d = xi.data[i];
    for (;;) {
      const double a = x.data[i] + d;
      if (a >= 0.0 && a <= 1.0 && std::abs(a - x.data[i]) <= eps) break;
      d = std::nextafter(d, 0.0);
    }
  }
}

inline int sign_of(double v) { return (v > 0.0) - (v < 0.0); }

/// One masked iterative sign-gradient step:
///   g  = grad L(x_hat) / |grad L(x_hat)|_1
///   xi = M * clip_[-eps,eps]( clip_[0,1](x_hat + M * (dir * alpha * sign(g))) - x )
/// with dir = -1 when descending.
inline void bim_step(const Detector& model, const Image& x, const Mask& map, AttackState& state,
                     const AttackConfig& cfg, const AttackObjective& objective) {
  const Image x_hat = compose(x, map, state.xi);
  LossBreakdown breakdown;
  LossGradient lg;
  try {
    lg = model.loss_gradient(
        x_hat, make_total_loss(cfg.loss, objective.initial, objective.clean_raw, &breakdown),
        "total");
  } catch (const NumericError& e) {
    throw NumericError("iteration " + std::to_string(state.t) + ": " + e.what());
  }
  double l1 = 0.0;
  for (double v : lg.gradient.data) l1 += std::abs(v);
  if (!std::isfinite(l1)) {
    throw NumericError("iteration " + std::to_string(state.t) + ": non-finite gradient norm");
  }
  if (l1 > 0.0)
    for (double& v : lg.gradient.data) v /= l1;

  const double dir = cfg.descend ? -1.0 : 1.0;
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) {
        const std::size_t i = x.index(c, y, xx);
        if (!map.at(y, xx)) {
          state.xi.data[i] = 0.0;
          continue;
        }
        const double proposed =
            std::clamp(x_hat.data[i] + dir * cfg.alpha * sign_of(lg.gradient.data[i]), 0.0, 1.0);
        state.xi.data[i] = std::clamp(proposed - x.data[i], -cfg.epsilon, cfg.epsilon);
      }
  settle(x, state.xi, cfg.epsilon);
  state.loss_trace.push_back(std::move(breakdown));
  ++state.t;
}

struct AttackOutcome {
  Image x_adv;
  Mask map;
  SceneReport report;
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace detail

/// Segments every clean detection, scores and selects sub-patches, and
/// builds the attack map. Returns the map; `subpatch_count` receives the
/// number of scored sub-patches.
inline Mask select_attack_map(const Detector& model, const Scene& scene, const DetectionSet& clean,
                              const AttackConfig& cfg, long* subpatch_count = nullptr) {
  const Image& x = scene.image;
  std::vector<SubPatch> subpatches;
  std::vector<int> k(clean.size(), 0);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const Box& box = clean.detections[i].box;
    const PixelRect ext = pixel_extent(box, x.width, x.height);
    int n = std::min({grid_size_for(box, cfg.scheme), ext.width, ext.height});
    if (n < 1) continue;  // box lies entirely off-image
    auto cells = segment_instance(box, n, static_cast<int>(i), x.width, x.height);
    subpatches.insert(subpatches.end(), cells.begin(), cells.end());
    k[i] = budget(n, cfg.clamp_min_one);
  }
  if (subpatch_count) *subpatch_count = static_cast<long>(subpatches.size());
  std::vector<PatchScore> scores;
  switch (cfg.selector) {
    case Selector::fod: scores = fod_scores(model, x, subpatches, cfg.mask_fill); break;
    case Selector::gf: scores = gf_scores(model, x, subpatches, cfg.loss); break;
    case Selector::rd: scores = rd_scores(subpatches, cfg.seed ^ detail::fnv1a(scene.id)); break;
  }
  const auto selected = select_topk(scores, k);
  return build_attack_map(selected, x.height, x.width);
}

/// Full patch attack on one scene: clean detection, attack-map selection
/// (fixed afterwards), `iterations` sign-gradient steps, final evaluation.
inline AttackOutcome run_attack(const Detector& model, const Scene& scene, const AttackConfig& cfg) {
  cfg.validate();
  const Image& x = scene.image;
  auto clean_raw = std::make_shared<const RawOutputs>(model.forward(x));
  const DetectionSet clean = model.detections_from(*clean_raw, SourceTag::clean);

  AttackOutcome out;
  out.report.scene_id = scene.id;
  out.report.ground_truth = scene.annotations;
  out.report.clean_detections = clean.detections;

  if (clean.empty()) {
    out.x_adv = x;
    out.map = Mask(x.height, x.width);
    out.report.nothing_to_attack = true;
    out.report.adv_detections = clean.detections;
    return out;
  }

  out.map = select_attack_map(model, scene, clean, cfg);
  AttackState state = AttackState::start(x);
  const AttackObjective objective{clean, clean_raw};
  for (int t = 0; t < cfg.iterations; ++t) bim_step(model, x, out.map, state, cfg, objective);

  out.x_adv = compose(x, out.map, state.xi);
  const DetectionSet after = cfg.iterations == 0 ? DetectionSet{clean.detections, SourceTag::adversarial}
                                                 : model.detect(out.x_adv, SourceTag::adversarial);
  out.report.adv_detections = after.detections;
  for (const auto& d : clean.detections) out.report.success.push_back(attack_success(d, after));
  out.report.l0 = l0_fraction(x, out.x_adv);
  out.report.l2 = l2_norm(x, out.x_adv);
  out.report.mask_fraction = out.map.fraction();
  out.report.loss_trace = std::move(state.loss_trace);
  return out;
}

struct InvariantCheck {
  bool support = true;  // x_adv == x wherever the map is 0
  bool budget = true;   // |x_adv - x| <= eps
  bool range = true;    // x_adv in [0,1]
  double max_abs = 0.0;

  bool ok() const { return support && budget && range; }
};

inline InvariantCheck check_invariants(const Image& x, const Image& x_adv, const Mask& map,
                                       double eps) {
  require_same_shape(x, x_adv, "check_invariants");
  InvariantCheck r;
  for (int c = 0; c < x.channels; ++c)
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) {
        const double a = x_adv.at(c, y, xx), b = x.at(c, y, xx);
        const double d = std::abs(a - b);
        r.max_abs = std::max(r.max_abs, d);
        if (!map.at(y, xx) && a != b) r.support = false;
        if (d > eps) r.budget = false;
        if (!(a >= 0.0 && a <= 1.0)) r.range = false;
      }
  return r;
}

}  // namespace tpa
