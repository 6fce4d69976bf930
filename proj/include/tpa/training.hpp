#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "tpa/detector.hpp"
#include "tpa/evaluation.hpp"
#include "tpa/scene_data.hpp"

namespace tpa {

struct TrainBudget {
  int epochs = 4;
  int batch_size = 8;
  double learning_rate = 3e-3;
  double positive_weight = 1.0;
  double box_weight = 1.0;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;
  /// Validation mAP the trained model must reach; <= 0 disables the gate.
  double min_val_map = 0.0;
};

struct TrainResult {
  double val_map = 0.0;
  long steps = 0;
  std::vector<double> epoch_loss;
};

/// mAP@0.5 of a detector over scenes.
inline double evaluate_map(const Detector& model, std::span<const Scene> scenes) {
  std::vector<SceneEval> evals;
  evals.reserve(scenes.size());
  for (const auto& s : scenes) evals.push_back({s.id, model.detect(s.image).detections, s.annotations});
  return map50(evals).value_or(0.0);
}

namespace detail {

inline double smooth_l1(double d, double* grad) {
  if (std::abs(d) < 1.0) {
    *grad = d;
    return 0.5 * d * d;
  }
  *grad = d > 0 ? 1.0 : -1.0;
  return std::abs(d) - 0.5;
}

// Training loss for one scene on the raw head output. The cell containing an
// instance center is its positive; the other cells of the 3x3 neighborhood
// whose centers fall inside the box are excluded from the class loss but
// still regress that instance's box, so stray activations decode to boxes
// that NMS can suppress.
inline double scene_loss(const ToyDetector& model, const nn::Feature& head, const Scene& scene,
                         const TrainBudget& budget, nn::Mat& dhead) {
  const auto& cfg = model.config();
  const int C = cfg.num_classes, gw = head.width, gh = head.height;
  const int cells = gw * gh;
  std::vector<int> cls_target(cells, 0);   // 0 background, c+1 foreground
  std::vector<bool> ignore(cells, false);
  std::vector<int> box_owner(cells, -1);
  for (std::size_t a = 0; a < scene.annotations.size(); ++a) {
    const auto& ann = scene.annotations[a];
    const int gx = std::clamp(static_cast<int>(ann.box.cx() / cfg.stride), 0, gw - 1);
    const int gy = std::clamp(static_cast<int>(ann.box.cy() / cfg.stride), 0, gh - 1);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = gx + dx, y = gy + dy;
        if (x < 0 || y < 0 || x >= gw || y >= gh) continue;
        const int i = y * gw + x;
        const double ccx = (x + 0.5) * cfg.stride, ccy = (y + 0.5) * cfg.stride;
        const bool center = dx == 0 && dy == 0;
        const bool inside = ccx > ann.box.x1() && ccx < ann.box.x2() && ccy > ann.box.y1() &&
                            ccy < ann.box.y2();
        if (center) {
          cls_target[i] = ann.label + 1;
          ignore[i] = false;
          box_owner[i] = static_cast<int>(a);
        } else if (inside && cls_target[i] == 0) {
          ignore[i] = true;
          if (box_owner[i] < 0) box_owner[i] = static_cast<int>(a);
        }
      }
  }
  int n_pos = 0, n_box = 0;
  for (int i = 0; i < cells; ++i) {
    n_pos += cls_target[i] > 0;
    n_box += box_owner[i] >= 0;
  }
  dhead = nn::Mat::Zero(cells, C + 5);
  double loss = 0.0;
  const double neg_norm = 1.0 / cells;
  const double pos_norm = budget.positive_weight / std::max(1, n_pos);
  for (int i = 0; i < cells; ++i) {
    if (ignore[i]) continue;
    const double wgt = cls_target[i] > 0 ? pos_norm : neg_norm;
    double mx = head.data(i, 0);
    for (int c = 1; c <= C; ++c) mx = std::max(mx, head.data(i, c));
    double sum = 0.0;
    for (int c = 0; c <= C; ++c) sum += std::exp(head.data(i, c) - mx);
    const double lse = mx + std::log(sum);
    const double ls = budget.label_smoothing;
    for (int c = 0; c <= C; ++c) {
      const double t = (c == cls_target[i] ? 1.0 - ls : 0.0) + ls / (C + 1);
      const double p = std::exp(head.data(i, c) - lse);
      loss += wgt * t * (lse - head.data(i, c));
      dhead(i, c) = wgt * (p - t);
    }
  }
  const double box_norm = budget.box_weight / std::max(1, n_box);
  for (int i = 0; i < cells; ++i) {
    if (box_owner[i] < 0) continue;
    const Box& b = scene.annotations[box_owner[i]].box;
    const int x = i % gw, y = i / gw;
    const double target[4] = {b.cx() / cfg.stride - x - 0.5, b.cy() / cfg.stride - y - 0.5,
                              std::log(b.w() / cfg.anchor), std::log(b.h() / cfg.anchor)};
    for (int k = 0; k < 4; ++k) {
      double g;
      loss += box_norm * smooth_l1(head.data(i, C + 1 + k) - target[k], &g);
      dhead(i, C + 1 + k) = box_norm * g;
    }
  }
  return loss;
}

}  // namespace detail

/// Trains the toy detector in place with Adam on mini-batches, shuffled per
/// epoch from the budget seed. Deterministic given (model, scenes, budget).
/// Throws TrainingGateError when a positive budget misses min_val_map.
inline TrainResult train_toy(ToyDetector& model, std::span<const Scene> train,
                             std::span<const Scene> val, const TrainBudget& budget,
                             const std::function<void(int, double)>& on_epoch = {}) {
  TrainResult res;
  if (budget.epochs <= 0 || train.empty()) {
    res.val_map = evaluate_map(model, val);
    return res;
  }
  auto& net = model.network();
  auto m1 = net.zero_gradients(), m2 = net.zero_gradients();
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::mt19937_64 rng(budget.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const long steps_per_epoch =
      (static_cast<long>(train.size()) + budget.batch_size - 1) / budget.batch_size;
  const long total_steps = steps_per_epoch * budget.epochs;

  for (int epoch = 0; epoch < budget.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += budget.batch_size) {
      const std::size_t end = std::min(order.size(), start + budget.batch_size);
      auto grads = net.zero_gradients();
      for (std::size_t b = start; b < end; ++b) {
        const Scene& s = train[order[b]];
        nn::Network::Trace trace;
        const nn::Feature head = model.head(s.image, &trace);
        nn::Mat dhead;
        epoch_loss += detail::scene_loss(model, head, s, budget, dhead);
        net.backward(trace, dhead, &grads);
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      ++res.steps;
      // Cosine decay of the learning rate over the whole run.
      const double progress = static_cast<double>(res.steps - 1) / std::max<long>(1, total_steps);
      const double lr = budget.learning_rate * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(res.steps));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(res.steps));
      auto& layers = net.layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        auto update = [&](auto& param, auto& g, auto& a, auto& v) {
          a = kBeta1 * a + (1 - kBeta1) * g;
          v = kBeta2 * v + (1 - kBeta2) * g.cwiseProduct(g);
          param.array() -= lr * (a.array() / c1) / ((v.array() / c2).sqrt() + kEps);
        };
        update(layers[l].weight(), grads.weight[l], m1.weight[l], m2.weight[l]);
        update(layers[l].bias(), grads.bias[l], m1.bias[l], m2.bias[l]);
      }
    }
    epoch_loss /= static_cast<double>(train.size());
    res.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  net.snap_to_float();
  res.val_map = evaluate_map(model, val);
  if (budget.min_val_map > 0.0 && res.val_map < budget.min_val_map) {
    throw TrainingGateError("validation mAP " + std::to_string(res.val_map) +
                            " is below the required " + std::to_string(budget.min_val_map));
  }
  return res;
}

}  // namespace tpa
