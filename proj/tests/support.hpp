#pragma once

#include <filesystem>
#include <random>
#include <unistd.h>
#include <string>

#include "tpa/tpa.hpp"

namespace tpa::testing {

inline Detection det(double cx, double cy, double w, double h, std::vector<double> probs) {
  return Detection::make(Box::center(cx, cy, w, h), std::move(probs));
}

inline Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(3, h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

/// A small detector trained once per build tree and cached on disk; good
/// enough to produce detections on generated scenes. Training is
/// deterministic, so concurrent test processes write identical files.
inline const ToyDetector& trained_model() {
  static const ToyDetector model = [] {
    const std::filesystem::path path = TPA_TEST_MODEL;
    if (std::filesystem::exists(path)) {
      try {
        return load_checkpoint(path.string());
      } catch (const LoadError&) {
      }
    }
    SceneGenConfig g;
    g.seed = 900'000;
    const auto train = generate_scenes(g, 1000);
    g.seed = 950'000;
    const auto val = generate_scenes(g, 40);
    ToyDetector m({}, 11);
    TrainBudget b;
    b.epochs = 4;
    train_toy(m, train, val, b);
    const auto tmp = path.string() + ".tmp" + std::to_string(::getpid());
    save_checkpoint(tmp, m);
    std::filesystem::rename(tmp, path);
    return m;
  }();
  return model;
}

/// Generated scenes from a seed range no training set uses.
inline std::vector<Scene> eval_scenes(int count, std::uint64_t seed = 70'000) {
  SceneGenConfig g;
  g.seed = seed;
  return generate_scenes(g, count);
}

}  // namespace tpa::testing
