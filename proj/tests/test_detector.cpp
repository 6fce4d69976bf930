#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace tpa;
using tpa::testing::eval_scenes;
using tpa::testing::random_image;
using tpa::testing::trained_model;

namespace {

// Fixed random linear functional over every raw output.
LossFunctional linear_functional(const RawOutputs& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::array<double, 4>> wb(shape.boxes.size());
  for (auto& w : wb)
    for (auto& v : w) v = n(rng) / 8.0;
  std::vector<double> wp(shape.probs.size());
  for (auto& v : wp) v = n(rng);
  return [wb, wp](const RawOutputs& r, RawGradient& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < r.boxes.size(); ++i) {
      const auto& b = r.boxes[i];
      const double v[4] = {b.cx(), b.cy(), b.w(), b.h()};
      for (int k = 0; k < 4; ++k) {
        s += wb[i][k] * v[k];
        g.boxes[i][k] += wb[i][k];
      }
    }
    for (std::size_t i = 0; i < r.probs.size(); ++i) {
      s += wp[i] * r.probs[i];
      g.probs[i] += wp[i];
    }
    return s;
  };
}

void expect_valid(const DetectionSet& s, int classes, int w, int h) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& d = s.detections[i];
    EXPECT_GT(d.box.w(), 0.0);
    EXPECT_GT(d.box.h(), 0.0);
    EXPECT_TRUE(std::isfinite(d.box.cx()) && std::isfinite(d.box.cy()));
    ASSERT_EQ(static_cast<int>(d.class_probs.size()), classes);
    for (double p : d.class_probs) {
      EXPECT_GE(p, 0.0);
      EXPECT_LE(p, 1.0);
    }
    if (i > 0) EXPECT_FALSE(detection_before(d, s.detections[i - 1]));
  }
  (void)w;
  (void)h;
}

}  // namespace

TEST(ToyDetector, RawProbabilitiesSumToOne) {
  const ToyDetector m({}, 3);
  const auto r = m.forward(random_image(128, 128, 1));
  ASSERT_EQ(r.cells(), m.grid_height() * m.grid_width());
  for (int c = 0; c < r.cells(); ++c) {
    double s = r.background(c);
    for (int k = 0; k < r.num_classes; ++k) s += r.fg_prob(c, k);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(ToyDetector, UntrainedOutputSatisfiesDetectionInvariants) {
  ToyDetectorConfig cfg;
  cfg.score_threshold = 0.01;
  const ToyDetector m(cfg, 5);
  const auto s = m.detect(random_image(128, 128, 2));
  EXPECT_GT(s.size(), 0u);
  expect_valid(s, 3, 128, 128);
}

TEST(ToyDetector, ShapeMismatchIsContractError) {
  const ToyDetector m;
  EXPECT_THROW(m.detect(random_image(64, 64, 1)), ContractError);
  EXPECT_THROW(m.loss_gradient(random_image(64, 96, 1), [](const RawOutputs&, RawGradient&) { return 0.0; }),
               ContractError);
}

TEST(ToyDetector, DetectIsDeterministic) {
  const auto& m = trained_model();
  const auto scene = eval_scenes(1)[0];
  const auto a = m.detect(scene.image), b = m.detect(scene.image);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.detections[i].box.corner_form(), b.detections[i].box.corner_form());
    EXPECT_EQ(a.detections[i].class_probs, b.detections[i].class_probs);
  }
}

TEST(ToyDetector, ConstantLossGivesZeroGradient) {
  const ToyDetector m({}, 1);
  const auto img = random_image(128, 128, 3);
  const auto g = m.loss_gradient(img, [](const RawOutputs&, RawGradient&) { return 4.0; });
  EXPECT_EQ(g.loss, 4.0);
  EXPECT_TRUE(g.gradient.same_shape(img));
  for (double v : g.gradient.data) EXPECT_EQ(v, 0.0);
}

TEST(ToyDetector, NonFiniteLossNamesTheTerm) {
  const ToyDetector m({}, 1);
  try {
    m.loss_gradient(random_image(128, 128, 3),
                    [](const RawOutputs&, RawGradient&) { return std::nan(""); }, "cbl");
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("cbl"), std::string::npos);
  }
}

TEST(ToyDetector, GradientMatchesFiniteDifferences) {
  const auto& m = trained_model();
  const auto scene = eval_scenes(1, 71'000)[0];
  const auto raw = m.forward(scene.image);
  const auto loss = linear_functional(raw, 9);
  const auto g = m.loss_gradient(scene.image, loss);
  auto value = [&](const Image& img) {
    const auto r = m.forward(img);
    RawGradient sink = RawGradient::zeros_like(r);
    return loss(r, sink);
  };
  // Pixels inside annotated instances, where the outputs actually respond.
  std::mt19937_64 rng(4);
  const auto& anns = scene.annotations;
  ASSERT_FALSE(anns.empty());
  double gmax = 0.0;
  for (double v : g.gradient.data) gmax = std::max(gmax, std::abs(v));
  constexpr double kStep = 1e-3;
  int checked = 0;
  while (checked < 20) {
    const auto r = pixel_extent(anns[rng() % anns.size()].box, 128, 128);
    const int x = r.left + static_cast<int>(rng() % r.width), y = r.top + static_cast<int>(rng() % r.height);
    const int c = static_cast<int>(rng() % 3);
    Image plus = scene.image, minus = scene.image;
    plus.at(c, y, x) += kStep;
    minus.at(c, y, x) -= kStep;
    const double fd = (value(plus) - value(minus)) / (2 * kStep);
    const double an = g.gradient.at(c, y, x);
    // Relative to the larger magnitude, floored at a small fraction of the
    // largest gradient so near-zero entries are not judged on round-off.
    const double scale = std::max({std::abs(fd), std::abs(an), 1e-3 * gmax});
    EXPECT_LT(std::abs(fd - an) / scale, 1e-3) << "pixel " << c << "," << y << "," << x << " fd " << fd << " an " << an;
    ++checked;
  }
}

TEST(ToyDetector, GradientIsLinearInLossScale) {
  const ToyDetector m({}, 2);
  const auto img = random_image(128, 128, 5);
  const auto base = linear_functional(m.forward(img), 1);
  const double c = -3.7;
  LossFunctional scaled = [&](const RawOutputs& r, RawGradient& g) {
    RawGradient tmp = RawGradient::zeros_like(r);
    const double v = base(r, tmp);
    for (std::size_t i = 0; i < g.boxes.size(); ++i)
      for (int k = 0; k < 4; ++k) g.boxes[i][k] += c * tmp.boxes[i][k];
    for (std::size_t i = 0; i < g.probs.size(); ++i) g.probs[i] += c * tmp.probs[i];
    return c * v;
  };
  const auto g1 = m.loss_gradient(img, base), g2 = m.loss_gradient(img, scaled);
  for (std::size_t i = 0; i < g1.gradient.size(); ++i) {
    const double want = c * g1.gradient.data[i];
    EXPECT_LE(std::abs(g2.gradient.data[i] - want), 1e-6 * std::abs(want) + 1e-15);
  }
}

TEST(ToyDetector, BoxOutputsChangeContinuously) {
  const auto& m = trained_model();
  const auto scene = eval_scenes(1, 72'000)[0];
  const auto before = m.forward(scene.image);
  ASSERT_FALSE(scene.annotations.empty());
  const auto r = pixel_extent(scene.annotations[0].box);
  Image bumped = scene.image;
  bumped.at(1, r.top + r.height / 2, r.left + r.width / 2) += 1e-3;
  const auto after = m.forward(bumped);
  for (int c = 0; c < before.cells(); ++c) {
    const auto& a = before.boxes[c];
    const auto& b = after.boxes[c];
    for (auto [u, v] : {std::pair{a.cx(), b.cx()}, {a.cy(), b.cy()}, {a.w(), b.w()}, {a.h(), b.h()}}) {
      ASSERT_TRUE(std::isfinite(v));
      EXPECT_LT(std::abs(u - v), 1.0);
    }
  }
}

TEST(ToyDetector, TrainedModelFindsInstances) {
  const auto& m = trained_model();
  int matched = 0, total = 0;
  for (const auto& s : eval_scenes(20)) {
    const auto d = m.detect(s.image);
    expect_valid(d, 3, 128, 128);
    for (const auto& a : s.annotations) {
      ++total;
      matched += match_best(a.box, d).iou >= 0.5;
    }
  }
  EXPECT_GE(matched, 0.8 * total);
}

TEST(ToyDetector, TrainedModelIgnoresBackground) {
  const auto& m = trained_model();
  SceneGenConfig g;
  g.num_clusters = 0;
  g.seed = 123;
  int empty = 0;
  for (const auto& s : generate_scenes(g, 10)) empty += m.detect(s.image).empty();
  EXPECT_GE(empty, 9);
}

TEST(TrainToy, ZeroBudgetLeavesModelUnchanged) {
  ToyDetector m({}, 8);
  const auto before = m.forward(random_image(128, 128, 6));
  const auto val = eval_scenes(3);
  TrainBudget b;
  b.epochs = 0;
  const auto res = train_toy(m, eval_scenes(2, 80'000), val, b);
  EXPECT_EQ(res.steps, 0);
  EXPECT_EQ(res.val_map, evaluate_map(m, val));
  EXPECT_EQ(m.forward(random_image(128, 128, 6)).probs, before.probs);
}

TEST(TrainToy, SameSeedSameResult) {
  const auto train = eval_scenes(16, 81'000), val = eval_scenes(4, 82'000);
  TrainBudget b;
  b.epochs = 1;
  ToyDetector a({}, 4), c({}, 4);
  const auto ra = train_toy(a, train, val, b), rc = train_toy(c, train, val, b);
  EXPECT_EQ(ra.val_map, rc.val_map);
  EXPECT_EQ(ra.epoch_loss, rc.epoch_loss);
}

TEST(TrainToy, GateFailureRaises) {
  const auto train = eval_scenes(4, 83'000), val = eval_scenes(4, 84'000);
  TrainBudget b;
  b.epochs = 1;
  b.min_val_map = 0.99;
  ToyDetector m({}, 4);
  EXPECT_THROW(train_toy(m, train, val, b), TrainingGateError);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto& m = trained_model();
  const auto path = (std::filesystem::temp_directory_path() / ("tpa_ckpt_" + std::to_string(::getpid()))).string();
  save_checkpoint(path, m);
  const auto back = load_checkpoint(path);
  const auto img = eval_scenes(1)[0].image;
  EXPECT_EQ(back.forward(img).probs, m.forward(img).probs);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = (std::filesystem::temp_directory_path() / ("tpa_bad_" + std::to_string(::getpid()))).string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOTACHECKPOINT";
  }
  EXPECT_THROW(load_checkpoint(path), LoadError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), LoadError);
}

TEST(CountingDetector, CountsEveryForwardPass) {
  const ToyDetector m({}, 1);
  CountingDetector c(m);
  const auto img = random_image(128, 128, 1);
  c.forward(img);
  c.detect(img, SourceTag::clean);
  c.loss_gradient(img, [](const RawOutputs&, RawGradient&) { return 0.0; }, "x");
  EXPECT_EQ(c.forwards(), 3);
  c.reset();
  EXPECT_EQ(c.forwards(), 0);
}
