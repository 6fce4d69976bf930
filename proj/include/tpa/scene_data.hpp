#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpa/errors.hpp"
#include "tpa/geometry.hpp"
#include "tpa/image.hpp"
#include "tpa/png_io.hpp"

namespace tpa {

struct InstanceAnnotation {
  Box box;
  int label = 0;
};

struct Scene {
  std::string id;
  Image image;
  std::vector<InstanceAnnotation> annotations;
};

/// Parameters of the synthetic scene generator. Instances are grouped into
/// a few tight clusters on a mostly empty background.
struct SceneGenConfig {
  int image_size = 128;
  int num_clusters = 2;
  int min_instances_per_cluster = 2;
  int max_instances_per_cluster = 3;
  double cluster_radius = 32.0;
  int shape_classes = 3;
  double min_size = 16.0;
  double max_size = 96.0;
  double noise_std = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 64) throw ConfigError("image_size must be >= 64");
    if (shape_classes < 2) throw ConfigError("shape_classes must be >= 2");
    if (num_clusters < 0) throw ConfigError("num_clusters must be >= 0");
    if (min_instances_per_cluster < 1 || max_instances_per_cluster < min_instances_per_cluster)
      throw ConfigError("invalid instances_per_cluster range");
    if (!(min_size >= 2.0) || max_size < min_size || max_size > image_size)
      throw ConfigError("invalid size_range");
    if (!(cluster_radius >= 0.0)) throw ConfigError("cluster_radius must be >= 0");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  }
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Stripe phase per class: orientation cycles through horizontal, vertical
// and diagonal, and the period grows with the class index.
inline bool stripe_on(int label, int x, int y) {
  const int period = 4 + 2 * (label / 3);
  int u = 0;
  switch (label % 3) {
    case 0: u = y; break;
    case 1: u = x; break;
    default: u = x + y; break;
  }
  return (u % period) < period / 2;
}

struct Placed {
  int left, top, w, h, label;
};

inline bool overlaps(const Placed& a, const Placed& b, int gap) {
  return a.left < b.left + b.w + gap && b.left < a.left + a.w + gap && a.top < b.top + b.h + gap &&
         b.top < a.top + a.h + gap;
}

}  // namespace detail

/// Instance side length drawn uniformly within one of three scale buckets:
/// small (up to 32), medium (32 to 64) and large (above 64), clipped to the
/// configured size range.
inline double sample_side(const SceneGenConfig& cfg, int bucket, double u_size) {
  const double edges[4] = {cfg.min_size, std::clamp(32.0, cfg.min_size, cfg.max_size),
                           std::clamp(64.0, cfg.min_size, cfg.max_size), cfg.max_size};
  const int b = std::clamp(bucket, 0, 2);
  return edges[b] + (edges[b + 1] - edges[b]) * u_size;
}

/// Renders one scene. Deterministic in `cfg` (including the seed); pixel
/// values are quantized to multiples of 1/255 so that a PNG round trip is
/// lossless. Annotation boxes coincide with the drawn rectangles.
inline Scene generate_scene(const SceneGenConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const int S = cfg.image_size;
  constexpr int kAttempts = 50;
  constexpr int kInstanceTries = 200;
  constexpr int kGap = 2;
  // Scale bucket shares before the packing fallback, which turns part of the
  // medium and most of the large draws into smaller instances.
  constexpr double kSmallShare = 0.15, kMediumShare = 0.55;

  std::vector<detail::Placed> placed;
  bool ok = cfg.num_clusters == 0;
  for (int attempt = 0; attempt < kAttempts && !ok; ++attempt) {
    placed.clear();
    ok = true;
    // Cluster centers spread apart so the scene is sparse at large scale.
    std::vector<std::array<double, 2>> centers;
    const double margin = std::min(cfg.min_size, S / 4.0);
    const double min_sep = std::min(3.0 * cfg.cluster_radius, S / 2.0);
    for (int c = 0; c < cfg.num_clusters && ok; ++c) {
      bool found = false;
      for (int t = 0; t < kInstanceTries && !found; ++t) {
        const double x = margin + uni(rng) * (S - 2 * margin);
        const double y = margin + uni(rng) * (S - 2 * margin);
        found = std::all_of(centers.begin(), centers.end(), [&](const auto& o) {
          return std::hypot(o[0] - x, o[1] - y) >= min_sep;
        });
        if (found) centers.push_back({x, y});
      }
      ok = found;
    }
    for (int c = 0; c < cfg.num_clusters && ok; ++c) {
      const int count = cfg.min_instances_per_cluster +
                        static_cast<int>(uni(rng) * (cfg.max_instances_per_cluster -
                                                     cfg.min_instances_per_cluster + 1) - 1e-12);
      const std::size_t first = placed.size();
      for (int k = 0; k < count && ok; ++k) {
        bool done = false;
        const double ub = uni(rng);
        int bucket = ub < kSmallShare ? 0 : ub < kSmallShare + kMediumShare ? 1 : 2;
        for (int t = 0; t < kInstanceTries && !done; ++t) {
          // No room at this scale: fall back to the next smaller bucket.
          if (t > 0 && t % 50 == 0) bucket = std::max(0, bucket - 1);
          const double side = sample_side(cfg, bucket, uni(rng));
          const double aspect = std::exp((uni(rng) - 0.5) * 0.7);
          const int w = static_cast<int>(
              std::lround(std::clamp(side * std::sqrt(aspect), cfg.min_size, cfg.max_size)));
          const int h = static_cast<int>(
              std::lround(std::clamp(side / std::sqrt(aspect), cfg.min_size, cfg.max_size)));
          double cx = centers[c][0], cy = centers[c][1];
          if (placed.size() > first) {
            // Dense packing: put the instance beside a random member of the
            // cluster, separated by a small gap.
            const auto& q = placed[first + static_cast<std::size_t>(
                                               uni(rng) * (placed.size() - first) - 1e-12)];
            const double gap = kGap + 4.0 * uni(rng);
            const double slide = uni(rng) - 0.5;
            switch (static_cast<int>(uni(rng) * 4 - 1e-12)) {
              case 0: cx = q.left - gap - w / 2.0; cy = q.top + q.h / 2.0 + slide * q.h; break;
              case 1: cx = q.left + q.w + gap + w / 2.0; cy = q.top + q.h / 2.0 + slide * q.h; break;
              case 2: cy = q.top - gap - h / 2.0; cx = q.left + q.w / 2.0 + slide * q.w; break;
              default: cy = q.top + q.h + gap + h / 2.0; cx = q.left + q.w / 2.0 + slide * q.w; break;
            }
            if (std::hypot(cx - centers[c][0], cy - centers[c][1]) > cfg.cluster_radius + 0.5 * std::max(w, h))
              continue;
          }
          detail::Placed p{static_cast<int>(std::lround(cx - w / 2.0)),
                           static_cast<int>(std::lround(cy - h / 2.0)), w, h,
                           static_cast<int>(uni(rng) * cfg.shape_classes - 1e-12)};
          if (p.left < 0 || p.top < 0 || p.left + w > S || p.top + h > S) {
            if (placed.size() > first) continue;
            p.left = std::clamp(p.left, 0, S - w);
            p.top = std::clamp(p.top, 0, S - h);
          }
          const bool clear = std::none_of(placed.begin(), placed.end(),
                                          [&](const auto& q) { return detail::overlaps(p, q, kGap); });
          if (clear) {
            placed.push_back(p);
            done = true;
          }
        }
        ok = done;
      }
    }
  }
  if (!ok) {
    throw GenerationError("could not pack instances after " + std::to_string(kAttempts) +
                          " attempts (seed " + std::to_string(cfg.seed) + ")");
  }

  Scene scene;
  scene.id = "scene_" + std::to_string(cfg.seed);
  scene.image = Image(3, S, S);
  Image& img = scene.image;

  // Low-frequency background: bilinear interpolation of a coarse random grid.
  constexpr int kCoarse = 5;
  std::array<std::array<std::array<double, 3>, kCoarse>, kCoarse> coarse{};
  for (auto& row : coarse)
    for (auto& cell : row) {
      const double base = 0.35 + 0.2 * uni(rng);
      cell = {base + 0.05 * (uni(rng) - 0.5), base + 0.05 * uni(rng), base - 0.05 * uni(rng)};
    }
  for (int y = 0; y < S; ++y) {
    const double fy = static_cast<double>(y) / (S - 1) * (kCoarse - 1);
    const int y0 = std::min(static_cast<int>(fy), kCoarse - 2);
    const double ty = fy - y0;
    for (int x = 0; x < S; ++x) {
      const double fx = static_cast<double>(x) / (S - 1) * (kCoarse - 1);
      const int x0 = std::min(static_cast<int>(fx), kCoarse - 2);
      const double tx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = (1 - ty) * ((1 - tx) * coarse[y0][x0][c] + tx * coarse[y0][x0 + 1][c]) +
                          ty * ((1 - tx) * coarse[y0 + 1][x0][c] + tx * coarse[y0 + 1][x0 + 1][c]);
      }
    }
  }

  for (const auto& p : placed) {
    const double hue = static_cast<double>(p.label) / cfg.shape_classes;
    // Muted colors close to the background brightness, like vehicles and
    // roofs seen from above; a bright saturated palette makes the toy
    // detector far more robust than real ones.
    const double value = 0.5 + 0.15 * (uni(rng) - 0.5);
    const auto base = detail::hsv_to_rgb(hue, 0.25, value);
    for (int y = p.top; y < p.top + p.h; ++y)
      for (int x = p.left; x < p.left + p.w; ++x) {
        const double mod = detail::stripe_on(p.label, x - p.left, y - p.top) ? 1.0 : 0.88;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = base[c] * mod;
      }
    scene.annotations.push_back(
        {Box::corners(p.left, p.top, p.left + p.w, p.top + p.h), p.label});
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& v : img.data) v = quantize_u8(v + cfg.noise_std * noise(rng));
  return scene;
}

/// Header of a dataset manifest.
struct DatasetInfo {
  int classes = 0;
  int height = 0;
  int width = 0;
};

struct Dataset {
  DatasetInfo info;
  std::vector<Scene> scenes;
};

/// Writes `dir/images/<id>.png` for every scene plus `dir/manifest.json`.
inline void save_dataset(const std::filesystem::path& dir, const std::vector<Scene>& scenes,
                         const DatasetInfo& info) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw Error("cannot create dataset directory " + dir.string() + ": " + ec.message());
  nlohmann::ordered_json records = nlohmann::ordered_json::array();
  for (const auto& s : scenes) {
    const std::string rel = "images/" + s.id + ".png";
    write_png((dir / rel).string(), to_rgb8(s.image));
    nlohmann::ordered_json inst = nlohmann::ordered_json::array();
    for (const auto& a : s.annotations) {
      inst.push_back({{"cx", a.box.cx()},
                      {"cy", a.box.cy()},
                      {"w", a.box.w()},
                      {"h", a.box.h()},
                      {"label", a.label}});
    }
    records.push_back({{"id", s.id}, {"image", rel}, {"instances", std::move(inst)}});
  }
  nlohmann::ordered_json doc;
  doc["classes"] = info.classes;
  doc["image_size"] = {info.height, info.width};
  doc["records"] = std::move(records);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error("cannot write manifest in " + dir.string());
  out << doc.dump(2) << "\n";
}

/// Loads a manifest and its PNG images. Every problem is reported as a
/// LoadError naming the offending record.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open manifest: " + manifest_path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest is not valid JSON: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    if (!doc.is_object()) throw LoadError("manifest must be a JSON object");
    for (const char* key : {"classes", "image_size", "records"}) {
      if (!doc.contains(key)) throw LoadError(std::string("manifest header missing '") + key + "'");
    }
    ds.info.classes = doc.at("classes").get<int>();
    const auto& size = doc.at("image_size");
    if (!size.is_array() || size.size() != 2) throw LoadError("image_size must be [H, W]");
    ds.info.height = size[0].get<int>();
    ds.info.width = size[1].get<int>();
    if (ds.info.classes < 1 || ds.info.height < 1 || ds.info.width < 1)
      throw LoadError("manifest header has non-positive classes or image_size");
    if (!doc.at("records").is_array()) throw LoadError("'records' must be an array");
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed manifest header: " + std::string(e.what()));
  }

  const auto base = manifest_path.parent_path();
  const auto& records = doc.at("records");
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::string where = "record " + std::to_string(r);
    Scene scene;
    std::string image_rel;
    try {
      image_rel = rec.at("image").get<std::string>();
      scene.id = rec.contains("id") ? rec.at("id").get<std::string>()
                                    : std::filesystem::path(image_rel).stem().string();
      for (const auto& inst : rec.at("instances")) {
        const double cx = inst.at("cx").get<double>(), cy = inst.at("cy").get<double>();
        const double w = inst.at("w").get<double>(), h = inst.at("h").get<double>();
        const int label = inst.at("label").get<int>();
        Box box = Box::center(cx, cy, w, h);
        constexpr double kTol = 1e-9;
        if (box.x1() < -kTol || box.y1() < -kTol || box.x2() > ds.info.width + kTol ||
            box.y2() > ds.info.height + kTol) {
          throw LoadError(where + " (" + image_rel + "): box extends past the image bounds");
        }
        if (label < 0 || label >= ds.info.classes) {
          throw LoadError(where + " (" + image_rel + "): label " + std::to_string(label) +
                          " does not match declared class count " +
                          std::to_string(ds.info.classes));
        }
        scene.annotations.push_back({box, label});
      }
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(where + ": malformed record: " + e.what());
    } catch (const InvalidBoxError& e) {
      throw LoadError(where + ": " + e.what());
    }
    Rgb8 rgb;
    try {
      rgb = read_png((base / image_rel).string());
    } catch (const LoadError& e) {
      throw LoadError(where + ": " + e.what());
    }
    if (rgb.height != ds.info.height || rgb.width != ds.info.width) {
      throw LoadError(where + " (" + image_rel + "): image size does not match manifest header");
    }
    scene.image = to_image(rgb);
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

/// Scenes for seeds base_seed, base_seed+1, ... of the same config.
inline std::vector<Scene> generate_scenes(SceneGenConfig cfg, int count) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  const auto base = cfg.seed;
  for (int i = 0; i < count; ++i) {
    cfg.seed = base + static_cast<std::uint64_t>(i);
    out.push_back(generate_scene(cfg));
  }
  return out;
}

}  // namespace tpa
