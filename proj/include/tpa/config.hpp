#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpa/detector.hpp"
#include "tpa/errors.hpp"
#include "tpa/losses.hpp"
#include "tpa/optimizer.hpp"
#include "tpa/report_io.hpp"
#include "tpa/scene_data.hpp"
#include "tpa/segmentation.hpp"
#include "tpa/selection.hpp"
#include "tpa/training.hpp"

namespace tpa {

/// Where the scenes of a run come from: a manifest on disk, or the
/// generator with `count` consecutive seeds starting at `gen.seed`.
struct DatasetSource {
  std::optional<std::filesystem::path> manifest;
  SceneGenConfig gen;
  int count = 50;
};

struct TrainSetup {
  TrainBudget budget;
  int train_scenes = 2000;
  int val_scenes = 200;
};

struct AblationGrid {
  std::vector<Selector> selectors;
  std::vector<BoxLoss> box_losses;
  std::vector<GridScheme> schemes;
};

struct PlotToggles {
  bool loss_trace = true;
  bool overlay = true;
  int max_overlays = 16;
};

/// One file drives a whole experiment. Seeds of the generated data, the
/// training run and the random selector all derive from `seed`.
struct RunConfig {
  std::string run_id = "run";
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;
  int workers = 1;
  DatasetSource dataset;
  std::filesystem::path checkpoint;
  TrainSetup train;
  AttackConfig attack;
  AblationGrid ablate;
  PlotToggles plots;
  bool dataset_seed_pinned = false;  // dataset.generate.seed given explicitly

  std::filesystem::path run_dir() const { return out_dir / run_id; }
};

// Seed offsets keep training, validation and evaluation scenes disjoint for
// any evaluation count below one million.
inline constexpr std::uint64_t kTrainSeedOffset = 1'000'000;
inline constexpr std::uint64_t kValSeedOffset = 2'000'000;

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
T get(const json& j, const char* key, const std::string& where, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::pair<double, double> get_pair(const json& j, const char* key, const std::string& where,
                                          std::pair<double, double> fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw ConfigError(where + "." + key + ": expected [min, max]");
  return {v[0].get<double>(), v[1].get<double>()};
}

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline SceneGenConfig parse_gen(const json& j, SceneGenConfig g, int* count) {
  const std::string w = "dataset.generate";
  check_keys(j, {"image_size", "num_clusters", "instances_per_cluster", "cluster_radius", "shape_classes",
                 "size_range", "noise_std", "seed", "count"},
             w);
  g.image_size = get(j, "image_size", w, g.image_size);
  g.num_clusters = get(j, "num_clusters", w, g.num_clusters);
  const auto ipc = get_pair(j, "instances_per_cluster", w,
                            {g.min_instances_per_cluster, g.max_instances_per_cluster});
  g.min_instances_per_cluster = static_cast<int>(ipc.first);
  g.max_instances_per_cluster = static_cast<int>(ipc.second);
  g.cluster_radius = get(j, "cluster_radius", w, g.cluster_radius);
  g.shape_classes = get(j, "shape_classes", w, g.shape_classes);
  const auto sr = get_pair(j, "size_range", w, {g.min_size, g.max_size});
  g.min_size = sr.first;
  g.max_size = sr.second;
  g.noise_std = get(j, "noise_std", w, g.noise_std);
  g.seed = get(j, "seed", w, g.seed);
  *count = get(j, "count", w, *count);
  return g;
}

inline LossConfig parse_loss(const json& j, LossConfig l, const std::string& w) {
  if (j.contains("box_loss")) l.box_loss = parse_box_loss(get<std::string>(j, "box_loss", w, ""));
  l.cbl_tau = get(j, "cbl_tau", w, l.cbl_tau);
  l.cbl_iou_thresh = get(j, "cbl_iou_thresh", w, l.cbl_iou_thresh);
  l.cbl_score_thresh = get(j, "cbl_score_thresh", w, l.cbl_score_thresh);
  l.cls_score_thresh = get(j, "cls_score_thresh", w, l.cls_score_thresh);
  return l;
}

inline AttackConfig parse_attack(const json& j, AttackConfig a) {
  const std::string w = "attack";
  check_keys(j, {"epsilon", "alpha", "iterations", "scheme", "selector", "box_loss", "cbl_tau",
                 "cbl_iou_thresh", "cbl_score_thresh", "cls_score_thresh", "clamp_min_one", "descend",
                 "mask_fill"},
             w);
  a.epsilon = get(j, "epsilon", w, a.epsilon);
  a.alpha = get(j, "alpha", w, a.alpha);
  a.iterations = get(j, "iterations", w, a.iterations);
  if (j.contains("scheme")) a.scheme = GridScheme::parse(get<std::string>(j, "scheme", w, ""));
  if (j.contains("selector")) a.selector = parse_selector(get<std::string>(j, "selector", w, ""));
  a.loss = parse_loss(j, a.loss, w);
  a.clamp_min_one = get(j, "clamp_min_one", w, a.clamp_min_one);
  a.descend = get(j, "descend", w, a.descend);
  if (j.contains("mask_fill")) {
    const auto f = get<std::string>(j, "mask_fill", w, "");
    if (f == "zero") a.mask_fill = MaskFill::zero;
    else if (f == "mean") a.mask_fill = MaskFill::mean;
    else throw ConfigError("attack.mask_fill: expected 'zero' or 'mean', got '" + f + "'");
  }
  return a;
}

template <class T, class F>
std::vector<T> parse_list(const json& j, const char* key, const std::string& w, F parse) {
  std::vector<T> out;
  if (!j.contains(key)) return out;
  const auto& v = j.at(key);
  if (!v.is_array() || v.empty()) throw ConfigError(w + "." + key + ": expected a non-empty list");
  for (const auto& e : v) {
    if (!e.is_string()) throw ConfigError(w + "." + key + ": entries must be strings");
    out.push_back(parse(e.get<std::string>()));
  }
  return out;
}

}  // namespace detail

/// Parses a run configuration. Unknown keys anywhere are rejected, relative
/// paths resolve against `base_dir`.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  using namespace detail;
  RunConfig cfg;
  check_keys(j, {"run_id", "out_dir", "seed", "workers", "dataset", "detector", "train", "attack", "ablate",
                 "plots"},
             "config");
  cfg.run_id = get(j, "run_id", "config", cfg.run_id);
  if (j.contains("out_dir")) cfg.out_dir = resolve(base_dir, get<std::string>(j, "out_dir", "config", ""));
  cfg.seed = get(j, "seed", "config", cfg.seed);
  cfg.workers = get(j, "workers", "config", cfg.workers);

  bool gen_seed_given = false;
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"manifest", "generate"}, "dataset");
    if (d.contains("manifest") && d.contains("generate"))
      throw ConfigError("dataset: give either 'manifest' or 'generate', not both");
    if (d.contains("manifest"))
      cfg.dataset.manifest = resolve(base_dir, get<std::string>(d, "manifest", "dataset", ""));
    if (d.contains("generate")) {
      cfg.dataset.gen = parse_gen(d.at("generate"), cfg.dataset.gen, &cfg.dataset.count);
      gen_seed_given = d.at("generate").contains("seed");
    }
  }
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    check_keys(d, {"checkpoint"}, "detector");
    cfg.checkpoint = resolve(base_dir, get<std::string>(d, "checkpoint", "detector", ""));
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    const std::string w = "train";
    check_keys(t, {"train_scenes", "val_scenes", "epochs", "batch_size", "learning_rate", "positive_weight",
                   "box_weight", "label_smoothing", "min_val_map"},
               w);
    auto& b = cfg.train.budget;
    cfg.train.train_scenes = get(t, "train_scenes", w, cfg.train.train_scenes);
    cfg.train.val_scenes = get(t, "val_scenes", w, cfg.train.val_scenes);
    b.epochs = get(t, "epochs", w, b.epochs);
    b.batch_size = get(t, "batch_size", w, b.batch_size);
    b.learning_rate = get(t, "learning_rate", w, b.learning_rate);
    b.positive_weight = get(t, "positive_weight", w, b.positive_weight);
    b.box_weight = get(t, "box_weight", w, b.box_weight);
    b.label_smoothing = get(t, "label_smoothing", w, b.label_smoothing);
    b.min_val_map = get(t, "min_val_map", w, 0.90);
  } else {
    cfg.train.budget.min_val_map = 0.90;
  }
  if (j.contains("attack")) cfg.attack = parse_attack(j.at("attack"), cfg.attack);
  if (j.contains("ablate")) {
    const auto& a = j.at("ablate");
    check_keys(a, {"selectors", "box_losses", "schemes"}, "ablate");
    cfg.ablate.selectors = parse_list<Selector>(a, "selectors", "ablate", parse_selector);
    cfg.ablate.box_losses = parse_list<BoxLoss>(a, "box_losses", "ablate", parse_box_loss);
    cfg.ablate.schemes = parse_list<GridScheme>(a, "schemes", "ablate",
                                                [](const std::string& s) { return GridScheme::parse(s); });
  }
  if (j.contains("plots")) {
    const auto& p = j.at("plots");
    check_keys(p, {"loss_trace", "overlay", "max_overlays"}, "plots");
    cfg.plots.loss_trace = get(p, "loss_trace", "plots", cfg.plots.loss_trace);
    cfg.plots.overlay = get(p, "overlay", "plots", cfg.plots.overlay);
    cfg.plots.max_overlays = get(p, "max_overlays", "plots", cfg.plots.max_overlays);
  }
  cfg.dataset_seed_pinned = gen_seed_given;
  if (!gen_seed_given) cfg.dataset.gen.seed = cfg.seed;
  cfg.attack.seed = cfg.seed;
  cfg.train.budget.seed = cfg.seed;
  return cfg;
}

/// Command-line seed override, applied after parsing so that derived seeds
/// follow it. An explicit dataset seed in the file stays in force.
inline void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  if (!cfg.dataset_seed_pinned) cfg.dataset.gen.seed = seed;
  cfg.seed = seed;
  cfg.attack.seed = seed;
  cfg.train.budget.seed = seed;
}

enum class Command { gen_data, train, attack, ablate, plot, verify };

/// Checks value ranges, and the existence of the files a command reads.
inline void validate(const RunConfig& cfg, Command cmd) {
  if (cfg.run_id.empty() || cfg.run_id.find_first_of("/\\") != std::string::npos || cfg.run_id == "." ||
      cfg.run_id == "..")
    throw ConfigError("run_id must be a plain, non-empty name");
  if (cfg.workers < 1) throw ConfigError("workers must be >= 1");
  if (cfg.dataset.count < 0) throw ConfigError("dataset.generate.count must be >= 0");
  cfg.dataset.gen.validate();
  cfg.attack.validate();
  if (cfg.train.train_scenes < 0 || cfg.train.val_scenes < 0)
    throw ConfigError("train scene counts must be >= 0");
  if (cfg.train.budget.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(cfg.train.budget.learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
  if (!(cfg.train.budget.label_smoothing >= 0.0 && cfg.train.budget.label_smoothing < 1.0))
    throw ConfigError("train.label_smoothing must lie in [0,1)");
  if (cfg.plots.max_overlays < 0) throw ConfigError("plots.max_overlays must be >= 0");
  if (cmd == Command::gen_data && cfg.dataset.manifest)
    throw ConfigError("gen-data needs a 'generate' dataset, not a manifest");
  if (cfg.dataset.manifest && cmd != Command::gen_data && !std::filesystem::exists(*cfg.dataset.manifest))
    throw ConfigError("dataset manifest not found: " + cfg.dataset.manifest->string());
  if (cmd == Command::attack || cmd == Command::ablate) {
    if (cfg.checkpoint.empty()) throw ConfigError("detector.checkpoint is required");
    if (!std::filesystem::exists(cfg.checkpoint))
      throw ConfigError("detector checkpoint not found: " + cfg.checkpoint.string());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    std::ifstream in(path);
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

/// Echo of the attack settings, stored with every report.
inline nlohmann::json attack_config_json(const AttackConfig& a) {
  return {{"epsilon", a.epsilon},
          {"alpha", a.alpha},
          {"iterations", a.iterations},
          {"scheme", a.scheme.to_string()},
          {"selector", to_string(a.selector)},
          {"box_loss", to_string(a.loss.box_loss)},
          {"cbl_tau", a.loss.cbl_tau},
          {"cbl_iou_thresh", a.loss.cbl_iou_thresh},
          {"cbl_score_thresh", a.loss.cbl_score_thresh},
          {"cls_score_thresh", a.loss.cls_score_thresh},
          {"clamp_min_one", a.clamp_min_one},
          {"descend", a.descend},
          {"mask_fill", a.mask_fill == MaskFill::zero ? "zero" : "mean"}};
}

inline nlohmann::json dataset_source_json(const DatasetSource& d) {
  if (d.manifest) return {{"manifest", std::filesystem::absolute(*d.manifest).lexically_normal().string()}};
  const auto& g = d.gen;
  return {{"generate",
           {{"image_size", g.image_size},
            {"num_clusters", g.num_clusters},
            {"instances_per_cluster", {g.min_instances_per_cluster, g.max_instances_per_cluster}},
            {"cluster_radius", g.cluster_radius},
            {"shape_classes", g.shape_classes},
            {"size_range", {g.min_size, g.max_size}},
            {"noise_std", g.noise_std},
            {"seed", g.seed},
            {"count", d.count}}}};
}

inline DatasetSource dataset_source_from_json(const nlohmann::json& j) {
  DatasetSource d;
  detail::check_keys(j, {"manifest", "generate"}, "dataset");
  if (j.contains("manifest")) d.manifest = j.at("manifest").get<std::string>();
  if (j.contains("generate")) d.gen = detail::parse_gen(j.at("generate"), d.gen, &d.count);
  return d;
}

}  // namespace tpa
