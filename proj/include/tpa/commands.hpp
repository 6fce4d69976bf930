#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tpa/config.hpp"
#include "tpa/detector.hpp"
#include "tpa/errors.hpp"
#include "tpa/evaluation.hpp"
#include "tpa/optimizer.hpp"
#include "tpa/plot.hpp"
#include "tpa/png_io.hpp"
#include "tpa/report_io.hpp"
#include "tpa/scene_data.hpp"
#include "tpa/training.hpp"

namespace tpa {

namespace fs = std::filesystem;

/// Runs fn(0..n-1) on up to `workers` threads. Results must be written to
/// per-index slots; if several calls throw, the one with the lowest index
/// is rethrown so failures do not depend on scheduling.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Scenes of a run, in manifest or seed order, plus the class count.
struct SceneSet {
  std::vector<Scene> scenes;
  int classes = 0;
};

inline SceneSet load_scenes(const DatasetSource& src) {
  if (src.manifest) {
    Dataset ds = load_dataset(*src.manifest);
    return {std::move(ds.scenes), ds.info.classes};
  }
  return {generate_scenes(src.gen, src.count), src.gen.shape_classes};
}

inline void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec || !fs::is_directory(p)) throw Error("cannot create directory " + p.string());
}

// ---------------------------------------------------------------- gen-data

inline fs::path cmd_gen_data(const RunConfig& cfg) {
  validate(cfg, Command::gen_data);
  const fs::path dir = cfg.run_dir() / "data";
  ensure_dir(dir);
  const auto scenes = generate_scenes(cfg.dataset.gen, cfg.dataset.count);
  save_dataset(dir, scenes, {cfg.dataset.gen.shape_classes, cfg.dataset.gen.image_size, cfg.dataset.gen.image_size});
  return dir / "manifest.json";
}

// ------------------------------------------------------------------- train

struct TrainOutcome {
  TrainResult result;
  fs::path checkpoint;
  fs::path metrics;
};

/// Trains a fresh toy detector on generated scenes with seeds disjoint from
/// the evaluation scenes, or on a manifest split 90/10 into train and val.
inline TrainOutcome cmd_train(const RunConfig& cfg, const std::function<void(int, double)>& on_epoch = {}) {
  validate(cfg, Command::train);
  std::vector<Scene> train, val;
  ToyDetectorConfig dcfg;
  if (cfg.dataset.manifest) {
    Dataset ds = load_dataset(*cfg.dataset.manifest);
    const std::size_t cut = ds.scenes.size() - ds.scenes.size() / 10;
    train.assign(ds.scenes.begin(), ds.scenes.begin() + static_cast<long>(cut));
    val.assign(ds.scenes.begin() + static_cast<long>(cut), ds.scenes.end());
    dcfg.num_classes = ds.info.classes;
    dcfg.image_height = ds.info.height;
    dcfg.image_width = ds.info.width;
  } else {
    SceneGenConfig g = cfg.dataset.gen;
    g.seed = cfg.seed + kTrainSeedOffset;
    train = generate_scenes(g, cfg.train.train_scenes);
    g.seed = cfg.seed + kValSeedOffset;
    val = generate_scenes(g, cfg.train.val_scenes);
    dcfg.num_classes = g.shape_classes;
    dcfg.image_height = dcfg.image_width = g.image_size;
  }
  ToyDetector model(dcfg, cfg.seed);
  const fs::path dir = cfg.run_dir();
  ensure_dir(dir);
  TrainOutcome out{{}, dir / "model.bin", dir / "train_metrics.json"};
  auto write_metrics = [&](const TrainResult& r, bool gate_ok) {
    nlohmann::json m = {{"val_map", r.val_map},
                        {"steps", r.steps},
                        {"epoch_loss", r.epoch_loss},
                        {"epochs", cfg.train.budget.epochs},
                        {"train_scenes", train.size()},
                        {"val_scenes", val.size()},
                        {"min_val_map", cfg.train.budget.min_val_map},
                        {"gate_passed", gate_ok},
                        {"seed", cfg.seed}};
    write_text(out.metrics, dump_json(m));
  };
  TrainBudget budget = cfg.train.budget;
  const double gate = budget.min_val_map;
  budget.min_val_map = 0.0;  // checked below, after the artifacts are written
  out.result = train_toy(model, train, val, budget, on_epoch);
  save_checkpoint(out.checkpoint, model);
  const bool gate_ok = budget.epochs <= 0 || gate <= 0.0 || out.result.val_map >= gate;
  write_metrics(out.result, gate_ok);
  if (!gate_ok) {
    throw TrainingGateError("validation mAP " + std::to_string(out.result.val_map) + " is below the required " +
                            std::to_string(gate));
  }
  return out;
}

// ------------------------------------------------------------------ attack

inline void check_compatible(const Detector& model, const SceneSet& set) {
  for (const auto& s : set.scenes) {
    if (s.image.height != model.input_height() || s.image.width != model.input_width())
      throw ConfigError("scene " + s.id + " is " + std::to_string(s.image.height) + "x" +
                        std::to_string(s.image.width) + " but the detector expects " +
                        std::to_string(model.input_height()) + "x" + std::to_string(model.input_width()));
  }
  if (set.classes > model.num_classes())
    throw ConfigError("dataset has " + std::to_string(set.classes) + " classes, detector " +
                      std::to_string(model.num_classes()));
}

/// Attacks every scene; outcomes come back in scene order whatever the
/// worker count.
inline std::vector<AttackOutcome> attack_scenes(const Detector& model, const std::vector<Scene>& scenes,
                                                const AttackConfig& cfg, int workers) {
  std::vector<AttackOutcome> out(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t i) { out[i] = run_attack(model, scenes[i], cfg); });
  return out;
}

/// 8-bit form of an adversarial image for a byte-valued clean image: every
/// change is rounded toward the clean value, so the stored image keeps the
/// support, budget and range invariants of the real-valued one.
inline Rgb8 adversarial_bytes(const Image& x, const Image& x_adv) {
  require_same_shape(x, x_adv, "adversarial_bytes");
  const Rgb8 base = to_rgb8(x);
  Rgb8 out = base;
  for (int y = 0; y < x.height; ++y)
    for (int xx = 0; xx < x.width; ++xx)
      for (int c = 0; c < 3; ++c) {
        const double d = (x_adv.at(c, y, xx) - x.at(c, y, xx)) * 255.0;
        const double m = d >= 0 ? std::floor(d + 1e-6) : -std::floor(-d + 1e-6);
        out.px(y, xx)[c] = static_cast<unsigned char>(std::clamp(base.px(y, xx)[c] + static_cast<int>(m), 0, 255));
      }
  return out;
}

inline Rgb8 mask_bytes(const Mask& m) {
  Rgb8 out(m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      for (int c = 0; c < 3; ++c) out.px(y, x)[c] = m.at(y, x) ? 255 : 0;
  return out;
}

inline nlohmann::json run_context(const RunConfig& cfg) {
  return {{"run_id", cfg.run_id},
          {"seed", cfg.seed},
          {"dataset", dataset_source_json(cfg.dataset)},
          {"attack", attack_config_json(cfg.attack)}};
}

inline void write_plots(const fs::path& plot_dir, const PlotToggles& plots, const std::vector<Scene>& scenes,
                        const std::vector<Image>& adv, const AttackReport& report) {
  if (!plots.loss_trace && !plots.overlay) return;
  ensure_dir(plot_dir);
  if (plots.loss_trace) write_png((plot_dir / "loss_trace.png").string(), plot_loss_traces(report.per_scene).raster());
  if (plots.overlay) {
    const std::size_t n = std::min(scenes.size(), static_cast<std::size_t>(plots.max_overlays));
    for (std::size_t i = 0; i < n; ++i) {
      write_png((plot_dir / ("overlay_" + scenes[i].id + ".png")).string(),
                plot_overlay(scenes[i].image, adv[i], report.per_scene[i]).raster());
    }
  }
}

/// Full attack run: report.json, adv/<scene>.png, masks/<scene>.png and
/// plots/ under the run directory. Returns the report.
inline AttackReport cmd_attack(const RunConfig& cfg) {
  validate(cfg, Command::attack);
  const ToyDetector model = load_checkpoint(cfg.checkpoint);
  const SceneSet set = load_scenes(cfg.dataset);
  check_compatible(model, set);
  auto outcomes = attack_scenes(model, set.scenes, cfg.attack, cfg.workers);

  const fs::path dir = cfg.run_dir();
  ensure_dir(dir / "adv");
  ensure_dir(dir / "masks");
  std::vector<SceneReport> reports;
  std::vector<Image> adv;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const Scene& s = set.scenes[i];
    const Rgb8 bytes = adversarial_bytes(s.image, outcomes[i].x_adv);
    write_png((dir / "adv" / (s.id + ".png")).string(), bytes);
    write_png((dir / "masks" / (s.id + ".png")).string(), mask_bytes(outcomes[i].map));
    adv.push_back(to_image(bytes));
    reports.push_back(std::move(outcomes[i].report));
  }
  AttackReport report = aggregate(std::move(reports));
  write_text(dir / "report.json", dump_json(report_json(report, run_context(cfg))));
  write_plots(dir / "plots", cfg.plots, set.scenes, adv, report);
  return report;
}

// ------------------------------------------------------------------ ablate

struct AblationRow {
  Selector selector;
  BoxLoss box_loss;
  GridScheme scheme;
  AggregateMetrics metrics;
};

inline std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os << std::setprecision(10) << *v;
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "selector,box_loss,scheme,map,recall,clean_map,clean_recall,mean_l0,mean_l2,success_rate\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    os << to_string(r.selector) << ',' << to_string(r.box_loss) << ",\"" << r.scheme.to_string() << "\","
       << fmt(m.map) << ',' << fmt(m.recall) << ',' << fmt(m.clean_map) << ',' << fmt(m.clean_recall) << ','
       << fmt(m.mean_l0) << ',' << fmt(m.mean_l2) << ',' << fmt(m.success_rate) << '\n';
  }
  return os.str();
}

/// Every combination of the configured selectors, box losses and schemes
/// (each axis defaults to the attack's own setting). Writes table.csv and
/// ablation.json.
inline std::vector<AblationRow> cmd_ablate(const RunConfig& cfg) {
  validate(cfg, Command::ablate);
  const ToyDetector model = load_checkpoint(cfg.checkpoint);
  const SceneSet set = load_scenes(cfg.dataset);
  check_compatible(model, set);
  auto axis = [](auto list, auto fallback) {
    if (list.empty()) list.push_back(fallback);
    return list;
  };
  const auto selectors = axis(cfg.ablate.selectors, cfg.attack.selector);
  const auto losses = axis(cfg.ablate.box_losses, cfg.attack.loss.box_loss);
  const auto schemes = axis(cfg.ablate.schemes, cfg.attack.scheme);

  std::vector<AblationRow> rows;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& sel : selectors)
    for (const auto& bl : losses)
      for (const auto& sch : schemes) {
        AttackConfig a = cfg.attack;
        a.selector = sel;
        a.loss.box_loss = bl;
        a.scheme = sch;
        auto outcomes = attack_scenes(model, set.scenes, a, cfg.workers);
        std::vector<SceneReport> reps;
        for (auto& o : outcomes) reps.push_back(std::move(o.report));
        rows.push_back({sel, bl, sch, aggregate_metrics(reps)});
        cells.push_back({{"attack", attack_config_json(a)}, {"aggregate", aggregate_json(rows.back().metrics)}});
      }
  const fs::path dir = cfg.run_dir();
  ensure_dir(dir);
  write_text(dir / "table.csv", ablation_csv(rows));
  nlohmann::json ctx = run_context(cfg);
  write_text(dir / "ablation.json",
             dump_json({{"schema_version", kReportSchemaVersion}, {"run", ctx}, {"cells", cells}}));
  return rows;
}

// -------------------------------------------------------------------- plot

/// Renders plots for a saved report into `out_dir` (default: plots/ next to
/// the report). Overlays need the run's adversarial images and dataset;
/// they are skipped when those are not available.
inline std::vector<fs::path> cmd_plot(const fs::path& report_path, fs::path out_dir = {},
                                      const PlotToggles& plots = {}) {
  const nlohmann::json j = read_json_file(report_path);
  const AttackReport report = report_from_json(j);
  const fs::path run_dir = report_path.parent_path().empty() ? fs::path(".") : report_path.parent_path();
  if (out_dir.empty()) out_dir = run_dir / "plots";
  ensure_dir(out_dir);
  std::vector<fs::path> written;
  if (plots.loss_trace) {
    written.push_back(out_dir / "loss_trace.png");
    write_png(written.back().string(), plot_loss_traces(report.per_scene).raster());
  }
  if (plots.overlay && j.at("run").contains("dataset")) {
    const SceneSet set = load_scenes(dataset_source_from_json(j.at("run").at("dataset")));
    const std::size_t n = std::min(set.scenes.size(), static_cast<std::size_t>(plots.max_overlays));
    for (std::size_t i = 0; i < n && i < report.per_scene.size(); ++i) {
      const fs::path adv_png = run_dir / "adv" / (set.scenes[i].id + ".png");
      if (!fs::exists(adv_png)) continue;
      written.push_back(out_dir / ("overlay_" + set.scenes[i].id + ".png"));
      write_png(written.back().string(),
                plot_overlay(set.scenes[i].image, to_image(read_png(adv_png.string())), report.per_scene[i]).raster());
    }
  }
  return written;
}

// ------------------------------------------------------------------ verify

struct VerifyResult {
  std::size_t scenes = 0;
  std::vector<std::string> failures;  // one line per violated invariant

  bool ok() const { return failures.empty(); }
};

/// Re-checks the optimizer invariants on the files of a finished attack run:
/// the clean scene (regenerated or reloaded), adv/<scene>.png and
/// masks/<scene>.png. Works on the stored 8-bit values, so the budget is
/// |delta| <= epsilon * 255 grey levels.
inline VerifyResult cmd_verify(const fs::path& run_dir) {
  const nlohmann::json j = read_json_file(run_dir / "report.json");
  const AttackReport report = report_from_json(j);
  const auto& run = detail::field(j, "run", "report");
  const double eps = detail::field(detail::field(run, "attack", "run"), "epsilon", "run.attack").get<double>();
  const SceneSet set = load_scenes(dataset_source_from_json(detail::field(run, "dataset", "run")));
  if (set.scenes.size() != report.per_scene.size())
    throw LoadError("report lists " + std::to_string(report.per_scene.size()) + " scenes, dataset has " +
                    std::to_string(set.scenes.size()));
  const int budget = static_cast<int>(std::floor(eps * 255.0 + 1e-6));
  VerifyResult r;
  for (std::size_t i = 0; i < set.scenes.size(); ++i) {
    const Scene& s = set.scenes[i];
    if (s.id != report.per_scene[i].scene_id)
      throw LoadError("scene order mismatch at " + std::to_string(i) + ": " + s.id);
    const Rgb8 x = to_rgb8(s.image);
    const Rgb8 adv = read_png((run_dir / "adv" / (s.id + ".png")).string());
    const Rgb8 mask = read_png((run_dir / "masks" / (s.id + ".png")).string());
    if (adv.height != x.height || adv.width != x.width || mask.height != x.height || mask.width != x.width)
      throw LoadError(s.id + ": stored image size differs from the scene");
    bool support = true, within = true;
    int worst = 0;
    for (int y = 0; y < x.height; ++y)
      for (int xx = 0; xx < x.width; ++xx) {
        const bool on = mask.px(y, xx)[0] != 0;
        for (int c = 0; c < 3; ++c) {
          const int d = std::abs(static_cast<int>(adv.px(y, xx)[c]) - static_cast<int>(x.px(y, xx)[c]));
          worst = std::max(worst, d);
          if (d != 0 && !on) support = false;
          if (d > budget) within = false;
        }
      }
    if (!support) r.failures.push_back(s.id + ": perturbation outside the attack map");
    if (!within)
      r.failures.push_back(s.id + ": change of " + std::to_string(worst) + " grey levels exceeds " +
                           std::to_string(budget));
    ++r.scenes;
  }
  return r;
}

}  // namespace tpa
