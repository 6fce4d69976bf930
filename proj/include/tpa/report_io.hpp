#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpa/errors.hpp"
#include "tpa/evaluation.hpp"
#include "tpa/geometry.hpp"
#include "tpa/scene_data.hpp"

namespace tpa {

inline constexpr int kReportSchemaVersion = 1;

namespace detail {

using nlohmann::json;

inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> opt_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline json box_json(const Box& b) { return {{"cx", b.cx()}, {"cy", b.cy()}, {"w", b.w()}, {"h", b.h()}}; }

inline Box box_from(const json& j) {
  return Box::center(j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("w").get<double>(),
                     j.at("h").get<double>());
}

inline json detection_json(const Detection& d) {
  return {{"box", box_json(d.box)},
          {"class_probs", d.class_probs},
          {"score", d.score},
          {"class", d.predicted_class()},
          {"anchor", d.anchor}};
}

inline Detection detection_from(const json& j) {
  return Detection::make(box_from(j.at("box")), j.at("class_probs").get<std::vector<double>>(),
                         j.value("anchor", -1));
}

inline json detections_json(const std::vector<Detection>& ds) {
  json a = json::array();
  for (const auto& d : ds) a.push_back(detection_json(d));
  return a;
}

inline std::vector<Detection> detections_from(const json& a) {
  std::vector<Detection> out;
  for (const auto& j : a) out.push_back(detection_from(j));
  return out;
}

inline const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key))
    throw LoadError(where + ": missing field '" + key + "'");
  return j.at(key);
}

}  // namespace detail

inline nlohmann::json aggregate_json(const AggregateMetrics& m) {
  using detail::opt_json;
  return {{"map", opt_json(m.map)},
          {"recall", opt_json(m.recall)},
          {"clean_map", opt_json(m.clean_map)},
          {"clean_recall", opt_json(m.clean_recall)},
          {"mean_l0", m.mean_l0},
          {"mean_l2", m.mean_l2},
          {"success_rate", m.success_rate}};
}

inline AggregateMetrics aggregate_from_json(const nlohmann::json& j) {
  using detail::opt_from;
  AggregateMetrics m;
  m.map = opt_from(j.at("map"));
  m.recall = opt_from(j.at("recall"));
  m.clean_map = opt_from(j.at("clean_map"));
  m.clean_recall = opt_from(j.at("clean_recall"));
  m.mean_l0 = j.at("mean_l0").get<double>();
  m.mean_l2 = j.at("mean_l2").get<double>();
  m.success_rate = j.at("success_rate").get<double>();
  return m;
}

inline nlohmann::json scene_report_json(const SceneReport& s) {
  using nlohmann::json;
  json gt = json::array();
  for (const auto& a : s.ground_truth) gt.push_back({{"box", detail::box_json(a.box)}, {"label", a.label}});
  json trace = json::array();
  for (const auto& b : s.loss_trace) {
    trace.push_back({{"total", b.total}, {"cls", b.cls}, {"box", b.box_term},
                     {"best_iou", b.per_instance_best_iou}});
  }
  const SceneEval clean{s.scene_id, s.clean_detections, s.ground_truth};
  return {{"scene_id", s.scene_id},
          {"ground_truth", gt},
          {"clean_detections", detail::detections_json(s.clean_detections)},
          {"adv_detections", detail::detections_json(s.adv_detections)},
          {"clean_map_contrib", detail::opt_json(map50(std::span(&clean, 1)))},
          {"success", s.success},
          {"l0", s.l0},
          {"l2", s.l2},
          {"mask_fraction", s.mask_fraction},
          {"nothing_to_attack", s.nothing_to_attack},
          {"loss_trace", trace}};
}

inline SceneReport scene_report_from_json(const nlohmann::json& j, const std::string& where) {
  using detail::field;
  SceneReport s;
  try {
    s.scene_id = field(j, "scene_id", where).get<std::string>();
    for (const auto& g : field(j, "ground_truth", where))
      s.ground_truth.push_back({detail::box_from(g.at("box")), g.at("label").get<int>()});
    s.clean_detections = detail::detections_from(field(j, "clean_detections", where));
    s.adv_detections = detail::detections_from(field(j, "adv_detections", where));
    s.success = field(j, "success", where).get<std::vector<bool>>();
    s.l0 = field(j, "l0", where).get<double>();
    s.l2 = field(j, "l2", where).get<double>();
    s.mask_fraction = field(j, "mask_fraction", where).get<double>();
    s.nothing_to_attack = field(j, "nothing_to_attack", where).get<bool>();
    for (const auto& b : field(j, "loss_trace", where)) {
      LossBreakdown lb;
      lb.total = b.at("total").get<double>();
      lb.cls = b.at("cls").get<double>();
      lb.box_term = b.at("box").get<double>();
      lb.per_instance_best_iou = b.value("best_iou", std::vector<double>{});
      s.loss_trace.push_back(std::move(lb));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(where + ": " + e.what());
  }
  return s;
}

/// Full report document. `context` carries run metadata (config echo,
/// dataset source) and is stored verbatim under "run".
inline nlohmann::json report_json(const AttackReport& r, const nlohmann::json& context = {}) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : r.per_scene) scenes.push_back(scene_report_json(s));
  return {{"schema_version", kReportSchemaVersion},
          {"run", context.is_null() ? nlohmann::json::object() : context},
          {"aggregate", aggregate_json(r.aggregate)},
          {"per_scene", scenes}};
}

inline AttackReport report_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema_version") || !j.at("schema_version").is_number_integer() ||
      j.at("schema_version").get<int>() != kReportSchemaVersion) {
    throw LoadError("report: unsupported or missing schema_version");
  }
  AttackReport r;
  try {
    r.aggregate = aggregate_from_json(detail::field(j, "aggregate", "report"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("report aggregate: ") + e.what());
  }
  const auto& scenes = detail::field(j, "per_scene", "report");
  for (std::size_t i = 0; i < scenes.size(); ++i)
    r.per_scene.push_back(scene_report_from_json(scenes[i], "per_scene[" + std::to_string(i) + "]"));
  return r;
}

/// Deterministic text form: sorted keys, two-space indent, trailing newline.
inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace tpa
