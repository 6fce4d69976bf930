#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace tpa;
using nlohmann::json;
namespace fs = std::filesystem;
using tpa::testing::trained_model;

namespace {

class Workspace : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / ("tpa_cli_" + std::string(info->name()) + "_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  std::string read(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  }

  fs::path checkpoint() {
    const auto p = dir_ / "model.bin";
    if (!fs::exists(p)) save_checkpoint(p.string(), trained_model());
    return p;
  }

  // Small attack run config: four generated scenes, short attack.
  json attack_json(const std::string& run_id) {
    return {{"run_id", run_id},
            {"out_dir", (dir_ / "out").string()},
            {"seed", 7},
            {"dataset", {{"generate", {{"count", 4}, {"seed", 60000}}}}},
            {"detector", {{"checkpoint", checkpoint().string()}}},
            {"attack", {{"iterations", 3}, {"scheme", "U(2)"}, {"selector", "fod"}}},
            {"plots", {{"max_overlays", 2}}}};
  }

  int run_cli(const std::string& args) {
    const std::string cmd = std::string(TPA_CLI) + " " + args + " >" + (dir_ / "stdout.txt").string() + " 2>" +
                            (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

}  // namespace

TEST(Config, Defaults) {
  const auto cfg = parse_run_config(json::object());
  EXPECT_EQ(cfg.run_id, "run");
  EXPECT_EQ(cfg.workers, 1);
  EXPECT_DOUBLE_EQ(cfg.attack.epsilon, 10.0 / 255.0);
  EXPECT_DOUBLE_EQ(cfg.attack.alpha, 1.0 / 255.0);
  EXPECT_EQ(cfg.attack.iterations, 10);
  EXPECT_EQ(cfg.attack.scheme, GridScheme::scale_adaptive(1, 2, 3));
  EXPECT_EQ(cfg.attack.selector, Selector::fod);
  EXPECT_EQ(cfg.attack.loss.box_loss, BoxLoss::bdl);
  EXPECT_FALSE(cfg.attack.clamp_min_one);
  EXPECT_DOUBLE_EQ(cfg.train.budget.min_val_map, 0.90);
}

TEST(Config, RejectsUnknownKeysAtEveryLevel) {
  for (const char* text :
       {R"({"colour": 1})", R"({"attack": {"eps": 0.1}})", R"({"dataset": {"generate": {"clusters": 2}}})",
        R"({"train": {"lr": 0.1}})", R"({"plots": {"svg": true}})", R"({"detector": {"path": "x"}})",
        R"({"ablate": {"selector": ["fod"]}})"}) {
    EXPECT_THROW(parse_run_config(json::parse(text)), ConfigError) << text;
  }
}

TEST(Config, RejectsBadValues) {
  for (const char* text : {R"j({"attack": {"scheme": "U(0)"}})j", R"({"attack": {"selector": "best"}})",
                           R"({"attack": {"box_loss": "giou"}})", R"({"attack": {"epsilon": "big"}})",
                           R"({"attack": {"mask_fill": "noise"}})", R"({"ablate": {"schemes": []}})",
                           R"({"dataset": {"generate": {"size_range": [16]}}})",
                           R"({"dataset": {"manifest": "m.json", "generate": {}}})"}) {
    EXPECT_THROW(parse_run_config(json::parse(text)), ConfigError) << text;
  }
  auto cfg = parse_run_config(json::parse(R"({"attack": {"alpha": 0.5}})"));
  EXPECT_THROW(validate(cfg, Command::gen_data), ConfigError);
  cfg = parse_run_config(json::parse(R"({"workers": 0})"));
  EXPECT_THROW(validate(cfg, Command::gen_data), ConfigError);
  cfg = parse_run_config(json::parse(R"({"run_id": "../x"})"));
  EXPECT_THROW(validate(cfg, Command::gen_data), ConfigError);
  cfg = parse_run_config(json::object());
  EXPECT_THROW(validate(cfg, Command::attack), ConfigError);
}

TEST(Config, SeedsDeriveFromTopLevelSeed) {
  auto cfg = parse_run_config(json::parse(R"({"seed": 5})"));
  EXPECT_EQ(cfg.dataset.gen.seed, 5u);
  EXPECT_EQ(cfg.attack.seed, 5u);
  apply_seed(cfg, 9);
  EXPECT_EQ(cfg.dataset.gen.seed, 9u);
  EXPECT_EQ(cfg.train.budget.seed, 9u);
  auto pinned = parse_run_config(json::parse(R"({"seed": 5, "dataset": {"generate": {"seed": 100}}})"));
  apply_seed(pinned, 9);
  EXPECT_EQ(pinned.dataset.gen.seed, 100u);
  EXPECT_EQ(pinned.attack.seed, 9u);
}

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  const auto cfg = parse_run_config(json::parse(R"({"out_dir": "o", "detector": {"checkpoint": "m.bin"}})"), "/a/b");
  EXPECT_EQ(cfg.out_dir, fs::path("/a/b/o"));
  EXPECT_EQ(cfg.checkpoint, fs::path("/a/b/m.bin"));
}

TEST(Report, SceneRoundTrip) {
  SceneReport s;
  s.scene_id = "scene_3";
  s.ground_truth = {{Box::center(10, 12, 8, 6), 2}};
  s.clean_detections = {Detection::make(Box::center(10.25, 12, 8, 6), {0.1, 0.2, 0.6}, 17)};
  s.adv_detections = {};
  s.success = {true};
  s.l0 = 0.0123;
  s.l2 = 0.75;
  s.mask_fraction = 0.02;
  LossBreakdown b;
  b.total = 0.9;
  b.cls = 0.4;
  b.box_term = 0.5;
  b.per_instance_best_iou = {0.5};
  s.loss_trace = {b, b};
  const auto back = scene_report_from_json(scene_report_json(s), "x");
  EXPECT_EQ(back.scene_id, s.scene_id);
  EXPECT_EQ(back.ground_truth[0].box.corner_form(), s.ground_truth[0].box.corner_form());
  EXPECT_EQ(back.clean_detections[0].class_probs, s.clean_detections[0].class_probs);
  EXPECT_EQ(back.clean_detections[0].anchor, 17);
  EXPECT_EQ(back.success, s.success);
  EXPECT_EQ(back.l0, s.l0);
  EXPECT_EQ(back.loss_trace.size(), 2u);
  EXPECT_EQ(back.loss_trace[1].per_instance_best_iou, b.per_instance_best_iou);
  EXPECT_EQ(dump_json(scene_report_json(back)), dump_json(scene_report_json(s)));
}

TEST(Report, MissingLossTraceNamesTheField) {
  SceneReport s;
  s.scene_id = "a";
  auto j = report_json(aggregate({s}));
  j["per_scene"][0].erase("loss_trace");
  try {
    report_from_json(j);
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("loss_trace"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("per_scene[0]"), std::string::npos) << e.what();
  }
}

TEST(Report, SchemaVersionChecked) {
  auto j = report_json(aggregate({}));
  j["schema_version"] = 99;
  EXPECT_THROW(report_from_json(j), LoadError);
}

TEST(ParallelFor, RethrowsLowestIndexFailure) {
  std::vector<int> seen(20, 0);
  try {
    parallel_for(20, 4, [&](std::size_t i) {
      seen[i] = 1;
      if (i == 5 || i == 11) throw std::runtime_error("fail " + std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "fail 5");
  }
}

TEST(AdversarialBytes, RoundsTowardClean) {
  Image x(3, 1, 2, 100.0 / 255);
  Image adv = x;
  adv.at(0, 0, 0) += 2.7 / 255;
  adv.at(1, 0, 0) -= 2.7 / 255;
  adv.at(2, 0, 1) += 10.0 / 255;
  const auto b = adversarial_bytes(x, adv);
  EXPECT_EQ(b.px(0, 0)[0], 102);
  EXPECT_EQ(b.px(0, 0)[1], 98);
  EXPECT_EQ(b.px(0, 1)[2], 110);
  EXPECT_EQ(b.px(0, 1)[0], 100);
}

TEST_F(Workspace, AttackReportIsIndependentOfWorkerCount) {
  auto j1 = attack_json("w1");
  auto cfg1 = parse_run_config(j1);
  cfg1.workers = 1;
  cmd_attack(cfg1);
  auto cfg3 = parse_run_config(attack_json("w3"));
  cfg3.workers = 3;
  cmd_attack(cfg3);
  const auto a = read(cfg1.run_dir() / "report.json");
  auto b = read(cfg3.run_dir() / "report.json");
  // Only the run id differs between the two documents.
  const auto pos = b.find("\"run_id\": \"w3\"");
  ASSERT_NE(pos, std::string::npos);
  b.replace(pos, 14, "\"run_id\": \"w1\"");
  EXPECT_EQ(a, b);
  for (const auto& s : report_from_json(json::parse(a)).per_scene) {
    EXPECT_EQ(read(cfg1.run_dir() / "adv" / (s.scene_id + ".png")), read(cfg3.run_dir() / "adv" / (s.scene_id + ".png")));
  }
  // Repeat into the same directory: identical bytes.
  cmd_attack(cfg1);
  EXPECT_EQ(read(cfg1.run_dir() / "report.json"), a);
}

TEST_F(Workspace, AttackWritesLayoutAndVerifies) {
  const auto cfg = parse_run_config(attack_json("layout"));
  const auto report = cmd_attack(cfg);
  const auto dir = cfg.run_dir();
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "loss_trace.png"));
  ASSERT_EQ(report.per_scene.size(), 4u);
  int overlays = 0;
  for (const auto& e : fs::directory_iterator(dir / "plots")) overlays += e.path().filename().string().rfind("overlay_", 0) == 0;
  EXPECT_EQ(overlays, 2);
  for (const auto& s : report.per_scene) {
    EXPECT_TRUE(fs::exists(dir / "adv" / (s.scene_id + ".png")));
    EXPECT_TRUE(fs::exists(dir / "masks" / (s.scene_id + ".png")));
  }
  const auto v = cmd_verify(dir);
  EXPECT_EQ(v.scenes, 4u);
  EXPECT_TRUE(v.ok());

  // Tamper: change a pixel outside the attack map of the first scene.
  const auto id = report.per_scene[0].scene_id;
  auto adv = read_png((dir / "adv" / (id + ".png")).string());
  const auto mask = read_png((dir / "masks" / (id + ".png")).string());
  bool done = false;
  for (int y = 0; y < adv.height && !done; ++y)
    for (int x = 0; x < adv.width && !done; ++x)
      if (mask.px(y, x)[0] == 0) {
        adv.px(y, x)[0] = static_cast<unsigned char>(adv.px(y, x)[0] ^ 1);
        done = true;
      }
  write_png((dir / "adv" / (id + ".png")).string(), adv);
  const auto bad = cmd_verify(dir);
  ASSERT_EQ(bad.failures.size(), 1u);
  EXPECT_NE(bad.failures[0].find(id), std::string::npos);
}

TEST_F(Workspace, PlotFromSavedReport) {
  const auto cfg = parse_run_config(attack_json("plot"));
  cmd_attack(cfg);
  const auto written = cmd_plot(cfg.run_dir() / "report.json", dir_ / "figs");
  EXPECT_EQ(written.size(), 1u + 4u);
  for (const auto& p : written) EXPECT_GT(fs::file_size(p), 0u);

  auto j = read_json_file(cfg.run_dir() / "report.json");
  j["per_scene"][1].erase("loss_trace");
  write_text(dir_ / "broken.json", dump_json(j));
  try {
    cmd_plot(dir_ / "broken.json", dir_ / "figs2");
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("loss_trace"), std::string::npos);
  }
}

TEST_F(Workspace, AblationTable) {
  auto j = attack_json("abl");
  j["dataset"]["generate"]["count"] = 2;
  j["ablate"] = {{"selectors", {"fod", "rd"}}, {"box_losses", {"bdl", "none"}}, {"schemes", {"U(2)"}}};
  const auto cfg = parse_run_config(j);
  const auto rows = cmd_ablate(cfg);
  ASSERT_EQ(rows.size(), 4u);
  const auto csv = read(cfg.run_dir() / "table.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "selector,box_loss,scheme,map,recall,clean_map,clean_recall,mean_l0,mean_l2,success_rate");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_NE(csv.find("rd,none,\"U(2)\","), std::string::npos);
  EXPECT_TRUE(fs::exists(cfg.run_dir() / "ablation.json"));
}

TEST_F(Workspace, GenDataThenAttackFromManifest) {
  json g = {{"run_id", "gen"}, {"out_dir", (dir_ / "out").string()},
            {"dataset", {{"generate", {{"count", 3}, {"seed", 61000}}}}}};
  const auto manifest = cmd_gen_data(parse_run_config(g));
  ASSERT_TRUE(fs::exists(manifest));
  auto j = attack_json("frommanifest");
  j["dataset"] = {{"manifest", manifest.string()}};
  const auto cfg = parse_run_config(j);
  const auto report = cmd_attack(cfg);
  ASSERT_EQ(report.per_scene.size(), 3u);
  EXPECT_EQ(report.per_scene[0].scene_id, "scene_61000");
  EXPECT_TRUE(cmd_verify(cfg.run_dir()).ok());
}

TEST_F(Workspace, CliExitCodes) {
  const auto unknown = write("unknown.json", R"({"run_id": "x", "bogus": 1})");
  EXPECT_EQ(run_cli("gen-data --config " + unknown.string()), 1);
  EXPECT_NE(read(dir_ / "stderr.txt").find("bogus"), std::string::npos);
  EXPECT_EQ(run_cli("attack --config " + (dir_ / "missing.json").string()), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("attack"), 1);

  const auto gen = write("gen.json", json{{"run_id", "g"}, {"dataset", {{"generate", {{"count", 2}}}}}}.dump());
  EXPECT_EQ(run_cli("gen-data --config " + gen.string() + " --out " + (dir_ / "o").string()), 0);
  EXPECT_TRUE(fs::exists(dir_ / "o" / "g" / "data" / "manifest.json"));

  const auto att = write("att.json", attack_json("cli").dump());
  EXPECT_EQ(run_cli("attack --config " + att.string() + " --workers 2 --seed 3"), 0);
  EXPECT_EQ(run_cli("verify " + (dir_ / "out" / "cli").string()), 0);
  EXPECT_EQ(run_cli("verify --config " + att.string()), 0);
  EXPECT_EQ(run_cli("plot " + (dir_ / "out" / "cli" / "report.json").string()), 0);
  // Runtime failure: report missing.
  EXPECT_EQ(run_cli("verify " + (dir_ / "nowhere").string()), 2);
}
