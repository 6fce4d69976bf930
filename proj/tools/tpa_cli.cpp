// Command-line front end: gen-data, train, attack, ablate, plot, verify.
// Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tpa/tpa.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

struct Overrides {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, Overrides& o, bool needs_config) {
  auto* c = cmd->add_option("--config", o.config, "run configuration (JSON)");
  if (needs_config) c->required();
  cmd->add_option("--out", o.out, "output root, overrides out_dir");
  cmd->add_option("--seed", o.seed, "base seed, overrides seed");
  cmd->add_option("--workers", o.workers, "worker threads, overrides workers");
}

tpa::RunConfig resolve_config(const Overrides& o) {
  tpa::RunConfig cfg = tpa::load_run_config(o.config);
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.seed) tpa::apply_seed(cfg, *o.seed);
  if (o.workers) cfg.workers = *o.workers;
  return cfg;
}

void print_metrics(const tpa::AggregateMetrics& m) {
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  std::cout << "mAP " << show(m.map) << " (clean " << show(m.clean_map) << ")  recall " << show(m.recall)
            << " (clean " << show(m.clean_recall) << ")  l0 " << m.mean_l0 << "  l2 " << m.mean_l2
            << "  success " << m.success_rate << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch attacks on object detectors in synthetic aerial scenes"};
  app.require_subcommand(1);

  Overrides gen_o, train_o, attack_o, ablate_o, verify_o;
  std::string plot_report, plot_out, verify_dir;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (PNGs + manifest)");
  add_common(gen, gen_o, true);
  auto* train = app.add_subcommand("train", "train the toy detector and write model.bin");
  add_common(train, train_o, true);
  auto* attack = app.add_subcommand("attack", "attack every scene and write report.json, adv/, plots/");
  add_common(attack, attack_o, true);
  auto* ablate = app.add_subcommand("ablate", "run the selector x box-loss x scheme grid, write table.csv");
  add_common(ablate, ablate_o, true);
  auto* plot = app.add_subcommand("plot", "render loss-trace and overlay figures from a report");
  plot->add_option("report", plot_report, "path to report.json")->required();
  plot->add_option("--out", plot_out, "figure directory (default: plots/ next to the report)");
  auto* verify = app.add_subcommand("verify", "re-check the perturbation invariants of a finished attack run");
  verify->add_option("run_dir", verify_dir, "run directory holding report.json, adv/ and masks/");
  add_common(verify, verify_o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (gen->parsed()) {
      const auto path = tpa::cmd_gen_data(resolve_config(gen_o));
      std::cout << "wrote " << path.string() << "\n";
    } else if (train->parsed()) {
      const auto cfg = resolve_config(train_o);
      const auto out = tpa::cmd_train(cfg, [](int epoch, double loss) {
        std::cerr << "epoch " << epoch + 1 << "  loss " << loss << "\n";
      });
      std::cout << "val mAP " << out.result.val_map << "\nwrote " << out.checkpoint.string() << "\n";
    } else if (attack->parsed()) {
      const auto cfg = resolve_config(attack_o);
      const auto report = tpa::cmd_attack(cfg);
      print_metrics(report.aggregate);
      std::cout << "wrote " << (cfg.run_dir() / "report.json").string() << "\n";
    } else if (ablate->parsed()) {
      const auto cfg = resolve_config(ablate_o);
      for (const auto& row : tpa::cmd_ablate(cfg)) {
        std::cout << tpa::to_string(row.selector) << " " << tpa::to_string(row.box_loss) << " "
                  << row.scheme.to_string() << "  ";
        print_metrics(row.metrics);
      }
      std::cout << "wrote " << (cfg.run_dir() / "table.csv").string() << "\n";
    } else if (plot->parsed()) {
      for (const auto& p : tpa::cmd_plot(plot_report, plot_out)) std::cout << "wrote " << p.string() << "\n";
    } else if (verify->parsed()) {
      std::filesystem::path dir = verify_dir;
      if (dir.empty()) {
        if (verify_o.config.empty()) throw tpa::ConfigError("verify needs a run directory or --config");
        dir = resolve_config(verify_o).run_dir();
      }
      const auto r = tpa::cmd_verify(dir);
      for (const auto& f : r.failures) std::cerr << "FAIL " << f << "\n";
      std::cout << r.scenes << " scenes checked, " << r.failures.size() << " violations\n";
      return r.ok() ? kOk : kRuntime;
    }
  } catch (const tpa::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}
