// SPDX-License-Identifier: Apache-2.0
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sparsedet/checkpoint.hpp"
#include "sparsedet/config.hpp"
#include "sparsedet/errors.hpp"
#include "sparsedet/gradcheck_suite.hpp"
#include "sparsedet/harness.hpp"
#include "sparsedet/selftest.hpp"

namespace fs = std::filesystem;
using namespace sparsedet;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct RunFlags {
  std::string config;
  std::optional<std::string> seed, steps, attn_mode, dcw, scenes;
  std::string out;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "key = value settings file");
  cmd->add_option("--seed", f.seed, "model and training-stream seed");
  cmd->add_option("--steps", f.steps, "training steps");
  cmd->add_option("--attn-mode", f.attn_mode, "full | none | iou | iou-esa");
  cmd->add_option("--dcw", f.dcw, "on | off");
  cmd->add_option("--scenes", f.scenes, "held-out evaluation scenes");
  cmd->add_option("--out", f.out, "output directory");
}

// Defaults, then the config file, then flags.
RunConfig resolve_config(const RunFlags& f) {
  RunConfig cfg;
  if (!f.config.empty()) load_config_file(cfg, f.config);
  auto set = [&](const char* key, const std::optional<std::string>& v) {
    if (v) apply_setting(cfg, key, *v);
  };
  set("seed", f.seed);
  set("steps", f.steps);
  set("attn_mode", f.attn_mode);
  set("dcw", f.dcw);
  set("eval_scenes", f.scenes);
  cfg.finalize();
  return cfg;
}

std::string format_ap(const std::optional<double>& ap) {
  if (!ap) return "n/a (no targets)";
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << *ap;
  return os.str();
}

int cmd_selftest() {
  const auto results = run_selftest();
  write_selftest_table(std::cout, results);
  return all_passed(results) ? 0 : kExitFailure;
}

int cmd_gradcheck(const std::string& scope_name) {
  GradScope scope;
  try {
    scope = parse_grad_scope(scope_name);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  const auto entries = run_gradcheck_suite(scope);
  write_gradcheck_table(std::cout, entries);
  for (const auto& e : entries) {
    if (!e.pass()) return kExitFailure;
  }
  return 0;
}

int cmd_train(const RunFlags& f) {
  const RunConfig cfg = resolve_config(f);
  std::optional<fs::path> out;
  if (!f.out.empty()) out = fs::path(f.out);
  const TrainResult r = run_training(cfg, out, &std::cout);
  std::cout << "AP@0.5 on " << cfg.eval_scenes << " held-out scenes: " << format_ap(r.ap)
            << '\n';
  return 0;
}

int cmd_eval(const RunFlags& f) {
  if (f.out.empty()) throw InputError("eval needs --out DIR holding checkpoint.bin");
  const RunConfig cfg = resolve_config(f);
  ModelState state = ModelState::create(cfg.detector, cfg.seed);
  load_checkpoint(fs::path(f.out) / "checkpoint.bin", state.store.params());
  std::cout << "AP@0.5 on " << cfg.eval_scenes
            << " held-out scenes: " << format_ap(evaluate_model(state, cfg, cfg.eval_scenes))
            << '\n';
  return 0;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_ablate(const RunFlags& f, const std::string& modes, const std::string& dcw,
               std::size_t seeds) {
  const RunConfig base = resolve_config(f);
  std::vector<AttnMode> mode_list;
  for (const auto& m : split_list(modes)) mode_list.push_back(parse_attn_mode(m));
  std::vector<bool> dcw_list;
  for (const auto& d : split_list(dcw)) {
    if (d != "on" && d != "off") throw InputError("--dcw-grid takes on/off values");
    dcw_list.push_back(d == "on");
  }
  std::vector<std::uint64_t> seed_list;
  for (std::size_t i = 0; i < seeds; ++i) seed_list.push_back(base.seed + i);
  const AblationGrid grid = AblationGrid::product(mode_list, dcw_list, seed_list);
  grid.validate();

  std::vector<CellResult> results;
  for (const auto& cell : grid.cells) {
    results.push_back(run_cell(base, cell));
    std::cout << attn_mode_name(cell.attn_mode) << " dcw=" << (cell.dcw_enabled ? "on" : "off")
              << " seed=" << cell.seed << "  AP " << format_ap(results.back().ap) << '\n';
  }
  const auto rows = summarize_ablation(results);
  std::cout << '\n';
  write_ablation_text(std::cout, rows);
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    std::ofstream csv(fs::path(f.out) / "ablation.csv");
    write_ablation_csv(csv, rows);
    std::ofstream txt(fs::path(f.out) / "ablation.txt");
    write_ablation_text(txt, rows);
    if (!csv || !txt) throw InputError("cannot write into " + f.out);
  }
  return 0;
}

int cmd_bench(const RunFlags& f) {
  RunFlags flags = f;
  if (!flags.steps) flags.steps = "20";
  const RunConfig cfg = resolve_config(flags);
  using clock = std::chrono::steady_clock;
  ModelState state = ModelState::create(cfg.detector, cfg.seed);
  Optimizer opt(cfg.optim);
  std::vector<Scene> scenes;
  for (std::size_t i = 0; i < cfg.steps; ++i) {
    scenes.push_back(generate_scene(train_scene_spec(cfg, i)));
  }
  auto t0 = clock::now();
  for (const auto& s : scenes) train_step(s.targets, s.feature_map, state, cfg.detector, opt);
  const double train_s = std::chrono::duration<double>(clock::now() - t0).count();
  t0 = clock::now();
  for (const auto& s : scenes) detect(s.feature_map, state, cfg.detector);
  const double detect_s = std::chrono::duration<double>(clock::now() - t0).count();
  const double n = static_cast<double>(std::max<std::size_t>(1, cfg.steps));
  std::cout << std::fixed << std::setprecision(2) << "scenes        " << cfg.steps << '\n'
            << "train step    " << 1e3 * train_s / n << " ms\n"
            << "inference     " << 1e3 * detect_s / n << " ms\n"
            << "2000 steps    ~" << std::setprecision(0) << 2000 * train_s / n << " s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse query-based detector with IoU-enhanced attention"};
  app.require_subcommand(1);
  RunFlags flags;

  app.add_subcommand("selftest", "run every module's invariant checks");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string scope = "primitives";
  gradcheck->add_option("--scope", scope, "primitives | modules | full");
  auto* train = app.add_subcommand("train", "train and evaluate one model");
  add_run_flags(train, flags);
  auto* eval = app.add_subcommand("eval", "evaluate the checkpoint in --out");
  add_run_flags(eval, flags);
  auto* ablate = app.add_subcommand("ablate", "attention mode x channel weighting grid");
  add_run_flags(ablate, flags);
  std::string modes = "full,iou-esa", dcw_grid = "on,off";
  std::size_t seeds = 5;
  ablate->add_option("--modes", modes, "comma-separated attention modes");
  ablate->add_option("--dcw-grid", dcw_grid, "comma-separated on/off values");
  ablate->add_option("--seeds", seeds, "seeds per cell, counting up from --seed");
  auto* bench = app.add_subcommand("bench", "time training and inference steps");
  add_run_flags(bench, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "selftest") return cmd_selftest();
    if (name == "gradcheck") return cmd_gradcheck(scope);
    if (name == "train") return cmd_train(flags);
    if (name == "eval") return cmd_eval(flags);
    if (name == "ablate") return cmd_ablate(flags, modes, dcw_grid, seeds);
    if (name == "bench") return cmd_bench(flags);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitFailure;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ModeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
