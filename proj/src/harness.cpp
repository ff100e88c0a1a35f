// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "sparsedet/checkpoint.hpp"
#include "sparsedet/errors.hpp"

namespace sparsedet {

using nlohmann::json;

std::string run_record_json(const RunRecord& r) {
  json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["stage_losses"] = r.stage_losses;
  return j.dump();
}

std::string config_json(const RunConfig& cfg) {
  json c = json::object();
  for (const auto& [k, v] : config_entries(cfg)) c[k] = v;
  json j;
  j["config"] = c;
  return j.dump();
}

std::optional<double> evaluate_model(const ModelState& state,
                                     const RunConfig& cfg, std::size_t scenes) {
  std::vector<std::vector<ScoredBox>> preds;
  std::vector<std::vector<Box>> targets;
  for (std::size_t i = 0; i < scenes; ++i) {
    const Scene scene = generate_scene(eval_scene_spec(cfg, i));
    std::vector<ScoredBox> p;
    for (const auto& d : detect(scene.feature_map, state, cfg.detector)) {
      p.push_back({d.box, d.score});
    }
    preds.push_back(std::move(p));
    targets.push_back(scene.targets.boxes.boxes);
  }
  return evaluate_ap(preds, targets, 0.5);
}

TrainResult run_training(const RunConfig& cfg_in,
                         const std::optional<std::filesystem::path>& out_dir,
                         std::ostream* progress) {
  RunConfig cfg = cfg_in;
  cfg.finalize();

  std::ofstream runs, timing;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    runs.open(*out_dir / "runs.jsonl");
    timing.open(*out_dir / "timing.jsonl");
    if (!runs || !timing) {
      throw InputError("cannot write into " + out_dir->string());
    }
    runs << config_json(cfg) << '\n';
  }

  TrainResult result{ModelState::create(cfg.detector, cfg.seed), {}, {}};
  Optimizer opt(cfg.optim);
  const auto start = std::chrono::steady_clock::now();
  double loss_sum = 0.0;
  std::vector<double> stage_sum(cfg.detector.num_stages, 0.0);
  std::size_t in_interval = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const Scene scene = generate_scene(train_scene_spec(cfg, step - 1));
    const TrainStepResult r = train_step(scene.targets, scene.feature_map,
                                         result.state, cfg.detector, opt);
    loss_sum += r.loss;
    for (std::size_t s = 0; s < stage_sum.size(); ++s) {
      stage_sum[s] += r.stage_losses[s];
    }
    ++in_interval;
    if (step % cfg.log_interval == 0 || step == cfg.steps) {
      RunRecord rec;
      rec.step = step;
      rec.loss = loss_sum / static_cast<double>(in_interval);
      for (double v : stage_sum) {
        rec.stage_losses.push_back(v / static_cast<double>(in_interval));
      }
      rec.wall_seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
      if (out_dir) {
        runs << run_record_json(rec) << '\n';
        timing << json{{"step", step}, {"wall_seconds", rec.wall_seconds}}.dump()
               << '\n';
      }
      if (progress) {
        std::ostringstream line;
        line << "step " << step << "  loss " << std::fixed << std::setprecision(4)
             << rec.loss << "  (" << std::setprecision(1) << rec.wall_seconds
             << " s)\n";
        *progress << line.str() << std::flush;
      }
      result.records.push_back(std::move(rec));
      loss_sum = 0.0;
      std::fill(stage_sum.begin(), stage_sum.end(), 0.0);
      in_interval = 0;
    }
  }

  result.ap = evaluate_model(result.state, cfg, cfg.eval_scenes);
  if (out_dir) {
    json fin;
    fin["step"] = cfg.steps;
    fin["ap"] = result.ap ? json(*result.ap) : json(nullptr);
    fin["eval_scenes"] = cfg.eval_scenes;
    runs << fin.dump() << '\n';
    save_checkpoint(*out_dir / "checkpoint.bin", result.state.store.params());
  }
  return result;
}

AblationGrid AblationGrid::product(const std::vector<AttnMode>& modes,
                                   const std::vector<bool>& dcw,
                                   const std::vector<std::uint64_t>& seeds) {
  AblationGrid g;
  for (AttnMode m : modes) {
    for (bool on : dcw) {
      for (std::uint64_t s : seeds) {
        g.cells.push_back({m, on,
                           on ? DisentangleMode::kDcw : DisentangleMode::kEntangled,
                           s});
      }
    }
  }
  return g;
}

void AblationGrid::validate() const {
  if (cells.empty()) throw InputError("ablation grid is empty");
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t j = i + 1; j < cells.size(); ++j) {
      if (cells[i] == cells[j]) throw InputError("ablation grid has duplicate cells");
    }
  }
}

CellResult run_cell(const RunConfig& base, const AblationCell& cell) {
  RunConfig cfg = base;
  cfg.seed = cell.seed;
  cfg.detector.attn_mode = cell.attn_mode;
  cfg.detector.dcw_enabled = cell.dcw_enabled;
  cfg.detector.disentangle = cell.disentangle;
  return {cell, run_training(cfg, std::nullopt).ap};
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<AblationRow> summarize_ablation(std::vector<CellResult> results) {
  auto key = [](const AblationCell& c) {
    return std::make_tuple(static_cast<int>(c.attn_mode), c.dcw_enabled,
                           static_cast<int>(c.disentangle));
  };
  std::sort(results.begin(), results.end(),
            [&](const CellResult& a, const CellResult& b) {
              return std::make_tuple(key(a.cell), a.cell.seed) <
                     std::make_tuple(key(b.cell), b.cell.seed);
            });
  std::vector<AblationRow> rows;
  for (const auto& r : results) {
    if (rows.empty() || rows.back().attn_mode != r.cell.attn_mode ||
        rows.back().dcw_enabled != r.cell.dcw_enabled ||
        rows.back().disentangle != r.cell.disentangle) {
      rows.push_back({r.cell.attn_mode, r.cell.dcw_enabled, r.cell.disentangle,
                      {}, 0.0});
    }
    // A scene set without targets scores as zero here.
    rows.back().aps.push_back(r.ap.value_or(0.0));
  }
  for (auto& row : rows) row.median_ap = median(row.aps);
  return rows;
}

std::vector<DirectionCheck> direction_checks(const std::vector<AblationRow>& rows) {
  auto find = [&](AttnMode m, bool dcw) -> const AblationRow* {
    for (const auto& r : rows) {
      if (r.attn_mode == m && r.dcw_enabled == dcw) return &r;
    }
    return nullptr;
  };
  std::vector<DirectionCheck> out;
  auto check = [&](const AblationRow* lo, const AblationRow* hi,
                   const std::string& name) {
    if (lo && hi) out.push_back({name, lo->median_ap <= hi->median_ap});
  };
  const auto* none = find(AttnMode::kNoMsa, false);
  const auto* iou = find(AttnMode::kIouAsAttn, false);
  const auto* full = find(AttnMode::kFullMsa, false);
  const auto* esa_dcw = find(AttnMode::kIouEsa, true);
  check(none, iou, "none <= iou");
  check(iou, full, "iou <= full");
  check(none, full, "none <= full");
  check(full, esa_dcw, "full <= iou-esa+dcw");
  return out;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  std::size_t max_seeds = 0;
  for (const auto& r : rows) max_seeds = std::max(max_seeds, r.aps.size());
  os << "attn_mode,dcw,disentangle,seeds,median_ap";
  for (std::size_t i = 0; i < max_seeds; ++i) os << ",ap_" << i;
  os << '\n';
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << attn_mode_name(r.attn_mode) << ',' << (r.dcw_enabled ? "on" : "off")
       << ',' << disentangle_name(r.disentangle) << ',' << r.aps.size() << ','
       << r.median_ap;
    for (double v : r.aps) os << ',' << v;
    for (std::size_t i = r.aps.size(); i < max_seeds; ++i) os << ',';
    os << '\n';
  }
}

void write_ablation_text(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << std::left << std::setw(10) << "attn" << std::setw(6) << "dcw"
     << std::setw(12) << "features" << std::setw(7) << "seeds"
     << "median AP@0.5\n";
  for (const auto& r : rows) {
    os << std::setw(10) << attn_mode_name(r.attn_mode) << std::setw(6)
       << (r.dcw_enabled ? "on" : "off") << std::setw(12)
       << disentangle_name(r.disentangle) << std::setw(7) << r.aps.size()
       << std::fixed << std::setprecision(4) << r.median_ap << std::defaultfloat
       << '\n';
  }
  const auto checks = direction_checks(rows);
  if (!checks.empty()) os << "direction checks (reported, not gating):\n";
  for (const auto& c : checks) {
    os << "  " << std::setw(24) << c.name << (c.pass ? "pass" : "FAIL") << '\n';
  }
  os << std::right;
}

}  // namespace sparsedet
