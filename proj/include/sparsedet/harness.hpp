// SPDX-License-Identifier: Apache-2.0
//
// Training, evaluation and ablation drivers shared by the CLI and the
// tests.
//
// A training run writes into its output directory:
//   runs.jsonl      first line {"config": {...}}, then one record per log
//                   interval, then {"step": S, "ap": ..., "eval_scenes": K}
//   timing.jsonl    wall-clock seconds per logged step (not reproducible,
//                   hence kept apart from runs.jsonl)
//   checkpoint.bin  final parameters
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sparsedet/config.hpp"
#include "sparsedet/detector.hpp"

namespace sparsedet {

struct RunRecord {
  std::size_t step = 0;
  double loss = 0.0;  // mean over the steps since the previous record
  std::vector<double> stage_losses;
  double wall_seconds = 0.0;
};

struct TrainResult {
  ModelState state;
  std::vector<RunRecord> records;
  std::optional<double> ap;  // on cfg.eval_scenes held-out scenes
};

// Trains from cfg.seed for cfg.steps steps (one fresh scene per step), then
// evaluates. `out_dir`, when given, receives the files listed above;
// `progress`, when given, receives one human-readable line per record.
TrainResult run_training(const RunConfig& cfg,
                         const std::optional<std::filesystem::path>& out_dir,
                         std::ostream* progress = nullptr);

// AP@0.5 of the final-stage detections over the first `scenes` held-out
// scenes of cfg.
std::optional<double> evaluate_model(const ModelState& state,
                                     const RunConfig& cfg, std::size_t scenes);

std::string run_record_json(const RunRecord& r);
std::string config_json(const RunConfig& cfg);

struct AblationCell {
  AttnMode attn_mode = AttnMode::kIouEsa;
  bool dcw_enabled = true;
  DisentangleMode disentangle = DisentangleMode::kDcw;
  std::uint64_t seed = 1;

  friend bool operator==(const AblationCell&, const AblationCell&) = default;
};

struct AblationGrid {
  std::vector<AblationCell> cells;

  // Cartesian product of modes x dcw switches x seeds.
  static AblationGrid product(const std::vector<AttnMode>& modes,
                              const std::vector<bool>& dcw,
                              const std::vector<std::uint64_t>& seeds);
  // Throws InputError on an empty grid or duplicate cells.
  void validate() const;
};

struct CellResult {
  AblationCell cell;
  std::optional<double> ap;
};

CellResult run_cell(const RunConfig& base, const AblationCell& cell);

struct AblationRow {
  AttnMode attn_mode;
  bool dcw_enabled;
  DisentangleMode disentangle;
  std::vector<double> aps;  // ordered by seed
  double median_ap = 0.0;
};

// Groups results by (mode, dcw, disentangle) in a canonical order, so the
// summary does not depend on the order cells were run in.
std::vector<AblationRow> summarize_ablation(std::vector<CellResult> results);

struct DirectionCheck {
  std::string name;
  bool pass = false;
};
// The ordering checks that the rows allow: NO_MSA <= IOU_AS_ATTN <=
// FULL_MSA (dcw off) and IOU_ESA with dcw >= FULL_MSA without.
std::vector<DirectionCheck> direction_checks(const std::vector<AblationRow>& rows);

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);
void write_ablation_text(std::ostream& os, const std::vector<AblationRow>& rows);

double median(std::vector<double> values);

}  // namespace sparsedet
