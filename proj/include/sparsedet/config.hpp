// SPDX-License-Identifier: Apache-2.0
//
// Run configuration as flat key=value settings. Precedence is built-in
// defaults, then a config file, then command-line overrides; each layer is
// applied with apply_setting in order.
//
// File syntax: one `key = value` per line, `#` starts a comment, blank
// lines ignored. Unknown keys and unparsable values throw InputError.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sparsedet/detector.hpp"
#include "sparsedet/synth.hpp"

namespace sparsedet {

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t steps = 2000;
  std::size_t log_interval = 100;
  std::size_t eval_scenes = 200;
  std::uint64_t eval_seed = 7919;
  DetectorConfig detector;
  SceneSpec scene;  // seed field unused; scenes are derived per index
  OptimizerConfig optim;

  // Copies shared settings (image size, channel count) from the detector
  // into the scene spec and validates the whole.
  void finalize();
};

void apply_setting(RunConfig& cfg, const std::string& key,
                   const std::string& value);
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);
// Every setting as (key, value) text in a fixed order; feeding them back
// through apply_setting reproduces the config.
std::vector<std::pair<std::string, std::string>> config_entries(
    const RunConfig& cfg);

// Deterministic per-index scene seeds on separate training and evaluation
// streams.
std::uint64_t train_scene_seed(const RunConfig& cfg, std::size_t step);
std::uint64_t eval_scene_seed(const RunConfig& cfg, std::size_t index);
SceneSpec train_scene_spec(const RunConfig& cfg, std::size_t step);
SceneSpec eval_scene_spec(const RunConfig& cfg, std::size_t index);

}  // namespace sparsedet
