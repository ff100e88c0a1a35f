// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic detection scenes: crowded axis-aligned rectangles and a
// feature map standing in for backbone output.
//
// Geometry is sampled with integer draws only (see random.hpp), so a seed
// yields the same boxes on every platform. Each object stamps a separable
// triangular bump, peaking at its center and vanishing at its edges,
// scaled by a per-object channel signature with entries in [0.2, 1.0];
// i.i.d. N(0, sigma^2) noise is added on top.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "sparsedet/geometry.hpp"
#include "sparsedet/losses.hpp"
#include "sparsedet/random.hpp"
#include "sparsedet/roi_align.hpp"

namespace sparsedet {

inline constexpr double kFeatureNoiseSigma = 0.05;

struct SceneSpec {
  std::uint64_t seed = 0;
  int image_w = 96;
  int image_h = 96;
  int min_objects = 2;
  int max_objects = 5;
  // Probability that an object is placed next to an earlier one.
  double overlap_bias = 0.5;
  int min_size = 24;
  int max_size = 40;
  std::size_t channels = 32;
  double stride = 8.0;
  double noise_sigma = kFeatureNoiseSigma;

  // Throws InputError on impossible constraints.
  void validate() const;
};

struct Scene {
  Targets targets;
  FeatureMap feature_map;
};

Scene generate_scene(const SceneSpec& spec);

FeatureMap render_features(const Targets& targets, std::size_t channels,
                           double stride, Rng& rng,
                           double noise_sigma = kFeatureNoiseSigma);

struct ScoredBox {
  Box box;
  double score = 0.0;
};

// Single-threshold average precision over a set of scenes: predictions are
// ranked by score (ties broken by scene, then coordinates), each greedily
// claims the highest-IoU unclaimed target of its scene with IoU >= the
// threshold, and the all-point interpolated area under the precision/recall
// curve is returned. nullopt when there are no targets at all.
std::optional<double> evaluate_ap(
    const std::vector<std::vector<ScoredBox>>& predictions,
    const std::vector<std::vector<Box>>& targets, double iou_threshold = 0.5);

// targets.csv (geometry CSV with class ids) + features.bin:
//   u64 d | u64 H | u64 W | f64 stride | d*H*W f64 values, little-endian.
void export_scene(const Scene& scene, const std::filesystem::path& dir);
Scene import_scene(const std::filesystem::path& dir, double image_w,
                   double image_h);

void write_feature_map(std::ostream& os, const FeatureMap& fm);
FeatureMap read_feature_map(std::istream& is);

}  // namespace sparsedet
