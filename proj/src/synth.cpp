// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>

#include "binary_io.hpp"
#include "sparsedet/errors.hpp"

namespace sparsedet {

namespace {
constexpr std::uint64_t kSceneStream = 0x5ce9e;
}  // namespace

void SceneSpec::validate() const {
  if (image_w <= 0 || image_h <= 0) throw InputError("scene: empty image");
  if (min_objects < 0 || max_objects < min_objects) {
    throw InputError("scene: bad object count range");
  }
  if (min_size < 2 || max_size < min_size) {
    throw InputError("scene: bad object size range");
  }
  if (min_size > image_w || min_size > image_h) {
    throw InputError("scene: minimum object size exceeds the image");
  }
  if (!(overlap_bias >= 0.0 && overlap_bias <= 1.0)) {
    throw InputError("scene: overlap_bias must lie in [0, 1]");
  }
  if (channels < 4) throw InputError("scene: need at least 4 channels");
  if (!(stride > 0.0)) throw InputError("scene: stride must be positive");
}

Scene generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng({spec.seed, kSceneStream});
  const auto count = rng.uniform_int(spec.min_objects, spec.max_objects);

  Scene scene;
  scene.targets.boxes.image_w = spec.image_w;
  scene.targets.boxes.image_h = spec.image_h;
  const std::int64_t max_w = std::min(spec.max_size, spec.image_w);
  const std::int64_t max_h = std::min(spec.max_size, spec.image_h);
  std::vector<std::array<std::int64_t, 4>> placed;  // x, y, w, h
  for (std::int64_t k = 0; k < count; ++k) {
    const std::int64_t w = rng.uniform_int(spec.min_size, max_w);
    const std::int64_t h = rng.uniform_int(spec.min_size, max_h);
    std::int64_t x, y;
    if (!placed.empty() && rng.uniform() < spec.overlap_bias) {
      const auto& a = placed[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(placed.size()) - 1))];
      const std::int64_t acx = a[0] + a[2] / 2, acy = a[1] + a[3] / 2;
      const std::int64_t cx = acx + rng.uniform_int(-a[2] / 2, a[2] / 2);
      const std::int64_t cy = acy + rng.uniform_int(-a[3] / 2, a[3] / 2);
      x = cx - w / 2;
      y = cy - h / 2;
    } else {
      x = rng.uniform_int(0, spec.image_w - w);
      y = rng.uniform_int(0, spec.image_h - h);
    }
    x = std::clamp<std::int64_t>(x, 0, spec.image_w - w);
    y = std::clamp<std::int64_t>(y, 0, spec.image_h - h);
    placed.push_back({x, y, w, h});
    scene.targets.boxes.boxes.push_back(
        {static_cast<double>(x), static_cast<double>(y),
         static_cast<double>(x + w), static_cast<double>(y + h)});
    scene.targets.classes.push_back(0);
  }
  scene.feature_map = render_features(scene.targets, spec.channels, spec.stride,
                                      rng, spec.noise_sigma);
  return scene;
}

FeatureMap render_features(const Targets& targets, std::size_t channels,
                           double stride, Rng& rng, double noise_sigma) {
  if (channels < 4) throw InputError("render_features: need >= 4 channels");
  const auto gh = static_cast<std::size_t>(
      std::ceil(targets.boxes.image_h / stride));
  const auto gw = static_cast<std::size_t>(
      std::ceil(targets.boxes.image_w / stride));
  const std::size_t plane = gh * gw;
  std::vector<double> data(channels * plane, 0.0);

  std::vector<double> profile_x(gw), profile_y(gh);
  for (const Box& b : targets.boxes.boxes) {
    std::vector<double> signature(channels);
    for (auto& s : signature) s = rng.uniform(0.2, 1.0);
    const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
    const double hw = 0.5 * b.width(), hh = 0.5 * b.height();
    for (std::size_t x = 0; x < gw; ++x) {
      const double px = (static_cast<double>(x) + 0.5) * stride;
      profile_x[x] = std::max(0.0, 1.0 - std::abs(px - cx) / hw);
    }
    for (std::size_t y = 0; y < gh; ++y) {
      const double py = (static_cast<double>(y) + 0.5) * stride;
      profile_y[y] = std::max(0.0, 1.0 - std::abs(py - cy) / hh);
    }
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x)
          data[c * plane + y * gw + x] += signature[c] * profile_y[y] * profile_x[x];
  }
  for (auto& v : data) v += noise_sigma * rng.normal();
  return {Tensor::from_data({channels, gh, gw}, std::move(data)), stride};
}

std::optional<double> evaluate_ap(
    const std::vector<std::vector<ScoredBox>>& predictions,
    const std::vector<std::vector<Box>>& targets, double iou_threshold) {
  if (predictions.size() != targets.size()) {
    throw DimensionError("evaluate_ap: scene counts differ");
  }
  std::size_t total_targets = 0;
  for (const auto& t : targets) total_targets += t.size();
  if (total_targets == 0) return std::nullopt;

  struct Ranked {
    double score;
    std::size_t scene;
    Box box;
  };
  std::vector<Ranked> ranked;
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    for (const auto& p : predictions[s]) ranked.push_back({p.score, s, p.box});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.scene, a.box.x1, a.box.y1, a.box.x2, a.box.y2) <
           std::tie(b.scene, b.box.x1, b.box.y1, b.box.x2, b.box.y2);
  });

  std::vector<std::vector<char>> claimed(targets.size());
  for (std::size_t s = 0; s < targets.size(); ++s) {
    claimed[s].assign(targets[s].size(), 0);
  }
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const auto& r : ranked) {
    double best = iou_threshold;
    std::ptrdiff_t best_j = -1;
    for (std::size_t j = 0; j < targets[r.scene].size(); ++j) {
      if (claimed[r.scene][j]) continue;
      const double v = iou(r.box, targets[r.scene][j]);
      if (v >= best && (best_j < 0 || v > best)) {
        best = v;
        best_j = static_cast<std::ptrdiff_t>(j);
      }
    }
    if (best_j >= 0) {
      claimed[r.scene][static_cast<std::size_t>(best_j)] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_targets));
  }

  // All-point interpolation: precision envelope from the right.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

void write_feature_map(std::ostream& os, const FeatureMap& fm) {
  fm.validate();
  binary::write_u64(os, fm.channels());
  binary::write_u64(os, fm.height());
  binary::write_u64(os, fm.width());
  binary::write_f64(os, fm.stride);
  for (double v : fm.data.data()) binary::write_f64(os, v);
}

FeatureMap read_feature_map(std::istream& is) {
  const std::uint64_t d = binary::read_u64(is);
  const std::uint64_t h = binary::read_u64(is);
  const std::uint64_t w = binary::read_u64(is);
  const double stride = binary::read_f64(is);
  constexpr std::uint64_t kMaxAxis = 1 << 16;
  if (d == 0 || h == 0 || w == 0 || d > kMaxAxis || h > kMaxAxis ||
      w > kMaxAxis) {
    throw InputError("feature map file: bad shape header");
  }
  std::vector<double> data(d * h * w);
  for (auto& v : data) v = binary::read_f64(is);
  FeatureMap fm{Tensor::from_data({d, h, w}, std::move(data)), stride};
  fm.validate();
  return fm;
}

void export_scene(const Scene& scene, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "targets.csv");
  if (!csv) throw InputError("cannot write " + (dir / "targets.csv").string());
  write_boxes_csv(csv, scene.targets.boxes.boxes, &scene.targets.classes);
  std::ofstream bin(dir / "features.bin", std::ios::binary);
  if (!bin) throw InputError("cannot write " + (dir / "features.bin").string());
  write_feature_map(bin, scene.feature_map);
}

Scene import_scene(const std::filesystem::path& dir, double image_w,
                   double image_h) {
  std::ifstream csv(dir / "targets.csv");
  if (!csv) throw InputError("cannot read " + (dir / "targets.csv").string());
  LabeledBoxes lb = read_boxes_csv(csv);
  std::ifstream bin(dir / "features.bin", std::ios::binary);
  if (!bin) throw InputError("cannot read " + (dir / "features.bin").string());
  Scene scene;
  scene.targets.boxes = {std::move(lb.boxes), image_w, image_h};
  scene.targets.classes = lb.classes ? *lb.classes
                                     : std::vector<int>(scene.targets.size(), 0);
  scene.feature_map = read_feature_map(bin);
  return scene;
}

}  // namespace sparsedet
