// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "oracles.hpp"
#include "sparsedet/errors.hpp"
#include "sparsedet/synth.hpp"

using namespace sparsedet;
using oracle::Vec;

namespace {

double mean_pairwise_iou(double bias) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    SceneSpec spec;
    spec.seed = 1000 + s;
    spec.overlap_bias = bias;
    const auto& b = generate_scene(spec).targets.boxes.boxes;
    for (std::size_t i = 0; i < b.size(); ++i) {
      for (std::size_t j = i + 1; j < b.size(); ++j) {
        total += oracle::raster_iou(b[i], b[j], 1.0);
        ++pairs;
      }
    }
  }
  return total / static_cast<double>(pairs);
}

// Sum of |value| minus the expected |noise| over cells centered inside the box.
double mass(const FeatureMap& fm, const Box& b, double sigma) {
  const double baseline = sigma * std::sqrt(2.0 / std::numbers::pi);
  double total = 0.0;
  for (std::size_t ch = 0; ch < fm.channels(); ++ch) {
    for (std::size_t y = 0; y < fm.height(); ++y) {
      for (std::size_t x = 0; x < fm.width(); ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * fm.stride;
        const double cy = (static_cast<double>(y) + 0.5) * fm.stride;
        if (cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2) {
          total += std::abs(fm.data.at({ch, y, x})) - baseline;
        }
      }
    }
  }
  return total;
}

bool disjoint(const Box& a, const Box& b) {
  return a.x2 <= b.x1 || b.x2 <= a.x1 || a.y2 <= b.y1 || b.y2 <= a.y1;
}

}  // namespace

TEST_CASE("identical spec gives an identical scene") {
  SceneSpec spec;
  spec.seed = 3;
  const Scene a = generate_scene(spec), b = generate_scene(spec);
  CHECK(a.targets.boxes.boxes == b.targets.boxes.boxes);
  CHECK(a.targets.classes == b.targets.classes);
  CHECK(oracle::bitwise_equal(a.feature_map.data.data(), b.feature_map.data.data()));
  spec.seed = 4;
  CHECK_FALSE(oracle::bitwise_equal(generate_scene(spec).feature_map.data.data(), a.feature_map.data.data()));
}

TEST_CASE("scene geometry for seed 42 is pinned") {
  SceneSpec spec;
  spec.seed = 42;
  const std::vector<Box> expect{
      {48, 31, 82, 62}, {59, 30, 91, 69}, {66, 43, 96, 74}, {23, 63, 60, 92}, {29, 62, 66, 92}};
  CHECK(generate_scene(spec).targets.boxes.boxes == expect);
}

TEST_CASE("overlap bias raises mean pairwise target IoU") {
  const double lo = mean_pairwise_iou(0.0), hi = mean_pairwise_iou(0.9);
  INFO("bias 0: " << lo << ", bias 0.9: " << hi);
  CHECK(hi > lo);
}

TEST_CASE("object count range is respected") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    SceneSpec spec;
    spec.seed = s;
    spec.min_objects = spec.max_objects = 3;
    CHECK(generate_scene(spec).targets.size() == 3);
    spec.min_objects = 1;
    spec.max_objects = 4;
    const std::size_t n = generate_scene(spec).targets.size();
    CHECK(n >= 1);
    CHECK(n <= 4);
  }
}

TEST_CASE("targets are in-image with area at least 4") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    SceneSpec spec;
    spec.seed = s;
    spec.overlap_bias = s % 2 ? 0.9 : 0.0;
    spec.min_size = 2;
    spec.max_size = 60;
    const Scene scene = generate_scene(spec);
    CHECK(scene.targets.classes.size() == scene.targets.size());
    for (const Box& b : scene.targets.boxes.boxes) {
      CHECK(b.x1 >= 0);
      CHECK(b.y1 >= 0);
      CHECK(b.x2 <= spec.image_w);
      CHECK(b.y2 <= spec.image_h);
      CHECK(b.area() >= 4);
    }
  }
}

TEST_CASE("impossible constraints raise") {
  SceneSpec spec;
  spec.min_size = 120;
  spec.max_size = 130;
  CHECK_THROWS_AS(generate_scene(spec), InputError);
  spec = SceneSpec{};
  spec.min_objects = 4;
  spec.max_objects = 2;
  CHECK_THROWS_AS(generate_scene(spec), InputError);
  spec = SceneSpec{};
  spec.overlap_bias = 1.5;
  CHECK_THROWS_AS(generate_scene(spec), InputError);
}

TEST_CASE("an empty scene is noise with sigma within 20% of 0.05") {
  Rng rng(5);
  const FeatureMap fm = render_features({{{}, 96, 96}, {}}, 16, 4, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : fm.data.data()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(fm.data.numel());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::abs(sd - 0.05) <= 0.01);
}

TEST_CASE("feature mass inside each target exceeds an equal-area empty region's") {
  std::size_t compared = 0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    SceneSpec spec;
    spec.seed = 500 + s;
    spec.image_w = spec.image_h = 192;
    spec.max_objects = 3;
    spec.overlap_bias = 0.0;
    const Scene scene = generate_scene(spec);
    const auto& targets = scene.targets.boxes.boxes;
    for (const Box& t : targets) {
      // Same box shifted to the first grid-aligned spot that touches no target.
      for (double y = 0; y + t.height() <= spec.image_h; y += 8) {
        bool found = false;
        for (double x = 0; x + t.width() <= spec.image_w; x += 8) {
          const Box cand{x + std::fmod(t.x1, 8.0), y + std::fmod(t.y1, 8.0),
                         x + std::fmod(t.x1, 8.0) + t.width(), y + std::fmod(t.y1, 8.0) + t.height()};
          if (cand.x2 > spec.image_w || cand.y2 > spec.image_h) continue;
          if (std::all_of(targets.begin(), targets.end(), [&](const Box& o) { return disjoint(cand, o); })) {
            CHECK(mass(scene.feature_map, t, spec.noise_sigma) > mass(scene.feature_map, cand, spec.noise_sigma));
            ++compared;
            found = true;
            break;
          }
        }
        if (found) break;
      }
    }
  }
  CHECK(compared >= 30);
}

TEST_CASE("rendering is deterministic in targets and seed") {
  const Targets t{{{{10, 10, 40, 30}, {20, 5, 50, 45}}, 96, 96}, {0, 0}};
  Rng a(6), b(6), c(7);
  const FeatureMap fa = render_features(t, 8, 8, a);
  CHECK(fa.data.shape() == Shape{8, 12, 12});
  CHECK(oracle::bitwise_equal(fa.data.data(), render_features(t, 8, 8, b).data.data()));
  CHECK_FALSE(oracle::bitwise_equal(fa.data.data(), render_features(t, 8, 8, c).data.data()));
}

TEST_CASE("AP hand examples") {
  const Box t1{0, 0, 10, 10}, t2{20, 20, 30, 30}, wrong{50, 50, 60, 60};
  CHECK(*evaluate_ap({{{t1, 1.0}, {t2, 1.0}}}, {{t1, t2}}) == 1.0);
  CHECK(*evaluate_ap({{}}, {{t1}}) == 0.0);
  CHECK(*evaluate_ap({{{wrong, 0.9}, {t1, 0.4}}}, {{t1}}) == doctest::Approx(0.5).epsilon(1e-15));
  // Ranked hit, miss, hit over two targets: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
  CHECK(*evaluate_ap({{{t1, 0.9}, {wrong, 0.8}, {t2, 0.7}}}, {{t1, t2}}) ==
        doctest::Approx(0.5 * 1.0 + 0.5 * 2.0 / 3.0));
  // A duplicate of a claimed target is a false positive.
  CHECK(*evaluate_ap({{{t1, 0.9}, {t1, 0.8}}}, {{t1}}) == 1.0);
  CHECK(*evaluate_ap({{{t1, 0.9}, {t1, 0.8}}}, {{t1, t2}}) == doctest::Approx(0.5));
  // IoU exactly at the threshold matches; just below it does not.
  CHECK(*evaluate_ap({{{{0, 0, 10, 20}, 0.9}}}, {{t1}}) == 1.0);
  CHECK(*evaluate_ap({{{{0, 0, 10, 21}, 0.9}}}, {{t1}}) == 0.0);
  // Predictions match only targets of their own scene.
  CHECK(*evaluate_ap({{{t1, 0.9}}, {}}, {{}, {t1}}) == 0.0);
}

TEST_CASE("AP is undefined without targets") {
  CHECK_FALSE(evaluate_ap({{{{0, 0, 1, 1}, 0.5}}}, {{}}).has_value());
  CHECK_FALSE(evaluate_ap({}, {}).has_value());
  CHECK_THROWS(evaluate_ap({{}}, {{}, {}}));
}

TEST_CASE("AP is invariant to prediction list order and monotone under demotion") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<ScoredBox>> preds(3);
    std::vector<std::vector<Box>> targets(3);
    for (std::size_t s = 0; s < 3; ++s) {
      for (int i = 0; i < 4; ++i) targets[s].push_back(oracle::random_box(rng, 60, 60));
      for (int i = 0; i < 6; ++i) {
        preds[s].push_back({i < 3 ? targets[s][i] : oracle::random_box(rng, 60, 60), rng.uniform()});
      }
    }
    const double base = *evaluate_ap(preds, targets);
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    auto shuffled = preds;
    for (auto& p : shuffled) {
      for (std::size_t i = p.size() - 1; i > 0; --i) std::swap(p[i], p[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }
    CHECK(*evaluate_ap(shuffled, targets) == base);
  }
  const Box t1{0, 0, 10, 10}, t2{20, 20, 30, 30}, wrong{60, 60, 70, 70};
  const double before = *evaluate_ap({{{t1, 0.9}, {wrong, 0.5}, {t2, 0.3}}}, {{t1, t2}});
  const double after = *evaluate_ap({{{t1, 0.4}, {wrong, 0.5}, {t2, 0.3}}}, {{t1, t2}});
  CHECK(after <= before);
  CHECK(after < before);
}

TEST_CASE("scene export and import round trip") {
  SceneSpec spec;
  spec.seed = 9;
  const Scene scene = generate_scene(spec);
  const auto dir = std::filesystem::temp_directory_path() / "sparsedet_test_scene";
  export_scene(scene, dir);
  const Scene back = import_scene(dir, spec.image_w, spec.image_h);
  CHECK(back.targets.boxes.boxes == scene.targets.boxes.boxes);
  CHECK(back.targets.classes == scene.targets.classes);
  CHECK(back.feature_map.stride == scene.feature_map.stride);
  CHECK(oracle::bitwise_equal(back.feature_map.data.data(), scene.feature_map.data.data()));

  // Header: d, H, W as u64 then the stride as f64.
  std::ifstream in(dir / "features.bin", std::ios::binary);
  std::uint64_t dims[3];
  double stride = 0;
  in.read(reinterpret_cast<char*>(dims), sizeof dims);
  in.read(reinterpret_cast<char*>(&stride), sizeof stride);
  CHECK(dims[0] == 32);
  CHECK(dims[1] == 12);
  CHECK(dims[2] == 12);
  CHECK(stride == 8.0);
  in.close();
  std::filesystem::resize_file(dir / "features.bin", 100);
  CHECK_THROWS_AS(import_scene(dir, spec.image_w, spec.image_h), InputError);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(import_scene(dir, spec.image_w, spec.image_h), InputError);
}
