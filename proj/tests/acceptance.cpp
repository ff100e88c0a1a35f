// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion. Exit status is nonzero
// iff a gating criterion fails; the ablation ordering is reported only.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "sparsedet/attention.hpp"
#include "sparsedet/config.hpp"
#include "sparsedet/geometry.hpp"
#include "sparsedet/gradcheck_suite.hpp"
#include "sparsedet/harness.hpp"
#include "sparsedet/matcher.hpp"
#include "sparsedet/ops.hpp"
#include "sparsedet/roi_align.hpp"
#include "sparsedet/synth.hpp"

using namespace sparsedet;
using oracle::Vec;

namespace {

namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

Outcome criterion1() {
  Rng rng(101);
  int equal = 0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t heads = std::vector<std::size_t>{1, 2, 4}[static_cast<std::size_t>(t % 3)];
    const auto per_head = static_cast<std::size_t>(rng.uniform_int(1, 64 / static_cast<std::int64_t>(heads)));
    const std::size_t d = heads * per_head;
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 16));
    ParamStore store(rng.next_u64());
    const AttnConfig cfg{d, heads};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    const Tensor q = oracle::random_tensor(rng, {n, d}, -3, 3);
    equal += oracle::bitwise_equal(iou_esa(q, Tensor::full({n, n}, 1.0), p, cfg).data(),
                                   standard_msa(q, p, cfg).data());
  }
  return {equal == 20, std::to_string(equal) + "/20 bitwise equal"};
}

Outcome criterion2() {
  Rng rng(102);
  double worst_sum = 0.0, worst_shift = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t heads = std::vector<std::size_t>{1, 2, 4}[static_cast<std::size_t>(t % 3)];
    const std::size_t d = heads * 4;
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 12));
    ParamStore store(rng.next_u64());
    const AttnConfig cfg{d, heads};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    BoxSet boxes{{}, 64, 64};
    for (std::size_t i = 0; i < n; ++i) boxes.boxes.push_back(oracle::random_box(rng, 64, 64));
    const Tensor m = pairwise_iou(boxes);
    const Tensor w = attention_weights(oracle::random_tensor(rng, {n, d}, -5, 5), m, p, cfg, AttnMode::kIouEsa);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += w.at({h, i, j});
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }
    const Tensor logits = oracle::random_tensor(rng, {n, n}, -10, 10);
    Vec shifted(logits.data().begin(), logits.data().end());
    for (std::size_t i = 0; i < n; ++i) {
      const double c = rng.uniform(-50, 50);
      for (std::size_t j = 0; j < n; ++j) shifted[i * n + j] += c;
    }
    const Vec wm = with_unit_diagonal(m);
    worst_shift = std::max(worst_shift,
                           oracle::max_abs_diff(weighted_softmax_rows(Tensor::from_data({n, n}, shifted), wm).data(),
                                                weighted_softmax_rows(logits, wm).data()));
  }
  return {worst_sum < 1e-9 && worst_shift < 1e-12,
          "max |row sum - 1| " + num(worst_sum) + ", max shift change " + num(worst_shift)};
}

Outcome criterion3() {
  ParamStore store(103);
  const AttnConfig cfg{2, 1};
  MhsaParams p = MhsaParams::create(store, "a", cfg);
  // Zero query/key projections make both logits 0.
  for (auto& v : p.qkv.weight.mutable_data()) v = 0.0;
  for (auto& v : p.qkv.bias.mutable_data()) v = 0.0;
  const Tensor w = attention_weights(Tensor::from_data({2, 2}, {0.3, -1, 2, 0.5}),
                                     Tensor::from_data({2, 2}, {1, 0.5, 0.5, 1}), p, cfg, AttnMode::kIouEsa);
  const double e0 = std::abs(w.at({0, 0, 0}) - 2.0 / 3.0), e1 = std::abs(w.at({0, 0, 1}) - 1.0 / 3.0);
  return {e0 < 1e-12 && e1 < 1e-12, "weights [" + num(w.at({0, 0, 0})) + ", " + num(w.at({0, 0, 1})) + "]"};
}

double brute_force(const Vec& cost, std::size_t n, std::size_t m) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  double best = INFINITY;
  do {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += cost[idx[j] * m + j];
    best = std::min(best, s);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return best;
}

Outcome criterion4() {
  Rng rng(104);
  std::vector<std::tuple<Vec, std::size_t, std::size_t>> instances;
  for (int t = 0; t < 50; ++t) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 7));
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(n)));
    Vec cost(n * m);
    for (auto& v : cost) v = rng.uniform(0, 10);
    instances.emplace_back(std::move(cost), n, m);
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> got;
  for (const auto& [cost, n, m] : instances) got.push_back(hungarian(cost, n, m).total_cost);
  const double elapsed = seconds_since(start);
  int agree = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& [cost, n, m] = instances[i];
    agree += std::abs(got[i] - brute_force(cost, n, m)) < 1e-9;
  }
  return {agree == 50 && elapsed < 1.0, std::to_string(agree) + "/50 optimal, " + num(elapsed) + " s"};
}

Outcome criterion5() {
  const auto start = std::chrono::steady_clock::now();
  double worst_prim = 0.0, worst_mod = 0.0, worst_full = 0.0;
  bool ok = true;
  for (GradScope s : {GradScope::kPrimitives, GradScope::kModules, GradScope::kFull}) {
    const double limit = s == GradScope::kFull ? 1e-4 : 1e-5;
    double& worst = s == GradScope::kPrimitives ? worst_prim : s == GradScope::kModules ? worst_mod : worst_full;
    for (const auto& e : run_gradcheck_suite(s)) {
      worst = std::max(worst, e.error);
      ok = ok && e.error < limit;
    }
  }
  const double elapsed = seconds_since(start);
  return {ok && elapsed < 300.0, "worst primitives " + num(worst_prim) + ", modules " + num(worst_mod) +
                                     ", full " + num(worst_full) + ", " + num(elapsed) + " s"};
}

Outcome criterion6() {
  double worst = 0.0;
  auto compare = [&](double got, double expect) { worst = std::max(worst, std::abs(got - expect)); };
  const double cell = 0.01;
  const std::vector<std::pair<Box, Box>> iou_cases{
      {{0, 0, 2, 2}, {0, 0, 2, 2}}, {{0, 0, 1, 1}, {2, 2, 3, 3}}, {{0, 0, 2, 2}, {1, 1, 3, 3}}};
  for (const auto& [a, b] : iou_cases) compare(iou(a, b), oracle::raster_iou(a, b, cell));
  compare(iou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0);
  const BoxSet three{{{0, 0, 2, 2}, {1, 1, 3, 3}, {10, 10, 11, 11}}, 16, 16};
  const Tensor m = pairwise_iou(three);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) compare(m.at({i, j}), oracle::raster_iou(three.boxes[i], three.boxes[j], cell));
  }
  // Hand arithmetic: IoU - (|C| - |A u B|) / |C|.
  compare(giou({0, 0, 2, 2}, {0, 0, 2, 2}), 1.0);
  compare(giou({0, 0, 1, 1}, {2, 0, 3, 1}), 0.0 - (3.0 - 2.0) / 3.0);
  compare(giou({0, 0, 1, 1}, {9, 9, 10, 10}), 0.0 - (100.0 - 2.0) / 100.0);
  compare(giou({0, 0, 2, 2}, {1, 1, 3, 3}), 1.0 / 7.0 - (9.0 - 7.0) / 9.0);

  Rng rng(106);
  std::size_t violations = 0;
  for (int t = 0; t < 100000; ++t) {
    const Box a = oracle::random_box(rng, 100, 100), b = oracle::random_box(rng, 100, 100);
    const double g = giou(a, b), u = iou(a, b);
    violations += !(g >= -1.0 && g <= 1.0 && g <= u);
  }
  return {worst < 1e-6 && violations == 0,
          "max oracle diff " + num(worst) + ", bound violations " + std::to_string(violations) + "/100000"};
}

Outcome criterion7() {
  Rng rng(107);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(4, 10));
    const auto w = static_cast<std::size_t>(rng.uniform_int(4, 10));
    const FeatureMap fm{oracle::random_tensor(rng, {2, h, w}), 8};
    const double iw = 8.0 * static_cast<double>(w), ih = 8.0 * static_cast<double>(h);
    const Box b = oracle::random_box(rng, iw, ih);
    const Tensor r = roi_align(fm, BoxSet{{b}, iw, ih}, kDefaultPooledSize, 8);
    worst = std::max(worst, oracle::max_abs_diff(r.data(), oracle::dense_pool(fm, b, kDefaultPooledSize, 16)));
  }
  return {worst < 1e-2, "max abs diff " + num(worst) + " at 8x8 samples per bin vs 16x16 reference"};
}

Outcome criterion8() {
  RunConfig cfg;
  const auto start = std::chrono::steady_clock::now();
  const TrainResult r = run_training(cfg, std::nullopt);
  const double elapsed = seconds_since(start);
  const double ap = r.ap.value_or(0.0);

  RunConfig one = cfg;
  one.finalize();
  const Scene scene = generate_scene(train_scene_spec(one, 0));
  ModelState state = ModelState::create(one.detector, one.seed);
  OptimizerConfig oc = one.optim;
  oc.total_steps = 100;
  Optimizer opt(oc);
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 100; ++s) {
    last = train_step(scene.targets, scene.feature_map, state, one.detector, opt).loss;
    if (s == 0) first = last;
  }
  return {ap >= 0.80 && elapsed < 900.0 && last < 0.1 * first,
          "AP@0.5 " + num(ap) + " on " + std::to_string(cfg.eval_scenes) + " scenes after " +
              std::to_string(cfg.steps) + " steps in " + num(elapsed) + " s; overfit loss " + num(first) +
              " -> " + num(last) + " (" + num(100.0 * last / first) + "%)"};
}

Outcome criterion9() {
  RunConfig base;
  apply_setting(base, "overlap_bias", "0.9");
  apply_setting(base, "steps", "1000");
  apply_setting(base, "eval_scenes", "100");
  std::vector<CellResult> results;
  const std::vector<AblationCell> configs{{AttnMode::kNoMsa, false, DisentangleMode::kEntangled, 0},
                                          {AttnMode::kIouAsAttn, false, DisentangleMode::kEntangled, 0},
                                          {AttnMode::kFullMsa, false, DisentangleMode::kEntangled, 0},
                                          {AttnMode::kIouEsa, true, DisentangleMode::kDcw, 0}};
  for (AblationCell cell : configs) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      cell.seed = seed;
      results.push_back(run_cell(base, cell));
    }
  }
  const auto rows = summarize_ablation(results);
  std::ostringstream table;
  write_ablation_text(table, rows);
  std::cout << table.str();
  bool ordered = true;
  std::string names;
  for (const auto& c : direction_checks(rows)) {
    ordered = ordered && c.pass;
    names += (names.empty() ? "" : ", ") + c.name + (c.pass ? " pass" : " FAIL");
  }
  return {ordered, names};
}

Outcome criterion10() {
  const fs::path root = fs::temp_directory_path() / "sparsedet_acceptance_determinism";
  fs::remove_all(root);
  auto train = [&](const std::string& name) {
    const std::string cmd = std::string(SPARSEDET_CLI) + " train --seed 11 --out " + (root / name).string() +
                            " > " + (root / (name + ".log")).string() + " 2>&1";
    fs::create_directories(root);
    const int status = std::system(cmd.c_str());
    std::ifstream in(root / name / "runs.jsonl", std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return std::make_pair(WIFEXITED(status) ? WEXITSTATUS(status) : -1, os.str());
  };
  const auto a = train("a"), b = train("b");
  fs::remove_all(root);
  const bool same = a.first == 0 && b.first == 0 && !a.second.empty() && a.second == b.second;
  return {same, std::to_string(a.second.size()) + " bytes, " + (a.second == b.second ? "identical" : "different")};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    bool gating;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "all-ones IoU reduces enhanced attention to standard attention", true, criterion1},
      {2, "row normalization and shift invariance", true, criterion2},
      {3, "hand example [2/3, 1/3]", true, criterion3},
      {4, "Hungarian matches brute force", true, criterion4},
      {5, "gradient fidelity", true, criterion5},
      {6, "geometry oracles and GIoU bounds", true, criterion6},
      {7, "RoI-align vs dense sampling", true, criterion7},
      {8, "desk-scale learning and overfit", true, criterion8},
      {9, "ablation ordering (reported, not gating)", false, criterion9},
      {10, "byte-identical training records", true, criterion10},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const char* verdict = o.pass ? "PASS" : (c.gating ? "FAIL" : "FAIL (report only)");
    std::cout << "criterion " << c.id << ": " << c.name << " ... " << verdict << " (" << o.detail << ")"
              << std::endl;
    failures += !o.pass && c.gating;
  }
  return failures == 0 ? 0 : 1;
}
