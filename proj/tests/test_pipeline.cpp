// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "oracles.hpp"
#include "sparsedet/checkpoint.hpp"
#include "sparsedet/config.hpp"
#include "sparsedet/detector.hpp"
#include "sparsedet/errors.hpp"
#include "sparsedet/ops.hpp"
#include "sparsedet/synth.hpp"

using namespace sparsedet;
using oracle::Vec;

namespace {

DetectorConfig tiny() {
  DetectorConfig cfg;
  cfg.num_queries = 5;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.pooled = 3;
  cfg.num_stages = 2;
  return cfg;
}

Scene scene_for(const DetectorConfig& cfg, std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  spec.channels = cfg.d_model;
  spec.max_objects = 3;
  return generate_scene(spec);
}

Vec flat_params(const ModelState& s) {
  Vec out;
  for (const auto& p : s.store.params()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void copy_by_name(const ModelState& from, ModelState& to, const std::map<std::string, std::string>& rename) {
  for (auto& p : to.store.params()) {
    const auto it = rename.find(p.name);
    const Tensor& src = from.store.get(it == rename.end() ? p.name : it->second);
    REQUIRE(src.shape() == p.tensor.shape());
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_data().begin());
  }
}

bool same_outputs(const std::vector<StageOutput>& a, const std::vector<StageOutput>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (!oracle::bitwise_equal(a[s].class_logits.data(), b[s].class_logits.data()) ||
        !oracle::bitwise_equal(a[s].box_tensor.data(), b[s].box_tensor.data()) ||
        !oracle::bitwise_equal(a[s].queries_out.data(), b[s].queries_out.data())) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("stage outputs have the documented shapes in every mode") {
  for (DisentangleMode mode : {DisentangleMode::kEntangled, DisentangleMode::kHalfDim,
                               DisentangleMode::kFullDim, DisentangleMode::kDcw}) {
    for (AttnMode attn : {AttnMode::kFullMsa, AttnMode::kNoMsa, AttnMode::kIouAsAttn, AttnMode::kIouEsa}) {
      DetectorConfig cfg = tiny();
      cfg.disentangle = mode;
      cfg.dcw_enabled = mode == DisentangleMode::kDcw;
      cfg.attn_mode = attn;
      const ModelState state = ModelState::create(cfg, 1);
      const auto outs = forward(scene_for(cfg, 2).feature_map, state, cfg);
      REQUIRE(outs.size() == 2);
      for (const auto& o : outs) {
        CHECK(o.class_logits.shape() == Shape{5, 1});
        CHECK(o.box_tensor.shape() == Shape{5, 4});
        CHECK(o.queries_out.shape() == Shape{5, 8});
      }
    }
  }
}

TEST_CASE("initial proposals") {
  DetectorConfig cfg = tiny();
  cfg.proposal_layout = ProposalLayout::kCentered;
  const ModelState centered = ModelState::create(cfg, 3);
  const BoxSet c = tensor_to_boxes(initial_boxes(centered, cfg), cfg.image_w, cfg.image_h);
  for (const Box& b : c.boxes) {
    CHECK((b.x1 + b.x2) / 2 == doctest::Approx(48));
    CHECK(b.width() == doctest::Approx(0.33 * 96));
  }
  cfg.proposal_layout = ProposalLayout::kGrid;
  const ModelState grid = ModelState::create(cfg, 3);
  const BoxSet g = tensor_to_boxes(initial_boxes(grid, cfg), cfg.image_w, cfg.image_h);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = i + 1; j < g.size(); ++j) CHECK_FALSE(g.boxes[i] == g.boxes[j]);
  }
}

TEST_CASE("enhanced attention equals full attention when all proposals coincide") {
  DetectorConfig cfg = tiny();
  cfg.proposal_layout = ProposalLayout::kCentered;
  cfg.num_stages = 1;
  DetectorConfig full = cfg;
  full.attn_mode = AttnMode::kFullMsa;
  const ModelState state = ModelState::create(cfg, 4);
  const FeatureMap fm = scene_for(cfg, 5).feature_map;
  CHECK(same_outputs(forward(fm, state, cfg), forward(fm, state, full)));
}

TEST_CASE("unit masks with tied projections reproduce the entangled head") {
  DetectorConfig dcw = tiny();
  dcw.unit_dcw_masks = true;
  DetectorConfig ent = tiny();
  ent.set_dcw(false);
  const ModelState source = ModelState::create(dcw, 6);
  ModelState tied = ModelState::create(dcw, 7);
  ModelState entangled = ModelState::create(ent, 8);
  std::map<std::string, std::string> tie, to_entangled;
  for (int s = 0; s < 2; ++s) {
    const std::string st = "stage" + std::to_string(s);
    for (const char* part : {".weight", ".bias"}) {
      tie[st + ".proj_reg" + part] = st + ".proj_cls" + part;
      to_entangled[st + ".proj" + part] = st + ".proj_cls" + part;
    }
  }
  copy_by_name(source, tied, tie);
  copy_by_name(tied, entangled, to_entangled);
  const FeatureMap fm = scene_for(dcw, 9).feature_map;
  CHECK(same_outputs(forward(fm, tied, dcw), forward(fm, entangled, ent)));
}

TEST_CASE("one stage is forward_stage on the learnable proposals") {
  DetectorConfig cfg = tiny();
  cfg.num_stages = 1;
  const ModelState state = ModelState::create(cfg, 10);
  const FeatureMap fm = scene_for(cfg, 11).feature_map;
  const Tensor base = initial_boxes(state, cfg);
  const StageOutput direct =
      forward_stage(state.q0, base, tensor_to_boxes(base, cfg.image_w, cfg.image_h), fm, state.stages[0], cfg);
  CHECK(same_outputs(forward(fm, state, cfg), {direct}));
}

TEST_CASE("boxes enter the next stage detached") {
  const DetectorConfig cfg = tiny();
  const Scene scene = scene_for(cfg, 12);
  const ModelState state = ModelState::create(cfg, 13);
  const Tensor& w = state.store.get("stage0.reg_out.weight");
  auto grad = [&](std::size_t stages) {
    auto outs = forward(scene.feature_map, state, cfg);
    outs.resize(stages);
    set_loss(outs, scene.targets, cfg.cost).total.backward();
    Vec g = w.grad();
    for (const auto& p : state.store.params()) Tensor(p.tensor).zero_grad();
    return g;
  };
  const Vec first_only = grad(1), both = grad(2);
  CHECK(*std::max_element(first_only.begin(), first_only.end()) != 0.0);
  CHECK(oracle::bitwise_equal(both, first_only));
  // Queries do carry stage-two gradient back into stage one.
  const Tensor& f = state.store.get("stage0.ffn.fc1.weight");
  set_loss({forward(scene.feature_map, state, cfg)[1]}, scene.targets, cfg.cost).total.backward();
  const Vec gf = f.grad();
  CHECK(std::any_of(gf.begin(), gf.end(), [](double v) { return v != 0.0; }));
}

TEST_CASE("training is deterministic and a zero learning rate freezes the model") {
  const DetectorConfig cfg = tiny();
  auto run = [&](double lr) {
    ModelState state = ModelState::create(cfg, 14);
    OptimizerConfig oc;
    oc.lr = lr;
    Optimizer opt(oc);
    Vec losses;
    for (std::uint64_t s = 0; s < 4; ++s) {
      const Scene scene = scene_for(cfg, 15 + s);
      losses.push_back(train_step(scene.targets, scene.feature_map, state, cfg, opt).loss);
    }
    return std::make_pair(losses, flat_params(state));
  };
  const auto a = run(0.02), b = run(0.02);
  CHECK(oracle::bitwise_equal(a.first, b.first));
  CHECK(oracle::bitwise_equal(a.second, b.second));
  const auto frozen = run(0.0);
  CHECK(oracle::bitwise_equal(frozen.second, flat_params(ModelState::create(cfg, 14))));
}

TEST_CASE("learning rate schedule") {
  OptimizerConfig oc;
  oc.lr = 0.1;
  oc.total_steps = 100;
  const Optimizer opt(oc);
  CHECK(opt.learning_rate(0) == 0.1);
  CHECK(opt.learning_rate(74) == 0.1);
  CHECK(opt.learning_rate(75) == doctest::Approx(0.01));
  oc.warmup_steps = 10;
  CHECK(Optimizer(oc).learning_rate(0) == doctest::Approx(0.01));
}

TEST_CASE("gradient clipping bounds the update") {
  ParamStore store(16);
  Tensor w = store.create("w", {2}, Init::kZeros);
  sum(mul(w, Tensor::from_data({2}, {300.0, 400.0}))).backward();
  OptimizerConfig oc;
  oc.lr = 1.0;
  oc.momentum = 0.0;
  oc.weight_decay = 0.0;
  Optimizer opt(oc);
  CHECK(opt.step(store.params()) == doctest::Approx(500.0));
  CHECK(w.data()[0] == doctest::Approx(-0.6));
  CHECK(w.data()[1] == doctest::Approx(-0.8));
  CHECK(w.grad() == Vec{0, 0});
}

TEST_CASE("boxes stay valid even with blown-up weights") {
  const DetectorConfig cfg = tiny();
  Rng rng(17);
  for (int t = 0; t < 5; ++t) {
    ModelState state = ModelState::create(cfg, rng.next_u64());
    for (auto& p : state.store.params()) {
      for (auto& v : p.tensor.mutable_data()) v *= rng.uniform(1, 30);
    }
    for (const auto& o : forward(scene_for(cfg, 18).feature_map, state, cfg)) {
      for (const Box& b : o.boxes.boxes) {
        CHECK(b.x1 <= b.x2);
        CHECK(b.y1 <= b.y2);
        CHECK(b.x1 >= 0);
        CHECK(b.x2 <= cfg.image_w);
        CHECK(b.y2 <= cfg.image_h);
      }
    }
  }
}

TEST_CASE("non-finite input raises a numeric error naming the stage") {
  const DetectorConfig cfg = tiny();
  const ModelState state = ModelState::create(cfg, 19);
  FeatureMap fm = scene_for(cfg, 20).feature_map;
  fm.data.mutable_data()[0] = NAN;
  try {
    forward(fm, state, cfg);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("stage 0") != std::string::npos);
  }
}

TEST_CASE("detections: one per query with probabilities") {
  const DetectorConfig cfg = tiny();
  const ModelState state = ModelState::create(cfg, 21);
  const auto dets = detect(scene_for(cfg, 22).feature_map, state, cfg);
  CHECK(dets.size() == 5);
  for (const auto& d : dets) {
    CHECK(d.score > 0.0);
    CHECK(d.score < 1.0);
  }
}

TEST_CASE("checkpoints restore a model exactly") {
  const DetectorConfig cfg = tiny();
  ModelState trained = ModelState::create(cfg, 23);
  Optimizer opt(OptimizerConfig{});
  const Scene scene = scene_for(cfg, 24);
  train_step(scene.targets, scene.feature_map, trained, cfg, opt);
  const auto path = std::filesystem::temp_directory_path() / "sparsedet_test_ckpt.bin";
  save_checkpoint(path, trained.store.params());
  ModelState loaded = ModelState::create(cfg, 99);
  load_checkpoint(path, loaded.store.params());
  CHECK(same_outputs(forward(scene.feature_map, trained, cfg), forward(scene.feature_map, loaded, cfg)));
  DetectorConfig other = cfg;
  other.num_stages = 1;
  ModelState wrong = ModelState::create(other, 1);
  other.d_model = 16;
  ModelState wider = ModelState::create(other, 1);
  CHECK_NOTHROW(load_checkpoint(path, wrong.store.params()));
  CHECK_THROWS_AS(load_checkpoint(path, wider.store.params()), InputError);
  std::filesystem::remove(path);
}

TEST_CASE("single-scene overfit") {
  RunConfig run;
  run.finalize();
  const Scene scene = generate_scene(train_scene_spec(run, 0));
  ModelState state = ModelState::create(run.detector, run.seed);
  OptimizerConfig oc = run.optim;
  oc.total_steps = 100;
  Optimizer opt(oc);
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 100; ++s) {
    last = train_step(scene.targets, scene.feature_map, state, run.detector, opt).loss;
    if (s == 0) first = last;
  }
  CHECK(last < 0.1 * first);
}

TEST_CASE("invalid detector settings are rejected") {
  DetectorConfig cfg = tiny();
  cfg.heads = 3;
  CHECK_THROWS(cfg.validate());
  cfg = tiny();
  cfg.num_stages = 0;
  CHECK_THROWS(cfg.validate());
  cfg = tiny();
  cfg.dcw_enabled = true;
  cfg.disentangle = DisentangleMode::kHalfDim;
  CHECK_THROWS(cfg.validate());
}
