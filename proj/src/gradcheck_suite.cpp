// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <iomanip>
#include <ostream>

#include "sparsedet/attention.hpp"
#include "sparsedet/detector.hpp"
#include "sparsedet/dynamic_head.hpp"
#include "sparsedet/errors.hpp"
#include "sparsedet/geometry.hpp"
#include "sparsedet/gradcheck.hpp"
#include "sparsedet/losses.hpp"
#include "sparsedet/matcher.hpp"
#include "sparsedet/ops.hpp"
#include "sparsedet/random.hpp"
#include "sparsedet/roi_align.hpp"
#include "sparsedet/synth.hpp"

namespace sparsedet {

namespace {

using UnaryOp = std::function<Tensor(const Tensor&)>;

constexpr int kTrials = 10;

Tensor uniform_tensor(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

// Entries bounded away from zero, so relu/abs/clamp kinks stay out of reach
// of the finite-difference probes.
Tensor signed_tensor(Rng& rng, const Shape& shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.5);
  return Tensor::from_data(shape, std::move(v));
}

// Contracts a tensor-valued op with fixed random weights into a scalar.
double check_op(Rng& rng, const UnaryOp& op, const Tensor& x) {
  const Tensor w = uniform_tensor(rng, op(x).shape(), -1.0, 1.0);
  return grad_check([&](const Tensor& v) { return sum(mul(op(v), w)); }, x);
}

double check_leaves(Rng& rng, const std::function<Tensor()>& f,
                    const std::vector<Tensor>& leaves) {
  const Tensor w = uniform_tensor(rng, f().shape(), -1.0, 1.0);
  return grad_check_leaves([&] { return sum(mul(f(), w)); }, leaves);
}

std::vector<Tensor> leaves_of(const ParamStore& store) {
  std::vector<Tensor> out;
  for (const auto& p : store.params()) out.push_back(p.tensor);
  return out;
}

BoxSet random_boxes(Rng& rng, std::size_t n, double w, double h) {
  BoxSet s{{}, w, h};
  for (std::size_t i = 0; i < n; ++i) {
    const double bw = rng.uniform(0.2, 0.6) * w, bh = rng.uniform(0.2, 0.6) * h;
    const double x = rng.uniform(0.0, w - bw), y = rng.uniform(0.0, h - bh);
    s.boxes.push_back({x, y, x + bw, y + bh});
  }
  return s;
}

struct Suite {
  std::vector<GradCheckEntry> entries;
  Rng rng{0x9c4ec};

  // Runs `trial` kTrials times and records the worst error.
  void add(const std::string& name, double tol,
           const std::function<double(Rng&)>& trial) {
    double worst = 0.0;
    for (int t = 0; t < kTrials; ++t) worst = std::max(worst, trial(rng));
    entries.push_back({name, worst, tol});
  }
  void unary(const std::string& name, const Shape& shape, const UnaryOp& op) {
    add(name, kPrimitiveTolerance,
        [&](Rng& r) { return check_op(r, op, signed_tensor(r, shape)); });
  }
  void binary(const std::string& name, const Shape& sa, const Shape& sb,
              const std::function<Tensor(const Tensor&, const Tensor&)>& op,
              const std::function<Tensor(Rng&, const Shape&)>& make_b = signed_tensor) {
    add(name, kPrimitiveTolerance, [&](Rng& r) {
      const Tensor a = signed_tensor(r, sa);
      const Tensor b = make_b(r, sb);
      return std::max(
          check_op(r, [&](const Tensor& v) { return op(v, b); }, a),
          check_op(r, [&](const Tensor& v) { return op(a, v); }, b));
    });
  }
};

void primitives(Suite& s) {
  const Shape m{3, 4};
  s.binary("add", m, m, add);
  s.binary("sub", m, m, sub);
  s.binary("mul", m, m, mul);
  s.binary("div", m, m, div);
  s.binary("minimum", m, m, minimum);
  s.binary("maximum", m, m, maximum);
  s.unary("scale", m, [](const Tensor& x) { return scale(x, -1.7); });
  s.unary("add_scalar", m, [](const Tensor& x) { return add_scalar(x, 0.3); });
  s.unary("neg", m, neg);
  s.binary("add_bias", {2, 3, 4}, {4}, add_bias);
  s.unary("sigmoid", m, sigmoid);
  s.unary("relu", m, relu);
  s.unary("exp", m, exp);
  s.unary("abs", m, abs);
  s.unary("clamp", m, [](const Tensor& x) { return clamp(x, -0.9, 0.7); });
  s.binary("matmul", {3, 4}, {4, 2}, matmul);
  s.binary("bmm", {2, 3, 4}, {2, 4, 2}, bmm);
  s.unary("transpose", {2, 3, 4}, transpose);
  s.add("linear", kPrimitiveTolerance, [](Rng& r) {
    const Tensor x = signed_tensor(r, {3, 4});
    const Tensor w = signed_tensor(r, {4, 5});
    const Tensor b = signed_tensor(r, {5});
    return std::max({check_op(r, [&](const Tensor& v) { return linear(v, w, b); }, x),
                     check_op(r, [&](const Tensor& v) { return linear(x, v, b); }, w),
                     check_op(r, [&](const Tensor& v) { return linear(x, w, v); }, b)});
  });
  s.unary("softmax_rows", {2, 3, 5}, softmax_rows);
  s.add("weighted_softmax_rows", kPrimitiveTolerance, [](Rng& r) {
    const Tensor weights = uniform_tensor(r, {4, 4}, 0.0, 1.0);
    return check_op(
        r,
        [&](const Tensor& v) { return weighted_softmax_rows(v, weights.data()); },
        signed_tensor(r, {2, 4, 4}));
  });
  s.add("layer_norm", kPrimitiveTolerance, [](Rng& r) {
    const Tensor x = signed_tensor(r, {3, 6});
    const Tensor g = signed_tensor(r, {6});
    const Tensor b = signed_tensor(r, {6});
    return std::max(
        {check_op(r, [&](const Tensor& v) { return layer_norm(v, g, b); }, x),
         check_op(r, [&](const Tensor& v) { return layer_norm(x, v, b); }, g),
         check_op(r, [&](const Tensor& v) { return layer_norm(x, g, v); }, b)});
  });
  s.unary("reshape", {3, 4}, [](const Tensor& x) { return reshape(x, {2, 6}); });
  s.binary("concat", {3, 2}, {3, 4},
           [](const Tensor& a, const Tensor& b) { return concat({a, b}, 1); });
  s.unary("slice", {3, 5}, [](const Tensor& x) { return slice(x, 1, 1, 3); });
  s.unary("index_rows", {4, 3}, [](const Tensor& x) {
    const std::vector<std::size_t> rows{2, 0, 2};
    return index_rows(x, rows);
  });
  s.unary("sum", m, sum);
  s.unary("mean", m, mean);
  s.unary("split_heads", {3, 8}, [](const Tensor& x) { return split_heads(x, 2); });
  s.unary("merge_heads", {2, 3, 4}, merge_heads);
  s.binary("scale_channels", {2, 5, 4}, {2, 4}, scale_channels);
  s.add("sigmoid_focal_loss", kPrimitiveTolerance, [](Rng& r) {
    std::vector<double> t(12);
    for (auto& v : t) v = r.uniform() < 0.3 ? 1.0 : 0.0;
    return check_op(
        r, [&](const Tensor& v) { return sigmoid_focal_loss(v, t, 0.25, 2.0); },
        signed_tensor(r, {3, 4}));
  });
  s.add("decode_boxes", kPrimitiveTolerance, [](Rng& r) {
    const Tensor base = boxes_to_tensor(random_boxes(r, 3, 200, 200));
    const Tensor deltas = uniform_tensor(r, {3, 4}, -0.2, 0.2);
    return std::max(
        check_op(r, [&](const Tensor& v) { return decode_boxes(v, deltas, 200, 200); }, base),
        check_op(r, [&](const Tensor& v) { return decode_boxes(base, v, 200, 200); }, deltas));
  });
  s.add("giou_rows", kPrimitiveTolerance, [](Rng& r) {
    const Tensor pred = boxes_to_tensor(random_boxes(r, 4, 50, 50));
    const Tensor target = boxes_to_tensor(random_boxes(r, 4, 50, 50));
    return check_op(r, [&](const Tensor& v) { return giou_rows(v, target); }, pred);
  });
}

void modules(Suite& s) {
  const AttnConfig acfg{8, 2};
  const std::size_t n = 4;
  auto attention = [&](AttnMode mode) {
    return [=](Rng& r) {
      ParamStore store(r.next_u64());
      const MhsaParams p = MhsaParams::create(store, "attn", acfg);
      const Tensor q = signed_tensor(r, {n, acfg.d_model});
      const Tensor iou = pairwise_iou(random_boxes(r, n, 40, 40));
      return std::max(
          check_op(r, [&](const Tensor& v) { return attend(v, iou, p, acfg, mode); }, q),
          check_leaves(r, [&] { return attend(q, iou, p, acfg, mode); }, leaves_of(store)));
    };
  };
  s.add("standard_msa", kModuleTolerance, attention(AttnMode::kFullMsa));
  s.add("iou_esa", kModuleTolerance, attention(AttnMode::kIouEsa));
  s.add("iou_as_attn", kModuleTolerance, attention(AttnMode::kIouAsAttn));

  s.add("roi_align", kModuleTolerance, [](Rng& r) {
    FeatureMap fm{signed_tensor(r, {3, 5, 6}), 4.0};
    const BoxSet boxes = random_boxes(r, 2, 24, 20);
    return check_op(r, [&](const Tensor& v) {
      return roi_align(FeatureMap{v, fm.stride}, boxes, 3, 2);
    }, fm.data);
  });

  const std::size_t c = 6, k = 3, positions = 4;
  s.add("dynamic_conv", kModuleTolerance, [=](Rng& r) {
    ParamStore store(r.next_u64());
    const auto gen = DynamicParamsGen::create(store, "gen", c, c, k);
    const auto norms = DynamicConvNorms::create(store, "norms", c, k);
    const Tensor q = signed_tensor(r, {n, c});
    const Tensor roi = signed_tensor(r, {n, positions, c});
    auto f = [&](const Tensor& qv, const Tensor& rv) {
      return dynamic_conv(rv, generate_dynamic_params(qv, gen), norms);
    };
    return std::max(
        {check_op(r, [&](const Tensor& v) { return f(v, roi); }, q),
         check_op(r, [&](const Tensor& v) { return f(q, v); }, roi),
         check_leaves(r, [&] { return f(q, roi); }, leaves_of(store))});
  });
  s.add("dcw_masks", kModuleTolerance, [=](Rng& r) {
    ParamStore store(r.next_u64());
    const auto heads = ChannelMaskHeads::create(store, "masks", c, 2);
    const Tensor q = signed_tensor(r, {n, c});
    auto f = [&](const Tensor& v) {
      const ChannelMasks m = dcw_masks(v, heads);
      return concat({m.cls, m.reg}, 1);
    };
    return std::max(check_op(r, f, q),
                    check_leaves(r, [&] { return f(q); }, leaves_of(store)));
  });
  s.add("apply_dcw", kModuleTolerance, [=](Rng& r) {
    const Tensor roi = signed_tensor(r, {n, positions, c});
    const Tensor mask = uniform_tensor(r, {n, c}, 0.05, 0.95);
    return std::max(
        check_op(r, [&](const Tensor& v) { return apply_dcw(v, mask); }, roi),
        check_op(r, [&](const Tensor& v) { return apply_dcw(roi, v); }, mask));
  });
  s.add("project_embeddings", kModuleTolerance, [=](Rng& r) {
    ParamStore store(r.next_u64());
    const Linear wc = Linear::create(store, "wc", positions * c, c);
    const Linear wr = Linear::create(store, "wr", positions * c, c);
    const Tensor rc = signed_tensor(r, {n, positions, c});
    const Tensor rr = signed_tensor(r, {n, positions, c});
    auto f = [&](const Tensor& a, const Tensor& b) {
      const ObjectEmbeddings o = project_embeddings(a, b, wc, wr);
      return concat({o.cls, o.reg}, 1);
    };
    return std::max(
        {check_op(r, [&](const Tensor& v) { return f(v, rr); }, rc),
         check_op(r, [&](const Tensor& v) { return f(rc, v); }, rr),
         check_leaves(r, [&] { return f(rc, rr); }, leaves_of(store))});
  });
  s.add("update_query", kModuleTolerance, [=](Rng& r) {
    ParamStore store(r.next_u64());
    const FeedForward ffn = FeedForward::create(store, "ffn", c);
    const Tensor oc = signed_tensor(r, {n, c});
    const Tensor orr = signed_tensor(r, {n, c});
    return std::max(
        {check_op(r, [&](const Tensor& v) { return update_query({v, orr}, ffn); }, oc),
         check_op(r, [&](const Tensor& v) { return update_query({oc, v}, ffn); }, orr),
         check_leaves(r, [&] { return update_query({oc, orr}, ffn); }, leaves_of(store))});
  });
  s.add("set_loss", kModuleTolerance, [](Rng& r) {
    const double w = 64, h = 64;
    const std::size_t preds = 5;
    Targets targets{random_boxes(r, 2, w, h), {0, 0}};
    const Tensor logits = signed_tensor(r, {preds, 2});
    const Tensor boxes = boxes_to_tensor(random_boxes(r, preds, w, h));
    const CostConfig cost;
    auto stage = [&](const Tensor& l, const Tensor& b) {
      return StageOutput{l, b, tensor_to_boxes(b, w, h), Tensor()};
    };
    const std::vector<MatchResult> matches{
        hungarian(cost_matrix(stage(logits, boxes), targets, cost))};
    auto loss = [&](const Tensor& l, const Tensor& b) {
      return set_loss_with_matches({stage(l, b)}, targets, cost, matches).total;
    };
    return std::max(
        check_op(r, [&](const Tensor& v) { return loss(v, boxes); }, logits),
        check_op(r, [&](const Tensor& v) { return loss(logits, v); }, boxes));
  });
}

void full_model(Suite& s) {
  for (DisentangleMode mode : {DisentangleMode::kDcw, DisentangleMode::kEntangled,
                               DisentangleMode::kHalfDim, DisentangleMode::kFullDim}) {
    const std::string name = "detector (" + std::string(disentangle_name(mode)) + ")";
    s.entries.push_back({name, 0.0, kFullModelTolerance});
    DetectorConfig cfg;
    cfg.num_queries = 3;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.pooled = 3;
    cfg.num_stages = 2;
    cfg.disentangle = mode;
    cfg.dcw_enabled = mode == DisentangleMode::kDcw;
    SceneSpec spec;
    spec.seed = 3;
    spec.min_objects = spec.max_objects = 1;
    spec.channels = cfg.d_model;
    const Scene scene = generate_scene(spec);
    const ModelState state = ModelState::create(cfg, 5);
    const auto outs = forward(scene.feature_map, state, cfg);
    // Detached boxes and matches are held at their current values so the
    // objective is smooth in the parameters.
    const auto pins = stage_input_boxes(outs, state, cfg);
    std::vector<MatchResult> matches;
    for (const auto& o : outs) {
      matches.push_back(hungarian(cost_matrix(o, scene.targets, cfg.cost)));
    }
    s.entries.back().error = grad_check_leaves(
        [&] {
          return set_loss_with_matches(
                     forward_pinned(scene.feature_map, state, cfg, pins),
                     scene.targets, cfg.cost, matches)
              .total;
        },
        leaves_of(state.store));
  }
}

}  // namespace

std::string_view grad_scope_name(GradScope scope) {
  switch (scope) {
    case GradScope::kPrimitives: return "primitives";
    case GradScope::kModules: return "modules";
    case GradScope::kFull: return "full";
  }
  return "?";
}

GradScope parse_grad_scope(std::string_view name) {
  for (GradScope s : {GradScope::kPrimitives, GradScope::kModules, GradScope::kFull}) {
    if (grad_scope_name(s) == name) return s;
  }
  throw InputError("unknown gradcheck scope '" + std::string(name) +
                   "' (expected primitives|modules|full)");
}

std::vector<GradCheckEntry> run_gradcheck_suite(GradScope scope) {
  Suite s;
  switch (scope) {
    case GradScope::kPrimitives: primitives(s); break;
    case GradScope::kModules: modules(s); break;
    case GradScope::kFull: full_model(s); break;
  }
  return s.entries;
}

void write_gradcheck_table(std::ostream& os,
                           const std::vector<GradCheckEntry>& entries) {
  os << std::left << std::setw(26) << "operation" << std::setw(14) << "worst error"
     << std::setw(11) << "tolerance" << "result\n";
  for (const auto& e : entries) {
    os << std::setw(26) << e.name << std::setw(14) << std::scientific
       << std::setprecision(2) << e.error << std::setw(11) << e.tolerance
       << (e.pass() ? "pass" : "FAIL") << '\n';
  }
  os << std::defaultfloat << std::right;
}

}  // namespace sparsedet
