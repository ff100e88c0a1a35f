// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "sparsedet/errors.hpp"
#include "sparsedet/geometry.hpp"
#include "sparsedet/ops.hpp"

namespace sparsedet {

namespace {

constexpr double kClassPrior = 0.01;
constexpr double kDeltaInitScale = 0.1;

bool two_branches(DisentangleMode m) {
  return m == DisentangleMode::kHalfDim || m == DisentangleMode::kFullDim;
}

void check_finite(const Tensor& t, std::size_t stage, const char* step) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError("stage " + std::to_string(stage) +
                         ": non-finite value after " + step);
    }
  }
}

Tensor flatten(const Tensor& r) {
  return reshape(r, {r.dim(0), r.dim(1) * r.dim(2)});
}

Tensor tower(const Tensor& x, const Linear& fc, const LayerNorm& norm,
             const Linear& out) {
  return out(relu(norm(fc(x))));
}

ClassBoxHeads make_heads(ParamStore& store, const std::string& name,
                         std::size_t cls_width, std::size_t reg_width,
                         std::size_t classes) {
  ClassBoxHeads h{Linear::create(store, name + ".cls_fc", cls_width, cls_width),
                  LayerNorm::create(store, name + ".cls_norm", cls_width),
                  {},
                  Linear::create(store, name + ".reg_fc", reg_width, reg_width),
                  LayerNorm::create(store, name + ".reg_norm", reg_width),
                  {}};
  h.cls_out.weight =
      store.create(name + ".cls_out.weight", {cls_width, classes}, Init::kXavier);
  h.cls_out.bias = store.create_from(
      name + ".cls_out.bias", {classes},
      std::vector<double>(classes, -std::log((1.0 - kClassPrior) / kClassPrior)));
  h.reg_out = Linear::create(store, name + ".reg_out", reg_width, 4);
  for (double& v : h.reg_out.weight.mutable_data()) v *= kDeltaInitScale;
  return h;
}

StageParams make_stage(ParamStore& store, const DetectorConfig& cfg,
                       std::size_t index) {
  const std::string name = "stage" + std::to_string(index);
  const std::size_t d = cfg.d_model;
  const std::size_t bins = cfg.pooled * cfg.pooled;
  StageParams p;
  if (cfg.attn_mode != AttnMode::kNoMsa) {
    p.attn = MhsaParams::create(store, name + ".attn", cfg.attn());
  }
  p.attn_norm = LayerNorm::create(store, name + ".attn_norm", d);

  if (two_branches(cfg.disentangle)) {
    const std::size_t half = d / 2;
    const std::size_t out = cfg.disentangle == DisentangleMode::kHalfDim ? half : d;
    for (std::size_t b = 0; b < 2; ++b) {
      const std::string bn = name + (b == 0 ? ".cls_branch" : ".reg_branch");
      p.branches.push_back(
          {DynamicParamsGen::create(store, bn + ".gen", d, half,
                                    std::max<std::size_t>(2, half / 4)),
           DynamicConvNorms::create(store, bn, half,
                                    std::max<std::size_t>(2, half / 4)),
           b * half});
    }
    p.proj_cls = Linear::create(store, name + ".proj_cls", bins * half, out);
    p.proj_reg = Linear::create(store, name + ".proj_reg", bins * half, out);
    p.heads = make_heads(store, name, out, out, cfg.num_classes);
  } else {
    const std::size_t hidden = std::max<std::size_t>(1, d / 4);
    p.branches.push_back(
        {DynamicParamsGen::create(store, name + ".dyn.gen", d, d, hidden),
         DynamicConvNorms::create(store, name + ".dyn", d, hidden), 0});
    if (cfg.disentangle == DisentangleMode::kDcw) {
      p.masks = ChannelMaskHeads::create(store, name + ".dcw", d,
                                         std::max<std::size_t>(1, d / 4));
      p.proj_cls = Linear::create(store, name + ".proj_cls", bins * d, d);
      p.proj_reg = Linear::create(store, name + ".proj_reg", bins * d, d);
    } else {
      p.proj_cls = Linear::create(store, name + ".proj", bins * d, d);
    }
    p.heads = make_heads(store, name, d, d, cfg.num_classes);
  }
  p.ffn = FeedForward::create(store, name + ".ffn", d);
  return p;
}

Tensor branch_features(const Tensor& r, const Tensor& q, const Branch& b) {
  const std::size_t c = b.gen.channels;
  Tensor rb = c == r.dim(2) ? r : slice(r, 2, b.channel_offset, c);
  return dynamic_conv(rb, generate_dynamic_params(q, b.gen), b.norms);
}

}  // namespace

std::string_view disentangle_name(DisentangleMode mode) {
  switch (mode) {
    case DisentangleMode::kEntangled: return "entangled";
    case DisentangleMode::kHalfDim: return "half_dim";
    case DisentangleMode::kFullDim: return "full_dim";
    case DisentangleMode::kDcw: return "dcw";
  }
  return "?";
}

DisentangleMode parse_disentangle(std::string_view name) {
  for (auto m : {DisentangleMode::kEntangled, DisentangleMode::kHalfDim,
                 DisentangleMode::kFullDim, DisentangleMode::kDcw}) {
    if (disentangle_name(m) == name) return m;
  }
  throw InputError("unknown disentangle mode '" + std::string(name) +
                   "' (entangled|half_dim|full_dim|dcw)");
}

std::string_view layout_name(ProposalLayout layout) {
  return layout == ProposalLayout::kGrid ? "grid" : "centered";
}

ProposalLayout parse_layout(std::string_view name) {
  if (name == "grid") return ProposalLayout::kGrid;
  if (name == "centered") return ProposalLayout::kCentered;
  throw InputError("unknown proposal layout '" + std::string(name) +
                   "' (grid|centered)");
}

void DetectorConfig::set_dcw(bool enabled) {
  dcw_enabled = enabled;
  if (enabled) {
    disentangle = DisentangleMode::kDcw;
  } else if (disentangle == DisentangleMode::kDcw) {
    disentangle = DisentangleMode::kEntangled;
  }
}

void DetectorConfig::validate() const {
  if (num_queries == 0) throw InputError("num_queries must be positive");
  if (num_stages == 0) throw InputError("num_stages must be >= 1");
  if (num_classes == 0) throw InputError("num_classes must be positive");
  if (pooled == 0 || samples_per_bin == 0) {
    throw InputError("pooled size and samples per bin must be positive");
  }
  attn().validate();
  if (dcw_enabled != (disentangle == DisentangleMode::kDcw)) {
    throw InputError("dcw_enabled and disentangle mode disagree");
  }
  if (two_branches(disentangle) && d_model % 2 != 0) {
    throw DimensionError("half/full-dim branches need an even d_model");
  }
  if (!(image_w > 0 && image_h > 0)) throw InputError("image size must be positive");
  if (!(init_box_fraction > 0 && init_box_fraction < 1)) {
    throw InputError("init_box_fraction must lie in (0, 1)");
  }
  if (!(min_box_size >= 0)) throw InputError("min_box_size must be >= 0");
  cost.validate();
}

ModelState ModelState::create(const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState s(seed);
  const std::size_t n = cfg.num_queries, d = cfg.d_model;
  std::vector<double> q(n * d);
  for (auto& v : q) v = s.store.rng().normal();
  s.q0 = s.store.create_from("q0", {n, d}, std::move(q));
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  std::vector<double> b(n * 4);
  const std::size_t rows =
      cfg.proposal_layout == ProposalLayout::kGrid
          ? std::max<std::size_t>(1, static_cast<std::size_t>(
                                         std::lround(std::sqrt(double(n)))))
          : 1;
  std::size_t i = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t in_row = n / rows + (r < n % rows ? 1 : 0);
    for (std::size_t c = 0; c < in_row; ++c, ++i) {
      const bool grid = cfg.proposal_layout == ProposalLayout::kGrid;
      b[4 * i] = grid ? logit((c + 0.5) / double(in_row)) : 0.0;
      b[4 * i + 1] = grid ? logit((r + 0.5) / double(rows)) : 0.0;
      b[4 * i + 2] = logit(cfg.init_box_fraction);
      b[4 * i + 3] = logit(cfg.init_box_fraction);
    }
  }
  s.b0 = s.store.create_from("b0", {n, 4}, std::move(b));
  for (std::size_t i = 0; i < cfg.num_stages; ++i) {
    s.stages.push_back(make_stage(s.store, cfg, i));
  }
  return s;
}

Tensor initial_boxes(const ModelState& state, const DetectorConfig& cfg) {
  Tensor s = sigmoid(state.b0);
  Tensor cx = scale(slice(s, 1, 0, 1), cfg.image_w);
  Tensor cy = scale(slice(s, 1, 1, 1), cfg.image_h);
  Tensor hw = scale(slice(s, 1, 2, 1), 0.5 * cfg.image_w);
  Tensor hh = scale(slice(s, 1, 3, 1), 0.5 * cfg.image_h);
  return concat({clamp(sub(cx, hw), 0.0, cfg.image_w),
                 clamp(sub(cy, hh), 0.0, cfg.image_h),
                 clamp(add(cx, hw), 0.0, cfg.image_w),
                 clamp(add(cy, hh), 0.0, cfg.image_h)},
                1);
}

StageOutput forward_stage(const Tensor& q, const Tensor& base,
                          const BoxSet& boxes, const FeatureMap& fm,
                          const StageParams& p, const DetectorConfig& cfg,
                          std::size_t stage_index) {
  const std::size_t n = cfg.num_queries, d = cfg.d_model;
  if (q.shape() != Shape{n, d} || base.shape() != Shape{n, 4} ||
      boxes.size() != n) {
    throw DimensionError("forward_stage: queries " + shape_str(q.shape()) +
                         ", base boxes " + shape_str(base.shape()) + ", " +
                         std::to_string(boxes.size()) + " boxes for N=" +
                         std::to_string(n));
  }
  fm.validate();
  if (fm.channels() != d) {
    throw DimensionError("forward_stage: feature map has " +
                         std::to_string(fm.channels()) + " channels, d=" +
                         std::to_string(d));
  }
  const std::size_t si = stage_index;
  check_finite(q, si, "input queries");
  check_finite(base, si, "input boxes");

  Tensor x = q;
  if (cfg.attn_mode != AttnMode::kNoMsa) {
    if (!p.attn) throw ModeError("stage has no attention parameters");
    Tensor iou = pairwise_iou(boxes);
    x = p.attn_norm(add(q, attend(q, iou, *p.attn, cfg.attn(), cfg.attn_mode)));
    check_finite(x, si, "attention");
  }

  Tensor r = roi_align(fm, boxes, cfg.pooled, cfg.samples_per_bin);
  check_finite(r, si, "roi_align");

  ObjectEmbeddings o;
  switch (cfg.disentangle) {
    case DisentangleMode::kEntangled: {
      Tensor y = branch_features(r, x, p.branches.at(0));
      o.cls = o.reg = p.proj_cls(flatten(y));
      break;
    }
    case DisentangleMode::kDcw: {
      Tensor y = branch_features(r, x, p.branches.at(0));
      check_finite(y, si, "dynamic_conv");
      ChannelMasks m;
      if (cfg.unit_dcw_masks) {
        m.cls = m.reg = Tensor::full({n, d}, 1.0);
      } else {
        m = dcw_masks(x, *p.masks);
      }
      o = project_embeddings(apply_dcw(y, m.cls), apply_dcw(y, m.reg),
                             p.proj_cls, p.proj_reg);
      break;
    }
    case DisentangleMode::kHalfDim:
    case DisentangleMode::kFullDim: {
      Tensor yc = branch_features(r, x, p.branches.at(0));
      Tensor yr = branch_features(r, x, p.branches.at(1));
      o = {p.proj_cls(flatten(yc)), p.proj_reg(flatten(yr))};
      break;
    }
  }
  check_finite(o.cls, si, "object embeddings");
  check_finite(o.reg, si, "object embeddings");

  const ClassBoxHeads& h = p.heads;
  Tensor logits = tower(o.cls, h.cls_fc, h.cls_norm, h.cls_out);
  Tensor deltas = tower(o.reg, h.reg_fc, h.reg_norm, h.reg_out);
  check_finite(logits, si, "class head");
  check_finite(deltas, si, "box head");
  Tensor decoded = decode_boxes(base, deltas, cfg.image_w, cfg.image_h);
  check_finite(decoded, si, "box decoding");

  Tensor q_next = cfg.disentangle == DisentangleMode::kHalfDim
                      ? feed_forward_update(concat({o.cls, o.reg}, 1), p.ffn)
                      : update_query(o, p.ffn);
  check_finite(q_next, si, "query update");

  return {logits, decoded, tensor_to_boxes(decoded, cfg.image_w, cfg.image_h),
          q_next};
}

namespace {

BoxSet next_stage_boxes(const StageOutput& out, const DetectorConfig& cfg) {
  BoxSet boxes = out.boxes;
  for (Box& b : boxes.boxes) {
    b = ensure_min_size(b, cfg.min_box_size, cfg.image_w, cfg.image_h);
  }
  return boxes;
}

std::vector<StageOutput> run_stages(const FeatureMap& fm,
                                    const ModelState& state,
                                    const DetectorConfig& cfg,
                                    const std::vector<BoxSet>* pinned) {
  cfg.validate();
  if (state.stages.size() != cfg.num_stages) {
    throw DimensionError("model has " + std::to_string(state.stages.size()) +
                         " stages, config asks for " +
                         std::to_string(cfg.num_stages));
  }
  if (pinned && pinned->size() != cfg.num_stages) {
    throw DimensionError("pinned boxes: one set per stage required");
  }
  Tensor base = initial_boxes(state, cfg);
  BoxSet boxes = pinned ? (*pinned)[0]
                        : tensor_to_boxes(base, cfg.image_w, cfg.image_h);
  Tensor q = state.q0;
  std::vector<StageOutput> outs;
  for (std::size_t s = 0; s < cfg.num_stages; ++s) {
    outs.push_back(forward_stage(q, base, boxes, fm, state.stages[s], cfg, s));
    if (s + 1 == cfg.num_stages) break;
    q = outs.back().queries_out;
    boxes = pinned ? (*pinned)[s + 1] : next_stage_boxes(outs.back(), cfg);
    base = boxes_to_tensor(boxes);
  }
  return outs;
}

}  // namespace

std::vector<StageOutput> forward(const FeatureMap& fm, const ModelState& state,
                                 const DetectorConfig& cfg) {
  return run_stages(fm, state, cfg, nullptr);
}

std::vector<StageOutput> forward_pinned(const FeatureMap& fm,
                                        const ModelState& state,
                                        const DetectorConfig& cfg,
                                        const std::vector<BoxSet>& inputs) {
  return run_stages(fm, state, cfg, &inputs);
}

std::vector<BoxSet> stage_input_boxes(const std::vector<StageOutput>& outs,
                                      const ModelState& state,
                                      const DetectorConfig& cfg) {
  std::vector<BoxSet> inputs;
  inputs.push_back(
      tensor_to_boxes(initial_boxes(state, cfg), cfg.image_w, cfg.image_h));
  for (std::size_t s = 0; s + 1 < outs.size(); ++s) {
    inputs.push_back(next_stage_boxes(outs[s], cfg));
  }
  return inputs;
}

double Optimizer::learning_rate(std::size_t step) const {
  double lr = cfg_.lr;
  if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup_steps);
  }
  if (cfg_.total_steps > 0 &&
      static_cast<double>(step) >=
          cfg_.drop_fraction * static_cast<double>(cfg_.total_steps)) {
    lr *= cfg_.drop_factor;
  }
  return lr;
}

double Optimizer::step(std::vector<Parameter>& params) {
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.tensor.numel(), 0.0);
  }
  if (velocity_.size() != params.size()) {
    throw ContractError("optimizer: parameter list changed between steps");
  }
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  double sq = 0.0;
  for (const auto& p : params) {
    grads.push_back(p.tensor.grad());
    for (double g : grads.back()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  const double factor =
      cfg_.clip_norm > 0 && norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
  const double lr = learning_rate(steps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].tensor.mutable_data();
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      v[k] = cfg_.momentum * v[k] + factor * grads[i][k];
      values[k] -= lr * cfg_.weight_decay * values[k] + lr * v[k];
    }
    params[i].tensor.zero_grad();
  }
  ++steps_;
  return norm;
}

namespace {

std::string stage_stats(const std::vector<StageOutput>& outs) {
  std::ostringstream os;
  for (std::size_t s = 0; s < outs.size(); ++s) {
    auto logits = outs[s].class_logits.data();
    double lo = INFINITY, hi = -INFINITY;
    std::size_t bad = 0;
    for (double v : logits) {
      if (!std::isfinite(v)) ++bad;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::size_t degenerate = 0;
    for (const Box& b : outs[s].boxes.boxes) degenerate += b.degenerate();
    os << "\n  stage " << s << ": logits [" << lo << ", " << hi << "], "
       << bad << " non-finite, " << degenerate << " degenerate boxes";
  }
  return os.str();
}

}  // namespace

TrainStepResult train_step(const Targets& targets, const FeatureMap& fm,
                           ModelState& state, const DetectorConfig& cfg,
                           Optimizer& opt) {
  std::vector<StageOutput> outs = forward(fm, state, cfg);
  SetLoss loss = set_loss(outs, targets, cfg.cost);
  TrainStepResult result;
  result.loss = loss.total.item();
  result.stage_losses = loss.stage_losses;
  if (!std::isfinite(result.loss)) {
    std::ostringstream os;
    os << "non-finite loss at optimizer step " << opt.steps_taken();
    for (std::size_t s = 0; s < loss.stage_losses.size(); ++s) {
      os << (s == 0 ? " (stage losses " : ", ") << loss.stage_losses[s];
    }
    os << ")" << stage_stats(outs);
    throw NumericError(os.str());
  }
  loss.total.backward();
  result.grad_norm = opt.step(state.store.params());
  return result;
}

std::vector<Detection> detect(const FeatureMap& fm, const ModelState& state,
                              const DetectorConfig& cfg) {
  const StageOutput last = forward(fm, state, cfg).back();
  const std::size_t classes = cfg.num_classes;
  auto logits = last.class_logits.data();
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < cfg.num_queries; ++i) {
    const auto row = logits.subspan(i * classes, classes);
    const auto best = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
    dets.push_back({last.boxes.boxes[i], scalar::sigmoid(row[best]),
                    static_cast<int>(best)});
  }
  return dets;
}

}  // namespace sparsedet
