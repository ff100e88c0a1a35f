// SPDX-License-Identifier: Apache-2.0
//
// The cascade detector. Each stage runs
//
//   attention over queries (IoU matrix of the incoming boxes) -> residual + LN
//   roi_align over the incoming boxes
//   dynamic conv with query-generated weights
//   channel masks / disentangled branches
//   class logits from o_c, box deltas from o_r, decoded on the incoming boxes
//   next queries from o_c + o_r
//
// Boxes enter the next stage detached; queries keep their graph. Stage one
// decodes on the learnable proposals b0, so b0 is trained through it.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sparsedet/attention.hpp"
#include "sparsedet/dynamic_head.hpp"
#include "sparsedet/losses.hpp"
#include "sparsedet/nn.hpp"
#include "sparsedet/roi_align.hpp"

namespace sparsedet {

// kEntangled  one dynamic branch, one projection; o_c = o_r.
// kHalfDim    two independent branches over the two channel halves, each
//             projected to d/2; the query update concatenates them.
// kFullDim    as kHalfDim, each branch projected back to d.
// kDcw        one branch, two channel masks, two projections.
enum class DisentangleMode { kEntangled, kHalfDim, kFullDim, kDcw };

// Initial proposals: all image-centered, or tiled over the image in
// round(sqrt(N)) rows with the queries spread evenly over the rows.
enum class ProposalLayout { kCentered, kGrid };

std::string_view disentangle_name(DisentangleMode mode);
DisentangleMode parse_disentangle(std::string_view name);
std::string_view layout_name(ProposalLayout layout);
ProposalLayout parse_layout(std::string_view name);

struct DetectorConfig {
  std::size_t num_queries = 10;
  std::size_t d_model = 32;
  std::size_t heads = 4;
  std::size_t num_stages = 2;
  std::size_t num_classes = 1;
  std::size_t pooled = kDefaultPooledSize;
  std::size_t samples_per_bin = kDefaultSamplesPerBin;
  AttnMode attn_mode = AttnMode::kIouEsa;
  bool dcw_enabled = true;
  DisentangleMode disentangle = DisentangleMode::kDcw;
  CostConfig cost;
  double image_w = 96;
  double image_h = 96;
  ProposalLayout proposal_layout = ProposalLayout::kGrid;
  // Side of the initial proposals as a fraction of the image side.
  double init_box_fraction = 0.33;
  // Smallest box side handed to the next stage.
  double min_box_size = 1.0;
  // Test hook: replaces both channel masks by ones.
  bool unit_dcw_masks = false;

  // Sets dcw_enabled and the matching disentangle mode together.
  void set_dcw(bool enabled);
  AttnConfig attn() const { return {d_model, heads}; }
  // Throws InputError/DimensionError on inconsistent settings.
  void validate() const;
};

struct ClassBoxHeads {
  Linear cls_fc;
  LayerNorm cls_norm;
  Linear cls_out;  // -> num_classes
  Linear reg_fc;
  LayerNorm reg_norm;
  Linear reg_out;  // -> 4 deltas
};

struct Branch {
  DynamicParamsGen gen;
  DynamicConvNorms norms;
  std::size_t channel_offset = 0;
};

struct StageParams {
  std::optional<MhsaParams> attn;
  LayerNorm attn_norm;
  std::vector<Branch> branches;  // one, or two for the half/full-dim modes
  std::optional<ChannelMaskHeads> masks;
  Linear proj_cls;
  Linear proj_reg;  // undefined in the entangled mode
  ClassBoxHeads heads;
  FeedForward ffn;
};

// All trainable state. Parameters live in `store` under stable names
// ("q0", "b0", "stage0.attn.qkv.weight", ...), which key checkpoints.
struct ModelState {
  ParamStore store;
  Tensor q0;  // [N x d]
  Tensor b0;  // [N x 4] pre-sigmoid (cx, cy, w, h), relative to the image
  std::vector<StageParams> stages;

  static ModelState create(const DetectorConfig& cfg, std::uint64_t seed);
  ModelState(ModelState&&) = default;
  ModelState& operator=(ModelState&&) = default;
  ModelState(const ModelState&) = delete;
  ModelState& operator=(const ModelState&) = delete;

 private:
  explicit ModelState(std::uint64_t seed) : store(seed) {}
};

// [N x 4] corners of the learnable proposals.
Tensor initial_boxes(const ModelState& state, const DetectorConfig& cfg);

// base: [N x 4] corners the deltas are decoded on; its values must be those
// of `boxes`. Throws NumericError naming stage and step on a non-finite
// intermediate.
StageOutput forward_stage(const Tensor& q, const Tensor& base,
                          const BoxSet& boxes, const FeatureMap& fm,
                          const StageParams& params, const DetectorConfig& cfg,
                          std::size_t stage_index = 0);

std::vector<StageOutput> forward(const FeatureMap& fm, const ModelState& state,
                                 const DetectorConfig& cfg);

// The detached boxes each stage consumed (IoU matrix, pooling, and for
// later stages the decoding base).
std::vector<BoxSet> stage_input_boxes(const std::vector<StageOutput>& outs,
                                      const ModelState& state,
                                      const DetectorConfig& cfg);

// forward with every stage's detached input boxes pinned to given values.
// Perturbing parameters then moves only what the gradient sees, which is
// what a finite-difference check of the full model needs.
std::vector<StageOutput> forward_pinned(const FeatureMap& fm,
                                        const ModelState& state,
                                        const DetectorConfig& cfg,
                                        const std::vector<BoxSet>& inputs);

// Plain momentum SGD with decoupled weight decay, global-norm clipping and a
// single x0.1 step drop.
struct OptimizerConfig {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;   // schedule length; 0 disables the drop
  double drop_fraction = 0.75;
  double drop_factor = 0.1;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}
  double learning_rate(std::size_t step) const;
  // Applies one update from the parameters' accumulated gradients, then
  // zeroes them. Returns the pre-clip global gradient norm.
  double step(std::vector<Parameter>& params);
  std::size_t steps_taken() const { return steps_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> velocity_;
  std::size_t steps_ = 0;
};

struct TrainStepResult {
  double loss = 0.0;
  std::vector<double> stage_losses;
  double grad_norm = 0.0;
};

// forward, set_loss over all stages, backward, one optimizer step. Throws
// NumericError with per-stage statistics when the loss is not finite.
TrainStepResult train_step(const Targets& targets, const FeatureMap& fm,
                           ModelState& state, const DetectorConfig& cfg,
                           Optimizer& opt);

struct Detection {
  Box box;
  double score = 0.0;
  int class_id = 0;
};

// Final-stage detections: one per query, its best class and probability.
std::vector<Detection> detect(const FeatureMap& fm, const ModelState& state,
                              const DetectorConfig& cfg);

}  // namespace sparsedet
