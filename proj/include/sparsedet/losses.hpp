// SPDX-License-Identifier: Apache-2.0
//
// Set-prediction objective: per cascade stage, predictions are matched to
// targets by minimum composite cost and the same composite is the loss
//
//   L = l_cls * focal + l_l1 * L1 + l_giou * (1 - GIoU)
//
// Matched predictions take all three terms; unmatched ones only the
// negative focal term. Every term is divided by max(1, #targets). L1 works
// on corner coordinates divided by the image size.
#pragma once

#include <vector>

#include "sparsedet/geometry.hpp"
#include "sparsedet/matcher.hpp"
#include "sparsedet/tensor.hpp"

namespace sparsedet {

struct CostConfig {
  double lambda_cls = 2.0;
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
};

struct Targets {
  BoxSet boxes;
  std::vector<int> classes;

  std::size_t size() const { return boxes.size(); }
};

// What one cascade stage hands to the loss and to the next stage.
struct StageOutput {
  Tensor class_logits;  // [N x C]
  Tensor box_tensor;    // [N x 4] decoded corners, differentiable
  BoxSet boxes;         // detached copy of box_tensor, passed downstream
  Tensor queries_out;   // [N x d]
};

double focal_loss(double logit, bool is_positive, const CostConfig& cfg);
// Matching cost for assigning a class: focal(positive) - focal(negative).
double focal_match_cost(double logit, const CostConfig& cfg);
double l1_box_loss(const Box& pred, const Box& gt, double image_w,
                   double image_h);
double giou_loss(const Box& pred, const Box& gt);

// [N x M] composite matching cost.
Tensor cost_matrix(const StageOutput& preds, const Targets& targets,
                   const CostConfig& cfg);

struct SetLoss {
  Tensor total;                      // scalar, differentiable
  std::vector<double> stage_losses;  // per-stage values
  std::vector<MatchResult> matches;  // per-stage assignments
};

// Matches each stage independently, then sums the stage losses.
SetLoss set_loss(const std::vector<StageOutput>& stages, const Targets& targets,
                 const CostConfig& cfg);
// Same objective with the assignment supplied (held fixed for gradient
// checks).
SetLoss set_loss_with_matches(const std::vector<StageOutput>& stages,
                              const Targets& targets, const CostConfig& cfg,
                              const std::vector<MatchResult>& matches);

}  // namespace sparsedet
