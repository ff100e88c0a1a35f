// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "sparsedet/errors.hpp"
#include "sparsedet/ops.hpp"

namespace sparsedet {

void CostConfig::validate() const {
  if (lambda_cls < 0 || lambda_l1 < 0 || lambda_giou < 0) {
    throw InputError("loss weights must be non-negative");
  }
  if (!(focal_alpha >= 0 && focal_alpha <= 1) || focal_gamma < 0) {
    throw InputError("focal alpha must lie in [0, 1] and gamma be >= 0");
  }
}

double focal_loss(double logit, bool is_positive, const CostConfig& cfg) {
  const double a = cfg.focal_alpha, g = cfg.focal_gamma;
  // log p = -softplus(-x), log(1 - p) = -softplus(x)
  if (is_positive) {
    return a * std::exp(-g * scalar::softplus(logit)) * scalar::softplus(-logit);
  }
  return (1.0 - a) * std::exp(-g * scalar::softplus(-logit)) *
         scalar::softplus(logit);
}

double focal_match_cost(double logit, const CostConfig& cfg) {
  return focal_loss(logit, true, cfg) - focal_loss(logit, false, cfg);
}

double l1_box_loss(const Box& pred, const Box& gt, double image_w,
                   double image_h) {
  return std::abs(pred.x1 - gt.x1) / image_w + std::abs(pred.y1 - gt.y1) / image_h +
         std::abs(pred.x2 - gt.x2) / image_w + std::abs(pred.y2 - gt.y2) / image_h;
}

double giou_loss(const Box& pred, const Box& gt) { return 1.0 - giou(pred, gt); }

namespace {

void check_stage(const StageOutput& s, const Targets& targets) {
  if (s.class_logits.ndim() != 2 || s.box_tensor.ndim() != 2 ||
      s.box_tensor.dim(1) != 4 || s.class_logits.dim(0) != s.box_tensor.dim(0) ||
      s.boxes.size() != s.box_tensor.dim(0)) {
    throw DimensionError("stage output shapes disagree: logits " +
                         shape_str(s.class_logits.shape()) + ", boxes " +
                         shape_str(s.box_tensor.shape()));
  }
  if (targets.classes.size() != targets.size()) {
    throw DimensionError("targets: class count differs from box count");
  }
  const auto classes = static_cast<int>(s.class_logits.dim(1));
  for (int c : targets.classes) {
    if (c < 0 || c >= classes) {
      throw InputError("target class " + std::to_string(c) + " out of range");
    }
  }
}

}  // namespace

Tensor cost_matrix(const StageOutput& preds, const Targets& targets,
                   const CostConfig& cfg) {
  check_stage(preds, targets);
  const std::size_t n = preds.boxes.size(), m = targets.size();
  const std::size_t classes = preds.class_logits.dim(1);
  const double w = targets.boxes.image_w, h = targets.boxes.image_h;
  auto logits = preds.class_logits.data();
  std::vector<double> c(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double logit =
          logits[i * classes + static_cast<std::size_t>(targets.classes[j])];
      const Box& p = preds.boxes.boxes[i];
      const Box& g = targets.boxes.boxes[j];
      c[i * m + j] = cfg.lambda_cls * focal_match_cost(logit, cfg) +
                     cfg.lambda_l1 * l1_box_loss(p, g, w, h) +
                     cfg.lambda_giou * giou_loss(p, g);
    }
  }
  return Tensor::from_data({n, m}, std::move(c));
}

SetLoss set_loss(const std::vector<StageOutput>& stages, const Targets& targets,
                 const CostConfig& cfg) {
  std::vector<MatchResult> matches;
  matches.reserve(stages.size());
  for (const auto& s : stages) {
    matches.push_back(hungarian(cost_matrix(s, targets, cfg)));
  }
  return set_loss_with_matches(stages, targets, cfg, matches);
}

SetLoss set_loss_with_matches(const std::vector<StageOutput>& stages,
                              const Targets& targets, const CostConfig& cfg,
                              const std::vector<MatchResult>& matches) {
  cfg.validate();
  if (stages.empty()) throw ContractError("set_loss: no stages");
  if (matches.size() != stages.size()) {
    throw ContractError("set_loss: one match per stage required");
  }
  const std::size_t m = targets.size();
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, m));
  const double w = targets.boxes.image_w, h = targets.boxes.image_h;

  SetLoss out;
  out.matches = matches;
  Tensor total;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageOutput& st = stages[s];
    check_stage(st, targets);
    const MatchResult& match = matches[s];
    const std::size_t classes = st.class_logits.dim(1);

    std::vector<double> onehot(st.class_logits.numel(), 0.0);
    for (const auto& [p, t] : match.pairs) {
      onehot[p * classes + static_cast<std::size_t>(targets.classes[t])] = 1.0;
    }
    Tensor stage_loss = scale(
        sum(sigmoid_focal_loss(st.class_logits, onehot, cfg.focal_alpha,
                               cfg.focal_gamma)),
        cfg.lambda_cls * norm);

    if (!match.pairs.empty()) {
      const auto pred_idx = match.prediction_indices();
      std::vector<double> gt, inv_size;
      for (const auto& [p, t] : match.pairs) {
        const Box& b = targets.boxes.boxes[t];
        gt.insert(gt.end(), {b.x1, b.y1, b.x2, b.y2});
        inv_size.insert(inv_size.end(), {1.0 / w, 1.0 / h, 1.0 / w, 1.0 / h});
      }
      const Shape shape{match.pairs.size(), 4};
      Tensor matched = index_rows(st.box_tensor, pred_idx);
      Tensor gt_t = Tensor::from_data(shape, gt);
      Tensor l1 = sum(mul(abs(sub(matched, gt_t)),
                          Tensor::from_data(shape, inv_size)));
      Tensor giou_sum = sum(giou_rows(matched, gt_t));
      Tensor giou_term =
          add_scalar(neg(giou_sum), static_cast<double>(match.pairs.size()));
      stage_loss = add(stage_loss, scale(l1, cfg.lambda_l1 * norm));
      stage_loss = add(stage_loss, scale(giou_term, cfg.lambda_giou * norm));
    }
    out.stage_losses.push_back(stage_loss.item());
    total = total.defined() ? add(total, stage_loss) : stage_loss;
  }
  out.total = total;
  return out;
}

}  // namespace sparsedet
