// SPDX-License-Identifier: Apache-2.0
//
// Multi-head self attention over object queries, with the IoU-enhanced
// routing variant and the two degraded modes used in ablations.
//
// Per head h with d_h = d / H:
//   logits = Q_h K_h^T / sqrt(d_h)
//   FULL_MSA     w_ij = softmax_j(logits_ij)
//   IOU_ESA      w_ij = exp(logits_ij) IoU_ij / sum_k exp(logits_ik) IoU_ik
//   IOU_AS_ATTN  w_ij = IoU_ij / sum_k IoU_ik          (logits unused)
// and out = concat_h(w_h V_h) W_o + b_o. One IoU matrix is shared by all
// heads; its diagonal is forced to 1 so every row has a positive
// normalizer. The IoU matrix is data: no gradient flows into it.
#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "sparsedet/nn.hpp"
#include "sparsedet/tensor.hpp"

namespace sparsedet {

enum class AttnMode { kFullMsa, kNoMsa, kIouAsAttn, kIouEsa };

// CLI spelling: full | none | iou | iou-esa.
std::string_view attn_mode_name(AttnMode mode);
AttnMode parse_attn_mode(std::string_view name);

struct AttnConfig {
  std::size_t d_model = 32;
  std::size_t heads = 4;

  std::size_t head_dim() const { return d_model / heads; }
  // Throws DimensionError unless heads > 0 and heads divides d_model.
  void validate() const;
};

struct MhsaParams {
  Linear qkv;  // d -> 3d, fused [Q | K | V]
  Linear out;  // d -> d

  static MhsaParams create(ParamStore& store, const std::string& name,
                           const AttnConfig& cfg);
};

// Copy of an N x N IoU tensor with the diagonal set to 1.
std::vector<double> with_unit_diagonal(const Tensor& iou);

Tensor standard_msa(const Tensor& q, const MhsaParams& params,
                    const AttnConfig& cfg);
Tensor iou_esa(const Tensor& q, const Tensor& iou, const MhsaParams& params,
               const AttnConfig& cfg);

// [H x N x N] routing weights for the given mode. NO_MSA has no weights and
// throws ModeError; callers skip attention entirely in that mode.
Tensor attention_weights(const Tensor& q, const Tensor& iou,
                         const MhsaParams& params, const AttnConfig& cfg,
                         AttnMode mode);

// Attention output (before the caller's residual + norm) for any mode but
// NO_MSA.
Tensor attend(const Tensor& q, const Tensor& iou, const MhsaParams& params,
              const AttnConfig& cfg, AttnMode mode);

}  // namespace sparsedet
