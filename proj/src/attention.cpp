// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/attention.hpp"

#include <cmath>

#include "sparsedet/errors.hpp"
#include "sparsedet/ops.hpp"

namespace sparsedet {

std::string_view attn_mode_name(AttnMode mode) {
  switch (mode) {
    case AttnMode::kFullMsa:
      return "full";
    case AttnMode::kNoMsa:
      return "none";
    case AttnMode::kIouAsAttn:
      return "iou";
    case AttnMode::kIouEsa:
      return "iou-esa";
  }
  return "?";
}

AttnMode parse_attn_mode(std::string_view name) {
  if (name == "full") return AttnMode::kFullMsa;
  if (name == "none") return AttnMode::kNoMsa;
  if (name == "iou") return AttnMode::kIouAsAttn;
  if (name == "iou-esa") return AttnMode::kIouEsa;
  throw InputError("unknown attention mode '" + std::string(name) + "'");
}

void AttnConfig::validate() const {
  if (heads == 0 || d_model == 0 || d_model % heads != 0) {
    throw DimensionError("attention: d_model " + std::to_string(d_model) +
                         " not divisible by " + std::to_string(heads) +
                         " heads");
  }
}

MhsaParams MhsaParams::create(ParamStore& store, const std::string& name,
                              const AttnConfig& cfg) {
  cfg.validate();
  return {Linear::create(store, name + ".qkv", cfg.d_model, 3 * cfg.d_model),
          Linear::create(store, name + ".out", cfg.d_model, cfg.d_model)};
}

std::vector<double> with_unit_diagonal(const Tensor& iou) {
  if (iou.ndim() != 2 || iou.dim(0) != iou.dim(1)) {
    throw DimensionError("iou matrix must be square, got " +
                         shape_str(iou.shape()));
  }
  const std::size_t n = iou.dim(0);
  std::vector<double> m(iou.data().begin(), iou.data().end());
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1.0;
  return m;
}

namespace {

struct Projected {
  Tensor q, k, v;  // each [H x N x d_h]
};

Projected project(const Tensor& x, const MhsaParams& p, const AttnConfig& cfg) {
  cfg.validate();
  if (x.ndim() != 2 || x.dim(1) != cfg.d_model) {
    throw DimensionError("attention: queries " + shape_str(x.shape()) +
                         " do not match d_model " +
                         std::to_string(cfg.d_model));
  }
  const std::size_t d = cfg.d_model;
  Tensor qkv = p.qkv(x);
  return {split_heads(slice(qkv, 1, 0, d), cfg.heads),
          split_heads(slice(qkv, 1, d, d), cfg.heads),
          split_heads(slice(qkv, 1, 2 * d, d), cfg.heads)};
}

Tensor scaled_logits(const Projected& pr, const AttnConfig& cfg) {
  return scale(bmm(pr.q, transpose(pr.k)),
               1.0 / std::sqrt(static_cast<double>(cfg.head_dim())));
}

void check_iou(const Tensor& iou, std::size_t n) {
  if (iou.shape() != Shape{n, n}) {
    throw DimensionError("attention: iou " + shape_str(iou.shape()) +
                         " for " + std::to_string(n) + " queries");
  }
}

// Row-normalized IoU replicated per head.
Tensor iou_routing(const Tensor& iou, std::size_t heads) {
  const std::size_t n = iou.dim(0);
  std::vector<double> m = with_unit_diagonal(iou);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += m[i * n + j];
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] /= s;
  }
  std::vector<double> out;
  out.reserve(heads * n * n);
  for (std::size_t h = 0; h < heads; ++h) out.insert(out.end(), m.begin(), m.end());
  return Tensor::from_data({heads, n, n}, std::move(out));
}

Tensor weights_for(const Projected& pr, const Tensor& iou,
                   const AttnConfig& cfg, AttnMode mode) {
  const std::size_t n = pr.q.dim(1);
  switch (mode) {
    case AttnMode::kFullMsa:
      return softmax_rows(scaled_logits(pr, cfg));
    case AttnMode::kIouEsa: {
      check_iou(iou, n);
      return weighted_softmax_rows(scaled_logits(pr, cfg),
                                   with_unit_diagonal(iou));
    }
    case AttnMode::kIouAsAttn:
      check_iou(iou, n);
      return iou_routing(iou, cfg.heads);
    case AttnMode::kNoMsa:
      break;
  }
  throw ModeError("attention weights are undefined in NO_MSA mode");
}

Tensor route(const Projected& pr, const Tensor& weights, const MhsaParams& p) {
  return p.out(merge_heads(bmm(weights, pr.v)));
}

}  // namespace

Tensor standard_msa(const Tensor& q, const MhsaParams& params,
                    const AttnConfig& cfg) {
  return attend(q, Tensor(), params, cfg, AttnMode::kFullMsa);
}

Tensor iou_esa(const Tensor& q, const Tensor& iou, const MhsaParams& params,
               const AttnConfig& cfg) {
  return attend(q, iou, params, cfg, AttnMode::kIouEsa);
}

Tensor attention_weights(const Tensor& q, const Tensor& iou,
                         const MhsaParams& params, const AttnConfig& cfg,
                         AttnMode mode) {
  if (mode == AttnMode::kNoMsa) {
    throw ModeError("attention weights are undefined in NO_MSA mode");
  }
  return weights_for(project(q, params, cfg), iou, cfg, mode);
}

Tensor attend(const Tensor& q, const Tensor& iou, const MhsaParams& params,
              const AttnConfig& cfg, AttnMode mode) {
  if (mode == AttnMode::kNoMsa) {
    throw ModeError("attend() called in NO_MSA mode");
  }
  Projected pr = project(q, params, cfg);
  return route(pr, weights_for(pr, iou, cfg, mode), params);
}

}  // namespace sparsedet
