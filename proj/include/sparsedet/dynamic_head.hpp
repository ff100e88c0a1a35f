// SPDX-License-Identifier: Apache-2.0
//
// Per-query interaction head: dynamic 1x1 convolutions whose weights are
// generated from the object queries, channel masks for the classification
// and regression branches, the two object-embedding projections, and the
// query update for the next stage.
#pragma once

#include <cstddef>
#include <string>

#include "sparsedet/nn.hpp"
#include "sparsedet/tensor.hpp"

namespace sparsedet {

// Generates, per query, P1 [c x k] and P2 [k x c] from one linear map of the
// query row. The generator output is laid out as [P1 row-major | P2].
struct DynamicParamsGen {
  Linear gen;
  std::size_t channels = 0;  // c
  std::size_t hidden = 0;    // k

  static DynamicParamsGen create(ParamStore& store, const std::string& name,
                                 std::size_t query_width, std::size_t channels,
                                 std::size_t hidden);
};

struct DynamicParams {
  Tensor p1;  // [N x c x k]
  Tensor p2;  // [N x k x c]
};

DynamicParams generate_dynamic_params(const Tensor& q,
                                      const DynamicParamsGen& gen);

struct DynamicConvNorms {
  LayerNorm hidden;  // over k
  LayerNorm output;  // over c

  static DynamicConvNorms create(ParamStore& store, const std::string& name,
                                 std::size_t channels, std::size_t hidden);
};

// r_i -> relu(LN(relu(LN(r_i P1_i)) P2_i)), per query i, per position.
Tensor dynamic_conv(const Tensor& r, const DynamicParams& params,
                    const DynamicConvNorms& norms);

// Two bottlenecks d -> d_b -> d (relu between); sigmoid applied on output.
struct ChannelMaskHeads {
  Linear cls_fc1, cls_fc2;
  Linear reg_fc1, reg_fc2;

  static ChannelMaskHeads create(ParamStore& store, const std::string& name,
                                 std::size_t width, std::size_t bottleneck);
};

struct ChannelMasks {
  Tensor cls;  // [N x d], in (0, 1)
  Tensor reg;
};

ChannelMasks dcw_masks(const Tensor& q, const ChannelMaskHeads& heads);

// r'(i, p, c) = r(i, p, c) * mask(i, c).
Tensor apply_dcw(const Tensor& r, const Tensor& mask);

struct ObjectEmbeddings {
  Tensor cls;  // o_c [N x d]
  Tensor reg;  // o_r [N x d]
};

// Flattens each [N x P x c] input to [N x P*c] and applies its own linear map.
ObjectEmbeddings project_embeddings(const Tensor& r_cls, const Tensor& r_reg,
                                    const Linear& w_cls, const Linear& w_reg);

// Two-layer feed-forward block (width -> 2 width -> width, relu) with a
// residual connection and a layer norm.
struct FeedForward {
  Linear fc1, fc2;
  LayerNorm norm;

  static FeedForward create(ParamStore& store, const std::string& name,
                            std::size_t width);
};

// layer_norm(x + ffn(x)).
Tensor feed_forward_update(const Tensor& x, const FeedForward& ffn);
// Next-stage queries from q_sum = o_c + o_r.
Tensor update_query(const ObjectEmbeddings& o, const FeedForward& ffn);

}  // namespace sparsedet
