// SPDX-License-Identifier: Apache-2.0
//
// Recorded primitives. Broadcasting is limited to leading-axis expansion
// (add_bias); everything else requires identical shapes.
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sparsedet/tensor.hpp"

namespace sparsedet {

inline constexpr double kLayerNormEps = 1e-5;

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

// x[..., n] + b[n]: b expanded over all leading axes.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor abs(const Tensor& x);
// Values outside [lo, hi] are pinned and pass no gradient.
Tensor clamp(const Tensor& x, double lo, double hi);

// a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched: a[B x m x k] * b[B x k x n].
Tensor bmm(const Tensor& a, const Tensor& b);
// Swap the last two axes of a 2-D or 3-D tensor.
Tensor transpose(const Tensor& x);
// x[m x k] * w[k x n] + b[n]; b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Softmax over the last axis, stabilized by the row maximum.
Tensor softmax_rows(const Tensor& x);
// Row-weighted softmax: y_ij = exp(x_ij) w_ij / sum_k exp(x_ik) w_ik, where
// x is [..., n x n] and one constant n x n weight matrix (non-negative) is
// shared by every leading slice. No gradient flows into the weights. With
// all-ones weights this evaluates bit-for-bit like softmax_rows.
Tensor weighted_softmax_rows(const Tensor& x, std::span<const double> weights);

// Normalizes over the last axis, then applies gamma[n], beta[n].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEps);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
// Gathers rows of a 2-D tensor; repeated indices accumulate gradient.
Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// [N x d] -> [H x N x d/H] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

// r[N x P x d] * mask[N x d], the mask shared over the P positions.
Tensor scale_channels(const Tensor& r, const Tensor& mask);

// Elementwise sigmoid focal loss on logits against 0/1 targets, evaluated
// in log space. targets has the logits' shape.
Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const double> targets,
                          double alpha, double gamma);

namespace scalar {
double sigmoid(double x);
// log(1 + exp(x)) without overflow.
double softplus(double x);
}  // namespace scalar

}  // namespace sparsedet
