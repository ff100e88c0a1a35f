// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "sparsedet/tensor.hpp"

namespace sparsedet {

inline constexpr double kGradCheckStep = 1e-6;

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued f at x. x is copied into a fresh leaf; the caller's
// tensor is untouched. Throws DomainError when f is non-finite at a probe.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = kGradCheckStep);

// Same metric over every coordinate of several leaf tensors that a
// closure reads directly (model parameters). Each leaf is perturbed in
// place and restored.
double grad_check_leaves(const std::function<Tensor()>& f,
                         std::vector<Tensor> leaves,
                         double h = kGradCheckStep);

}  // namespace sparsedet
