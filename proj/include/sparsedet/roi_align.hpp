// SPDX-License-Identifier: Apache-2.0
//
// Fixed-size region pooling by bilinear sampling. Image coordinates map to
// grid coordinates as g = x / stride - 0.5, so integer grid coordinates sit
// on cell centers. Samples outside the grid clamp to the border.
#pragma once

#include <cstddef>
#include <vector>

#include "sparsedet/geometry.hpp"
#include "sparsedet/tensor.hpp"

namespace sparsedet {

inline constexpr std::size_t kDefaultPooledSize = 7;
inline constexpr std::size_t kDefaultSamplesPerBin = 2;

struct FeatureMap {
  Tensor data;  // [d x H_f x W_f]
  double stride = 8.0;

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  // Throws DimensionError/InputError on a malformed map.
  void validate() const;
};

// Bilinear value at grid coordinates (x along width, y along height).
std::vector<double> bilinear_sample(const FeatureMap& fm, double x, double y);

// [N x s^2 x d]: each box split into s x s bins (row-major), each bin the
// mean of samples_per_bin^2 bilinear samples at regular interior offsets.
// Differentiable in the feature values; box coordinates are constants.
Tensor roi_align(const FeatureMap& fm, const BoxSet& boxes,
                 std::size_t pooled = kDefaultPooledSize,
                 std::size_t samples_per_bin = kDefaultSamplesPerBin);

}  // namespace sparsedet
