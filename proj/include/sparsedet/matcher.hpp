// SPDX-License-Identifier: Apache-2.0
//
// Minimum-cost bipartite assignment of targets to predictions.
#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "sparsedet/tensor.hpp"

namespace sparsedet {

struct MatchResult {
  // (prediction index, target index), ordered by target index.
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;

  std::vector<std::size_t> prediction_indices() const;
  std::vector<std::size_t> target_indices() const;
};

// Solves the N x M (predictions x targets, N >= M) assignment exactly with
// the O(n^3) shortest-augmenting-path method. Among optimal assignments the
// one whose per-target prediction vector is lexicographically smallest is
// returned. total_cost sums the chosen entries in target order. Throws
// InputError on non-finite entries and DimensionError when N < M.
MatchResult hungarian(const Tensor& cost);
MatchResult hungarian(std::span<const double> cost, std::size_t predictions,
                      std::size_t targets);

}  // namespace sparsedet
