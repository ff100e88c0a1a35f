// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sparsedet/errors.hpp"

namespace sparsedet {

std::vector<std::size_t> MatchResult::prediction_indices() const {
  std::vector<std::size_t> out;
  for (const auto& [p, t] : pairs) out.push_back(p);
  return out;
}

std::vector<std::size_t> MatchResult::target_indices() const {
  std::vector<std::size_t> out;
  for (const auto& [p, t] : pairs) out.push_back(t);
  return out;
}

namespace {

// a is rows x cols (rows <= cols), row-major; returns, per row, its column
// in a minimum-cost assignment. Potentials-based augmenting paths, scanning
// columns in index order.
std::vector<std::size_t> solve(const std::vector<double>& a, std::size_t rows,
                               std::size_t cols) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of_row(rows, 0);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (p[j] != 0) col_of_row[p[j] - 1] = j - 1;
  }
  return col_of_row;
}

double assignment_cost(const std::vector<double>& a, std::size_t cols,
                       const std::vector<std::size_t>& col_of_row) {
  double s = 0.0;
  for (std::size_t r = 0; r < col_of_row.size(); ++r) {
    s += a[r * cols + col_of_row[r]];
  }
  return s;
}

// Optimal cost of the sub-problem on the given rows and columns.
double optimal_cost(const std::vector<double>& a, std::size_t cols,
                    const std::vector<std::size_t>& row_ids,
                    const std::vector<std::size_t>& col_ids) {
  if (row_ids.empty()) return 0.0;
  std::vector<double> sub;
  sub.reserve(row_ids.size() * col_ids.size());
  for (auto r : row_ids)
    for (auto c : col_ids) sub.push_back(a[r * cols + c]);
  return assignment_cost(sub, col_ids.size(),
                         solve(sub, row_ids.size(), col_ids.size()));
}

}  // namespace

MatchResult hungarian(const Tensor& cost) {
  if (cost.ndim() != 2) {
    throw DimensionError("hungarian: cost must be 2-D, got " +
                         shape_str(cost.shape()));
  }
  return hungarian(cost.data(), cost.dim(0), cost.dim(1));
}

MatchResult hungarian(std::span<const double> cost, std::size_t predictions,
                      std::size_t targets) {
  if (cost.size() != predictions * targets) {
    throw DimensionError("hungarian: cost has wrong size");
  }
  if (predictions < targets) {
    throw DimensionError("hungarian: " + std::to_string(targets) +
                         " targets exceed " + std::to_string(predictions) +
                         " predictions");
  }
  for (double c : cost) {
    if (!std::isfinite(c)) throw InputError("hungarian: non-finite cost entry");
  }
  MatchResult result;
  if (targets == 0) return result;

  // Work on the transpose: rows are targets, columns are predictions.
  const std::size_t rows = targets, cols = predictions;
  std::vector<double> a(rows * cols);
  for (std::size_t p = 0; p < cols; ++p)
    for (std::size_t t = 0; t < rows; ++t) a[t * cols + p] = cost[p * targets + t];

  std::vector<std::size_t> best = solve(a, rows, cols);
  const double optimum = assignment_cost(a, cols, best);
  const double tol = 1e-12 * std::max(1.0, std::abs(optimum));

  // Lexicographic refinement: give each target, in order, the smallest
  // prediction index that still admits an optimal completion.
  std::vector<std::size_t> chosen;
  std::vector<char> taken(cols, 0);
  double fixed = 0.0;
  bool refined = true;
  for (std::size_t t = 0; t < rows && refined; ++t) {
    std::vector<std::size_t> rest_rows;
    for (std::size_t r = t + 1; r < rows; ++r) rest_rows.push_back(r);
    bool found = false;
    for (std::size_t c = 0; c < cols && !found; ++c) {
      if (taken[c]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t k = 0; k < cols; ++k) {
        if (!taken[k] && k != c) rest_cols.push_back(k);
      }
      const double total =
          fixed + a[t * cols + c] + optimal_cost(a, cols, rest_rows, rest_cols);
      if (total <= optimum + tol) {
        chosen.push_back(c);
        taken[c] = 1;
        fixed += a[t * cols + c];
        found = true;
      }
    }
    refined = found;
  }
  if (refined) best = chosen;

  for (std::size_t t = 0; t < rows; ++t) result.pairs.emplace_back(best[t], t);
  result.total_cost = assignment_cost(a, cols, best);
  return result;
}

}  // namespace sparsedet
