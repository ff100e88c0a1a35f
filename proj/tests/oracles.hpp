// SPDX-License-Identifier: Apache-2.0
//
// Plain-loop reference computations shared by the tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sparsedet/geometry.hpp"
#include "sparsedet/nn.hpp"
#include "sparsedet/random.hpp"
#include "sparsedet/roi_align.hpp"
#include "sparsedet/tensor.hpp"

namespace oracle {

using sparsedet::Box;
using sparsedet::FeatureMap;
using sparsedet::Rng;
using sparsedet::Tensor;
using Vec = std::vector<double>;

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

inline Tensor random_tensor(Rng& rng, const sparsedet::Shape& shape, double lo = -1.0,
                            double hi = 1.0) {
  Vec v(sparsedet::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

inline Box random_box(Rng& rng, double w, double h) {
  const double bw = rng.uniform(0.05, 0.6) * w, bh = rng.uniform(0.05, 0.6) * h;
  const double x = rng.uniform(0.0, w - bw), y = rng.uniform(0.0, h - bh);
  return {x, y, x + bw, y + bh};
}

inline Vec matmul(std::span<const double> a, std::span<const double> b, std::size_t m,
                  std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
    }
  }
  return c;
}

inline Vec linear(std::span<const double> x, std::size_t m, const sparsedet::Linear& l) {
  Vec y = matmul(x, l.weight.data(), m, l.in(), l.out());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < l.out(); ++j) y[i * l.out() + j] += l.bias.data()[j];
  }
  return y;
}

inline Vec softmax(Vec row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double z = 0.0;
  for (auto& v : row) z += (v = std::exp(v - mx));
  for (auto& v : row) v /= z;
  return row;
}

// IoU by counting the centers of a fine raster grid covered by each box.
inline double raster_iou(const Box& a, const Box& b, double cell) {
  const double lo_x = std::min(a.x1, b.x1), hi_x = std::max(a.x2, b.x2);
  const double lo_y = std::min(a.y1, b.y1), hi_y = std::max(a.y2, b.y2);
  auto inside = [](const Box& r, double x, double y) {
    return x >= r.x1 && x < r.x2 && y >= r.y1 && y < r.y2;
  };
  long both = 0, either = 0;
  for (double y = lo_y + cell / 2; y < hi_y; y += cell) {
    for (double x = lo_x + cell / 2; x < hi_x; x += cell) {
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      both += ia && ib;
      either += ia || ib;
    }
  }
  return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

// Value of the piecewise-bilinear surface through the cell centers,
// clamped at the border.
inline double surface(const FeatureMap& fm, std::size_t ch, double gx, double gy) {
  const double w = static_cast<double>(fm.width() - 1), h = static_cast<double>(fm.height() - 1);
  gx = std::clamp(gx, 0.0, w);
  gy = std::clamp(gy, 0.0, h);
  double total = 0.0;
  for (std::size_t y = 0; y < fm.height(); ++y) {
    for (std::size_t x = 0; x < fm.width(); ++x) {
      // Tent weights are an independent way to write bilinear interpolation.
      const double wx = std::max(0.0, 1.0 - std::abs(gx - static_cast<double>(x)));
      const double wy = std::max(0.0, 1.0 - std::abs(gy - static_cast<double>(y)));
      total += wx * wy * fm.data.at({ch, y, x});
    }
  }
  return total;
}

// Bin means from a dense grid of dense x dense samples per bin.
inline Vec dense_pool(const FeatureMap& fm, const Box& b, std::size_t s, std::size_t dense) {
  const std::size_t d = fm.channels();
  Vec out(s * s * d, 0.0);
  for (std::size_t by = 0; by < s; ++by) {
    for (std::size_t bx = 0; bx < s; ++bx) {
      for (std::size_t iy = 0; iy < dense; ++iy) {
        for (std::size_t ix = 0; ix < dense; ++ix) {
          const double x = b.x1 + (static_cast<double>(bx) + (ix + 0.5) / dense) * b.width() / s;
          const double y = b.y1 + (static_cast<double>(by) + (iy + 0.5) / dense) * b.height() / s;
          for (std::size_t ch = 0; ch < d; ++ch) {
            out[(by * s + bx) * d + ch] += surface(fm, ch, x / fm.stride - 0.5, y / fm.stride - 0.5) /
                                           static_cast<double>(dense * dense);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace oracle
