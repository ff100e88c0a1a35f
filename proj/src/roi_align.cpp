// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/roi_align.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "sparsedet/errors.hpp"

namespace sparsedet {

void FeatureMap::validate() const {
  if (!data.defined() || data.ndim() != 3) {
    throw DimensionError("feature map must be [d x H x W]");
  }
  if (height() < 1 || width() < 1 || channels() < 1) {
    throw DimensionError("feature map has an empty axis: " +
                         shape_str(data.shape()));
  }
  if (!(stride > 0.0)) throw InputError("feature map stride must be positive");
}

namespace {

struct Tap {
  std::size_t offset;  // y * W + x
  double weight;
};

// Appends the four bilinear taps of grid point (x, y), scaled by w.
void bilinear_taps(std::size_t height, std::size_t width, double x, double y,
                   double w, std::vector<Tap>& taps) {
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const double lx = x - static_cast<double>(x0);
  const double ly = y - static_cast<double>(y0);
  taps.push_back({y0 * width + x0, w * (1 - ly) * (1 - lx)});
  taps.push_back({y0 * width + x1, w * (1 - ly) * lx});
  taps.push_back({y1 * width + x0, w * ly * (1 - lx)});
  taps.push_back({y1 * width + x1, w * ly * lx});
}

}  // namespace

std::vector<double> bilinear_sample(const FeatureMap& fm, double x, double y) {
  fm.validate();
  std::vector<Tap> taps;
  bilinear_taps(fm.height(), fm.width(), x, y, 1.0, taps);
  const std::size_t plane = fm.height() * fm.width();
  auto d = fm.data.data();
  std::vector<double> out(fm.channels(), 0.0);
  for (std::size_t c = 0; c < out.size(); ++c) {
    for (const auto& t : taps) out[c] += t.weight * d[c * plane + t.offset];
  }
  return out;
}

Tensor roi_align(const FeatureMap& fm, const BoxSet& boxes, std::size_t pooled,
                 std::size_t samples_per_bin) {
  fm.validate();
  if (pooled < 1 || samples_per_bin < 1) {
    throw InputError("roi_align: pooled size and samples per bin must be >= 1");
  }
  const std::size_t n = boxes.size();
  const std::size_t bins = pooled * pooled;
  const std::size_t d = fm.channels();
  const std::size_t height = fm.height(), width = fm.width();
  const std::size_t plane = height * width;
  const double inv_count =
      1.0 / static_cast<double>(samples_per_bin * samples_per_bin);

  // taps for output row (i, p) live in [starts[i*bins+p], starts[...+1]).
  auto taps = std::make_shared<std::vector<Tap>>();
  auto starts = std::make_shared<std::vector<std::size_t>>();
  taps->reserve(n * bins * samples_per_bin * samples_per_bin * 4);
  starts->reserve(n * bins + 1);
  for (const Box& b : boxes.boxes) {
    const double gx1 = b.x1 / fm.stride - 0.5;
    const double gy1 = b.y1 / fm.stride - 0.5;
    const double bin_w = (b.x2 - b.x1) / fm.stride / static_cast<double>(pooled);
    const double bin_h = (b.y2 - b.y1) / fm.stride / static_cast<double>(pooled);
    for (std::size_t by = 0; by < pooled; ++by) {
      for (std::size_t bx = 0; bx < pooled; ++bx) {
        starts->push_back(taps->size());
        for (std::size_t sy = 0; sy < samples_per_bin; ++sy) {
          const double y = gy1 + bin_h * (static_cast<double>(by) +
                                          (sy + 0.5) / samples_per_bin);
          for (std::size_t sx = 0; sx < samples_per_bin; ++sx) {
            const double x = gx1 + bin_w * (static_cast<double>(bx) +
                                            (sx + 0.5) / samples_per_bin);
            bilinear_taps(height, width, x, y, inv_count, *taps);
          }
        }
      }
    }
  }
  starts->push_back(taps->size());

  auto fd = fm.data.data();
  std::vector<double> out(n * bins * d, 0.0);
  for (std::size_t row = 0; row < n * bins; ++row) {
    double* o = out.data() + row * d;
    for (std::size_t t = (*starts)[row]; t < (*starts)[row + 1]; ++t) {
      const Tap& tap = (*taps)[t];
      for (std::size_t c = 0; c < d; ++c) {
        o[c] += tap.weight * fd[c * plane + tap.offset];
      }
    }
  }
  return detail::make_result(
      {n, bins, d}, std::move(out), {fm.data},
      [taps, starts, d, plane](detail::Node& self) {
        auto& parent = *self.parents[0];
        if (!parent.requires_grad) return;
        double* g = parent.grad_buffer().data();
        const std::size_t rows = starts->size() - 1;
        for (std::size_t row = 0; row < rows; ++row) {
          const double* go = self.grad.data() + row * d;
          for (std::size_t t = (*starts)[row]; t < (*starts)[row + 1]; ++t) {
            const Tap& tap = (*taps)[t];
            for (std::size_t c = 0; c < d; ++c) {
              g[c * plane + tap.offset] += tap.weight * go[c];
            }
          }
        }
      });
}

}  // namespace sparsedet
