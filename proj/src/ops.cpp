// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sparsedet/errors.hpp"

namespace sparsedet {

using detail::Node;
using detail::make_result;

namespace {

// Gradient buffer of parent i, or nullptr when that input is a constant.
double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.grad_buffer().data();
}

const std::vector<double>& parent_data(const Node& self, std::size_t i) {
  return self.parents[i]->data;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
  require_same_shape(name, a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  return make_result(a.shape(), std::move(out), {a, b}, [bwd](Node& self) {
    const auto& x = parent_data(self, 0);
    const auto& y = parent_data(self, 1);
    double* gx = parent_grad(self, 0);
    double* gy = parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      auto [dx, dy] = bwd(x[i], y[i], self.data[i]);
      if (gx) gx[i] += self.grad[i] * dx;
      if (gy) gy[i] += self.grad[i] * dy;
    }
  });
}

// dOut/dIn expressed from (input, output).
template <typename Fwd, typename Deriv>
Tensor unary_elementwise(const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& in = parent_data(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      gx[i] += self.grad[i] * deriv(in[i], self.data[i]);
    }
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Shared kernel of softmax_rows and weighted_softmax_rows. With all-ones
// weights the log-offsets are exactly 0, so both routes yield identical bits.
std::vector<double> softmax_kernel(std::span<const double> x, std::size_t n,
                                   const double* weights) {
  std::vector<double> out(x.size());
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = out.data() + r * n;
    const double* wr = weights ? weights + (r % n) * n : nullptr;
    // Weights enter as log-offsets so the largest term is exp(0) = 1.
    auto shifted = [&](std::size_t j) {
      return wr ? xr[j] + std::log(wr[j]) : xr[j];
    };
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (wr && !(wr[j] > 0.0)) continue;
      m = std::max(m, shifted(j));
    }
    if (!std::isfinite(m)) {
      throw ContractError("softmax: row has no positive weight");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = wr && !(wr[j] > 0.0) ? 0.0 : std::exp(shifted(j) - m);
      yr[j] = e;
      s += e;
    }
    if (!(s > 0.0)) throw ContractError("softmax: zero row normalizer");
    for (std::size_t j = 0; j < n; ++j) yr[j] = yr[j] / s;
  }
  return out;
}

void softmax_backward(Node& self, std::size_t n) {
  double* gx = parent_grad(self, 0);
  if (!gx) return;
  const std::size_t rows = self.data.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* y = self.data.data() + r * n;
    const double* g = self.grad.data() + r * n;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
    for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
  }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// dA[m x k] += dC[m x n] * B[k x n]^T
void gemm_nt(const double* dc, const double* b, double* da, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
      da[i * k + p] += acc;
    }
  }
}

// dB[k x n] += A[m x k]^T * dC[m x n]
void gemm_tn(const double* a, const double* dc, double* db, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* gi = dc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      double* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * gi[j];
    }
  }
}

}  // namespace

namespace scalar {
double sigmoid(double x) { return stable_sigmoid(x); }
double softplus(double x) { return sparsedet::softplus(x); }
}  // namespace scalar

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair{y, x}; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double out) {
        return std::pair{1.0 / y, -out / y};
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "minimum", a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double) {
        return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "maximum", a, b, [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double) {
        return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0};
      });
}

Tensor scale(const Tensor& x, double s) {
  return unary_elementwise(
      x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_elementwise(
      x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.ndim() == 0 || bias.ndim() != 1 || bias.dim(0) != x.shape().back()) {
    throw DimensionError("add_bias: cannot expand " + shape_str(bias.shape()) +
                         " over " + shape_str(x.shape()));
  }
  const std::size_t n = bias.dim(0);
  auto xd = x.data();
  auto bd = bias.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] + bd[i % n];
  return make_result(x.shape(), std::move(out), {x, bias}, [n](Node& self) {
    double* gx = parent_grad(self, 0);
    double* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (gx) gx[i] += self.grad[i];
      if (gb) gb[i % n] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(x, stable_sigmoid,
                           [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_elementwise(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor abs(const Tensor& x) {
  return unary_elementwise(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_elementwise(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const auto& ad = parent_data(self, 0);
    const auto& bd = parent_data(self, 1);
    if (double* ga = parent_grad(self, 0)) {
      gemm_nt(self.grad.data(), bd.data(), ga, m, k, n);
    }
    if (double* gb = parent_grad(self, 1)) {
      gemm_tn(ad.data(), self.grad.data(), gb, m, k, n);
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(B * m * n, 0.0);
  for (std::size_t t = 0; t < B; ++t) {
    gemm_nn(a.data().data() + t * m * k, b.data().data() + t * k * n,
            out.data() + t * m * n, m, k, n);
  }
  return make_result({B, m, n}, std::move(out), {a, b},
                     [B, m, k, n](Node& self) {
                       const auto& ad = parent_data(self, 0);
                       const auto& bd = parent_data(self, 1);
                       double* ga = parent_grad(self, 0);
                       double* gb = parent_grad(self, 1);
                       for (std::size_t t = 0; t < B; ++t) {
                         const double* g = self.grad.data() + t * m * n;
                         if (ga) gemm_nt(g, bd.data() + t * k * n,
                                         ga + t * m * k, m, k, n);
                         if (gb) gemm_tn(ad.data() + t * m * k, g,
                                         gb + t * k * n, m, k, n);
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2 && x.ndim() != 3) {
    throw DimensionError("transpose: expected 2-D or 3-D, got " +
                         shape_str(x.shape()));
  }
  const bool batched = x.ndim() == 3;
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t m = x.dim(batched ? 1 : 0);
  const std::size_t n = x.dim(batched ? 2 : 1);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t t = 0; t < B; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out[t * m * n + j * m + i] = xd[t * m * n + i * n + j];
  Shape shape = batched ? Shape{B, n, m} : Shape{n, m};
  return make_result(std::move(shape), std::move(out), {x},
                     [B, m, n](Node& self) {
                       double* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t t = 0; t < B; ++t)
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j)
                             gx[t * m * n + i * n + j] +=
                                 self.grad[t * m * n + j * m + i];
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_bias(y, b) : y;
}

Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() == 0) throw DimensionError("softmax_rows: scalar input");
  const std::size_t n = x.shape().back();
  auto out = softmax_kernel(x.data(), n, nullptr);
  return make_result(x.shape(), std::move(out), {x},
                     [n](Node& self) { softmax_backward(self, n); });
}

Tensor weighted_softmax_rows(const Tensor& x, std::span<const double> weights) {
  if (x.ndim() < 2) throw DimensionError("weighted_softmax_rows: need >= 2-D");
  const std::size_t n = x.shape().back();
  if (x.shape()[x.ndim() - 2] != n || weights.size() != n * n) {
    throw DimensionError("weighted_softmax_rows: logits " +
                         shape_str(x.shape()) + " vs " +
                         std::to_string(weights.size()) + " weights");
  }
  auto out = softmax_kernel(x.data(), n, weights.data());
  return make_result(x.shape(), std::move(out), {x},
                     [n](Node& self) { softmax_backward(self, n); });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.ndim() == 0 || gamma.shape() != Shape{x.shape().back()} ||
      beta.shape() != gamma.shape()) {
    throw DimensionError("layer_norm: " + shape_str(x.shape()) + " with scale " +
                         shape_str(gamma.shape()));
  }
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> out(xd.size());
  // Per-row normalized values and inverse std, kept for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xr[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gd[j] * h + bd[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, rows, xhat, inv_std](Node& self) {
        double* gx = parent_grad(self, 0);
        double* gg = parent_grad(self, 1);
        double* gb = parent_grad(self, 2);
        const auto& gamma_d = parent_data(self, 1);
        std::vector<double> gh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * n;
          const double* h = xhat->data() + r * n;
          double mean_gh = 0.0, mean_ghh = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            if (gg) gg[j] += g[j] * h[j];
            if (gb) gb[j] += g[j];
            gh[j] = g[j] * gamma_d[j];
            mean_gh += gh[j];
            mean_ghh += gh[j] * h[j];
          }
          if (!gx) continue;
          mean_gh /= static_cast<double>(n);
          mean_ghh /= static_cast<double>(n);
          const double is = (*inv_std)[r];
          for (std::size_t j = 0; j < n; ++j) {
            gx[r * n + j] += is * (gh[j] - mean_gh - h[j] * mean_ghh);
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " +
                           shape_str(s0));
    }
    widths.push_back(s[axis] * inner);
    total += s[axis];
  }
  const std::size_t row = total * inner;
  std::vector<double> out(outer * row);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(d.data() + o * widths[k], widths[k],
                  out.data() + o * row + offset);
    }
    offset += widths[k];
  }
  Shape shape = s0;
  shape[axis] = total;
  return make_result(std::move(shape), std::move(out), parts,
                     [widths, outer, row](Node& self) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         if (double* g = parent_grad(self, k)) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < widths[k]; ++j)
                               g[o * widths[k] + j] +=
                                   self.grad[o * row + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    throw DimensionError("slice: [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") on axis " +
                         std::to_string(axis) + " of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t src_row = s[axis] * inner;
  const std::size_t dst_row = length * inner;
  const std::size_t off = start * inner;
  auto xd = x.data();
  std::vector<double> out(outer * dst_row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xd.data() + o * src_row + off, dst_row,
                out.data() + o * dst_row);
  }
  Shape shape = s;
  shape[axis] = length;
  return make_result(std::move(shape), std::move(out), {x},
                     [outer, src_row, dst_row, off](Node& self) {
                       double* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < dst_row; ++j)
                           gx[o * src_row + off + j] +=
                               self.grad[o * dst_row + j];
                     });
}

Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.ndim() != 2) throw DimensionError("index_rows: expected 2-D input");
  const std::size_t n = x.dim(0), w = x.dim(1);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  auto xd = x.data();
  std::vector<double> out(idx.size() * w);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw DimensionError("index_rows: row out of range");
    std::copy_n(xd.data() + idx[r] * w, w, out.data() + r * w);
  }
  return make_result({idx.size(), w}, std::move(out), {x},
                     [idx, w](Node& self) {
                       double* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         for (std::size_t j = 0; j < w; ++j)
                           gx[idx[r] * w + j] += self.grad[r * w + j];
                     });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const std::size_t n = self.parents[0]->data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.ndim() != 2 || heads == 0 || x.dim(1) % heads != 0) {
    throw DimensionError("split_heads: " + shape_str(x.shape()) +
                         " not divisible into " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t n = x.dim(0), d = x.dim(1), dh = d / heads;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dh; ++c)
        out[(h * n + i) * dh + c] = xd[i * d + h * dh + c];
  return make_result({heads, n, dh}, std::move(out), {x},
                     [heads, n, d, dh](Node& self) {
                       double* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t h = 0; h < heads; ++h)
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t c = 0; c < dh; ++c)
                             gx[i * d + h * dh + c] +=
                                 self.grad[(h * n + i) * dh + c];
                     });
}

Tensor merge_heads(const Tensor& x) {
  if (x.ndim() != 3) throw DimensionError("merge_heads: expected 3-D input");
  const std::size_t heads = x.dim(0), n = x.dim(1), dh = x.dim(2);
  const std::size_t d = heads * dh;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dh; ++c)
        out[i * d + h * dh + c] = xd[(h * n + i) * dh + c];
  return make_result({n, d}, std::move(out), {x},
                     [heads, n, d, dh](Node& self) {
                       double* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t h = 0; h < heads; ++h)
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t c = 0; c < dh; ++c)
                             gx[(h * n + i) * dh + c] +=
                                 self.grad[i * d + h * dh + c];
                     });
}

Tensor scale_channels(const Tensor& r, const Tensor& mask) {
  if (r.ndim() != 3 || mask.ndim() != 2 || mask.dim(0) != r.dim(0) ||
      mask.dim(1) != r.dim(2)) {
    throw DimensionError("scale_channels: features " + shape_str(r.shape()) +
                         " vs mask " + shape_str(mask.shape()));
  }
  const std::size_t n = r.dim(0), p = r.dim(1), d = r.dim(2);
  auto rd = r.data();
  auto md = mask.data();
  std::vector<double> out(rd.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < p; ++k)
      for (std::size_t c = 0; c < d; ++c)
        out[(i * p + k) * d + c] = rd[(i * p + k) * d + c] * md[i * d + c];
  return make_result(r.shape(), std::move(out), {r, mask},
                     [n, p, d](Node& self) {
                       const auto& rv = parent_data(self, 0);
                       const auto& mv = parent_data(self, 1);
                       double* gr = parent_grad(self, 0);
                       double* gm = parent_grad(self, 1);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t k = 0; k < p; ++k)
                           for (std::size_t c = 0; c < d; ++c) {
                             const std::size_t at = (i * p + k) * d + c;
                             const double g = self.grad[at];
                             if (gr) gr[at] += g * mv[i * d + c];
                             if (gm) gm[i * d + c] += g * rv[at];
                           }
                     });
}

Tensor sigmoid_focal_loss(const Tensor& logits, std::span<const double> targets,
                          double alpha, double gamma) {
  if (targets.size() != logits.numel()) {
    throw DimensionError("sigmoid_focal_loss: " +
                         std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()));
  }
  std::vector<double> t(targets.begin(), targets.end());
  auto xd = logits.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = xd[i];
    if (t[i] > 0.5) {
      // alpha (1-p)^gamma * -log p
      out[i] = alpha * std::exp(-gamma * softplus(x)) * softplus(-x);
    } else {
      // (1-alpha) p^gamma * -log(1-p)
      out[i] = (1.0 - alpha) * std::exp(-gamma * softplus(-x)) * softplus(x);
    }
  }
  return make_result(
      logits.shape(), std::move(out), {logits},
      [t, alpha, gamma](Node& self) {
        double* gx = parent_grad(self, 0);
        if (!gx) return;
        const auto& xs = parent_data(self, 0);
        for (std::size_t i = 0; i < xs.size(); ++i) {
          const double x = xs[i];
          const double p = stable_sigmoid(x);
          const double q = stable_sigmoid(-x);
          double d;
          if (t[i] > 0.5) {
            d = -alpha * std::exp(-gamma * softplus(x)) *
                (gamma * p * softplus(-x) + q);
          } else {
            d = (1.0 - alpha) * std::exp(-gamma * softplus(-x)) *
                (gamma * q * softplus(x) + p);
          }
          gx[i] += self.grad[i] * d;
        }
      });
}

}  // namespace sparsedet
