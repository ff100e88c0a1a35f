// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <unistd.h>

#include "sparsedet/attention.hpp"
#include "sparsedet/checkpoint.hpp"
#include "sparsedet/config.hpp"
#include "sparsedet/detector.hpp"
#include "sparsedet/dynamic_head.hpp"
#include "sparsedet/errors.hpp"
#include "sparsedet/gradcheck.hpp"
#include "sparsedet/harness.hpp"
#include "sparsedet/losses.hpp"
#include "sparsedet/matcher.hpp"
#include "sparsedet/ops.hpp"
#include "sparsedet/random.hpp"
#include "sparsedet/roi_align.hpp"
#include "sparsedet/synth.hpp"

namespace sparsedet {

namespace {

using Vec = std::vector<double>;

class Checker {
 public:
  explicit Checker(std::vector<CheckResult>& out) : out_(out) {}

  void module(std::string name) { module_ = std::move(name); }

  // Runs one property; a throw counts as a failure carrying its message.
  template <typename F>
  void check(const std::string& property, F&& body) {
    CheckResult r{module_, property, false, {}};
    try {
      std::string detail;
      r.pass = body(detail);
      if (!r.pass) r.detail = detail.empty() ? "condition false" : detail;
    } catch (const std::exception& e) {
      r.detail = std::string("unexpected exception: ") + e.what();
    }
    out_.push_back(std::move(r));
  }

 private:
  std::vector<CheckResult>& out_;
  std::string module_;
};

template <typename E, typename F>
bool throws(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

bool near(double a, double b, double tol, std::string& detail) {
  if (std::abs(a - b) <= tol) return true;
  detail = "got " + num(a) + ", expected " + num(b) + " (tol " + num(tol) + ")";
  return false;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_close(std::span<const double> a, std::span<const double> b, double tol,
               std::string& detail) {
  const double m = max_abs_diff(a, b);
  if (m <= tol) return true;
  detail = "max abs difference " + num(m) + " exceeds " + num(tol);
  return false;
}

bool bitwise_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

Tensor random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  Vec v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v));
}

Box random_box(Rng& rng, double w, double h) {
  const double bw = rng.uniform(0.05, 0.6) * w, bh = rng.uniform(0.05, 0.6) * h;
  const double x = rng.uniform(0.0, w - bw), y = rng.uniform(0.0, h - bh);
  return {x, y, x + bw, y + bh};
}

BoxSet random_boxes(Rng& rng, std::size_t n, double w, double h) {
  BoxSet s{{}, w, h};
  for (std::size_t i = 0; i < n; ++i) s.boxes.push_back(random_box(rng, w, h));
  return s;
}

// Row-major a[m x k] * b[k x n] by plain loops.
Vec naive_matmul(std::span<const double> a, std::span<const double> b,
                 std::size_t m, std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += a[i * k + t] * b[t * n + j];
      c[i * n + j] = s;
    }
  }
  return c;
}

Vec naive_linear(std::span<const double> x, std::size_t m, const Linear& l) {
  Vec y = naive_matmul(x, l.weight.data(), m, l.in(), l.out());
  auto b = l.bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < l.out(); ++j) y[i * l.out() + j] += b[j];
  }
  return y;
}

Vec naive_layer_norm(const Vec& x, std::size_t width, const LayerNorm& ln) {
  Vec y(x.size());
  auto g = ln.gamma.data(), b = ln.beta.data();
  for (std::size_t r = 0; r < x.size() / width; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += x[r * width + j];
    mu /= static_cast<double>(width);
    for (std::size_t j = 0; j < width; ++j) {
      const double t = x[r * width + j] - mu;
      var += t * t;
    }
    var /= static_cast<double>(width);
    for (std::size_t j = 0; j < width; ++j) {
      y[r * width + j] =
          (x[r * width + j] - mu) / std::sqrt(var + kLayerNormEps) * g[j] + b[j];
    }
  }
  return y;
}

Vec relu_vec(Vec v) {
  for (auto& x : v) x = std::max(0.0, x);
  return v;
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Fraction of a fine raster grid covered by both / either box.
double raster_iou(const Box& a, const Box& b, double cell) {
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

// ---------------------------------------------------------------- tensor

void check_tensor(Checker& c) {
  c.module("tensor_autodiff");
  c.check("matmul identity", [](std::string& d) {
    Tensor i2 = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    return all_close(matmul(i2, m).data(), m.data(), 0.0, d);
  });
  c.check("matmul hand product", [](std::string& d) {
    Tensor r = matmul(Tensor::from_data({1, 2}, {1, 2}), Tensor::from_data({2, 1}, {3, 4}));
    return r.shape() == Shape{1, 1} && near(r.item(), 11.0, 0.0, d);
  });
  c.check("matmul gradient vs central differences", [](std::string& d) {
    Rng rng(11);
    const Tensor a = random_tensor(rng, {3, 3}), b = random_tensor(rng, {3, 3});
    const double e = grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a);
    return near(e, 0.0, 1e-6, d);
  });
  c.check("matmul shape mismatch raises", [](std::string&) {
    return throws<DimensionError>([] {
      matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    });
  });
  c.check("softmax uniform row", [](std::string& d) {
    return all_close(softmax_rows(Tensor::zeros({1, 3})).data(),
                     Vec{1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15, d);
  });
  c.check("softmax [0, ln 2]", [](std::string& d) {
    return all_close(softmax_rows(Tensor::from_data({1, 2}, {0.0, std::log(2.0)})).data(),
                     Vec{1.0 / 3, 2.0 / 3}, 1e-15, d);
  });
  c.check("softmax [0, 100] does not overflow", [](std::string& d) {
    auto y = softmax_rows(Tensor::from_data({1, 2}, {0.0, 100.0}));
    return std::isfinite(y.data()[0]) && near(y.data()[1], 1.0, 1e-15, d) &&
           near(y.data()[0], 0.0, 1e-40, d);
  });
  c.check("softmax rows sum to 1 and are shift invariant", [](std::string& d) {
    Rng rng(12);
    for (int t = 0; t < 50; ++t) {
      Tensor x = random_tensor(rng, {4, 6}, -20, 20);
      Vec shifted(x.data().begin(), x.data().end());
      for (std::size_t r = 0; r < 4; ++r) {
        const double s = rng.uniform(-50, 50);
        for (std::size_t j = 0; j < 6; ++j) shifted[r * 6 + j] += s;
      }
      Tensor y = softmax_rows(x);
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) s += y.data()[r * 6 + j];
        if (!near(s, 1.0, 1e-12, d)) return false;
      }
      if (!all_close(softmax_rows(Tensor::from_data({4, 6}, shifted)).data(),
                     y.data(), 1e-12, d)) {
        return false;
      }
    }
    return true;
  });
  c.check("backward of sum(x^2)", [](std::string& d) {
    Tensor x = Tensor::from_data({3}, {1, 2, 3}, true);
    sum(mul(x, x)).backward();
    return all_close(x.grad(), Vec{2, 4, 6}, 0.0, d);
  });
  c.check("backward of sigmoid at 0", [](std::string& d) {
    Tensor x = Tensor::from_data({1}, {0.0}, true);
    sum(sigmoid(x)).backward();
    return near(x.grad()[0], 0.25, 1e-15, d);
  });
  c.check("reused value accumulates branch gradients", [](std::string& d) {
    Tensor x = Tensor::from_data({2}, {0.5, -1.5}, true);
    sum(add(scale(x, 3.0), mul(x, x))).backward();
    return all_close(x.grad(), Vec{3 + 1.0, 3 - 3.0}, 1e-15, d);
  });
  c.check("backward on non-scalar raises", [](std::string&) {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    return throws<ContractError>([&] { scale(x, 2.0).backward(); });
  });
  c.check("backward is bitwise deterministic", [](std::string&) {
    Rng rng(13);
    const Tensor a0 = random_tensor(rng, {4, 5}), b0 = random_tensor(rng, {5, 3});
    auto run = [&] {
      Tensor a = Tensor::from_data({4, 5}, Vec(a0.data().begin(), a0.data().end()), true);
      Tensor b = Tensor::from_data({5, 3}, Vec(b0.data().begin(), b0.data().end()), true);
      sum(softmax_rows(matmul(a, b))).backward();
      Vec g = a.grad();
      auto gb = b.grad();
      g.insert(g.end(), gb.begin(), gb.end());
      return g;
    };
    return bitwise_equal(run(), run());
  });
  c.check("shape and data length agree", [](std::string&) {
    Tensor t = Tensor::zeros({2, 3, 4});
    return t.numel() == 24 && t.data().size() == 24 &&
           throws<DimensionError>([] { Tensor::from_data({2, 2}, {1, 2, 3}); });
  });
  c.check("grad_check of sum(x) at zero is exactly 0", [](std::string& d) {
    return near(grad_check([](const Tensor& x) { return sum(x); }, Tensor::zeros({5})),
                0.0, 0.0, d);
  });
  c.check("grad_check of sum(x) at random x is at rounding level", [](std::string& d) {
    Rng rng(14);
    return near(grad_check([](const Tensor& x) { return sum(x); },
                           random_tensor(rng, {5})),
                0.0, 1e-9, d);
  });
  c.check("grad_check of sum(softmax(x) * c)", [](std::string& d) {
    Rng rng(15);
    const Tensor w = random_tensor(rng, {4, 4});
    return near(grad_check([&](const Tensor& x) { return sum(mul(softmax_rows(x), w)); },
                           random_tensor(rng, {4, 4})),
                0.0, 1e-5, d);
  });
  c.check("grad_check raises on non-finite probes", [](std::string&) {
    return throws<DomainError>([] {
      grad_check([](const Tensor& x) { return sum(div(x, Tensor::zeros({1}))); },
                 Tensor::zeros({1}));
    });
  });
  c.check("grad_check of a one-stage 2-query detector", [](std::string& d) {
    DetectorConfig cfg;
    cfg.num_queries = 2;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.pooled = 3;
    cfg.num_stages = 1;
    SceneSpec spec;
    spec.seed = 21;
    spec.min_objects = spec.max_objects = 1;
    spec.channels = 8;
    const Scene scene = generate_scene(spec);
    const ModelState state = ModelState::create(cfg, 22);
    const auto outs = forward(scene.feature_map, state, cfg);
    const auto pins = stage_input_boxes(outs, state, cfg);
    const std::vector<MatchResult> matches{
        hungarian(cost_matrix(outs[0], scene.targets, cfg.cost))};
    std::vector<Tensor> leaves;
    for (const auto& p : state.store.params()) leaves.push_back(p.tensor);
    const double e = grad_check_leaves(
        [&] {
          return set_loss_with_matches(forward_pinned(scene.feature_map, state, cfg, pins),
                                       scene.targets, cfg.cost, matches)
              .total;
        },
        leaves);
    return near(e, 0.0, 1e-4, d);
  });
  c.check("parameter names are unique", [](std::string&) {
    ParamStore store(1);
    store.create("w", {2}, Init::kZeros);
    return throws<ContractError>([&] { store.create("w", {3}, Init::kZeros); });
  });
  c.check("checkpoint round trip", [](std::string&) {
    Rng rng(16);
    std::vector<TensorRecord> recs{{"a", {2, 3}, {}}, {"b.c", {4}, {}}};
    for (auto& r : recs) {
      r.data.resize(shape_numel(r.shape));
      for (auto& v : r.data) v = rng.normal();
    }
    std::stringstream ss;
    write_records(ss, recs);
    const auto back = read_records(ss);
    if (back.size() != recs.size()) return false;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (back[i].name != recs[i].name || back[i].shape != recs[i].shape ||
          !bitwise_equal(back[i].data, recs[i].data)) {
        return false;
      }
    }
    return true;
  });
}

// -------------------------------------------------------------- geometry

void check_geometry(Checker& c, const SelftestOptions& opt) {
  c.module("geometry");
  const auto& g = opt.giou;
  c.check("iou of identical boxes", [](std::string& d) {
    return near(iou({0, 0, 2, 2}, {0, 0, 2, 2}), 1.0, 0.0, d);
  });
  c.check("iou of disjoint boxes", [](std::string& d) {
    return near(iou({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0, 0.0, d);
  });
  c.check("iou vs rasterization oracle", [](std::string& d) {
    const Box a{0, 0, 2, 2}, b{1, 1, 3, 3};
    return near(iou(a, b), 1.0 / 7.0, 1e-12, d) &&
           near(iou(a, b), raster_iou(a, b, 0.01), 1e-3, d);
  });
  c.check("pairwise iou: unit diagonal, symmetric, equals scalar loop", [](std::string& d) {
    Rng rng(31);
    const BoxSet s = random_boxes(rng, 7, 50, 40);
    const Tensor m = pairwise_iou(s);
    for (std::size_t i = 0; i < 7; ++i) {
      if (m.at({i, i}) != 1.0) return d = "diagonal not 1", false;
      for (std::size_t j = 0; j < 7; ++j) {
        if (m.at({i, j}) != m.at({j, i})) return d = "not symmetric", false;
        if (m.at({i, j}) != iou(s.boxes[i], s.boxes[j])) return d = "differs from loop", false;
      }
    }
    return true;
  });
  c.check("pairwise iou of the three-box example", [](std::string& d) {
    const BoxSet s{{{0, 0, 2, 2}, {1, 1, 3, 3}, {10, 10, 11, 11}}, 20, 20};
    const double t = 1.0 / 7.0;
    return all_close(pairwise_iou(s).data(), Vec{1, t, 0, t, 1, 0, 0, 0, 1}, 1e-15, d);
  });
  c.check("iou scale invariance", [](std::string& d) {
    Rng rng(32);
    for (int t = 0; t < 200; ++t) {
      const Box a = random_box(rng, 30, 30), b = random_box(rng, 30, 30);
      const double k = rng.uniform(0.1, 10.0);
      const Box as{a.x1 * k, a.y1 * k, a.x2 * k, a.y2 * k};
      const Box bs{b.x1 * k, b.y1 * k, b.x2 * k, b.y2 * k};
      if (!near(iou(as, bs), iou(a, b), 1e-12, d)) return false;
    }
    return true;
  });
  c.check("degenerate boxes have zero iou", [](std::string& d) {
    return near(iou({1, 1, 1, 3}, {1, 1, 1, 3}), 0.0, 0.0, d) &&
           near(iou({1, 1, 1, 3}, {0, 0, 4, 4}), 0.0, 0.0, d);
  });
  c.check("giou of identical boxes", [&g](std::string& d) {
    return near(g({0, 0, 1, 1}, {0, 0, 1, 1}), 1.0, 1e-15, d);
  });
  c.check("giou of adjacent unit squares is -1/3", [&g](std::string& d) {
    return near(g({0, 0, 1, 1}, {2, 0, 3, 1}), -1.0 / 3.0, 1e-12, d);
  });
  c.check("giou of far unit squares is -0.98", [&g](std::string& d) {
    return near(g({0, 0, 1, 1}, {9, 9, 10, 10}), -0.98, 1e-12, d);
  });
  c.check("giou within [-1, 1] and <= iou on random pairs", [&g](std::string& d) {
    Rng rng(33);
    for (int t = 0; t < 20000; ++t) {
      const Box a = random_box(rng, 100, 100), b = random_box(rng, 100, 100);
      const double v = g(a, b);
      if (v < -1.0 || v > 1.0 || v > iou(a, b) + 1e-15) {
        d = "giou " + num(v) + " vs iou " + num(iou(a, b));
        return false;
      }
    }
    return true;
  });
  c.check("giou of two degenerate boxes is 0", [](std::string& d) {
    return near(giou({1, 1, 1, 1}, {2, 2, 2, 2}), 0.0, 0.0, d);
  });
  c.check("zero deltas leave a box unchanged", [](std::string&) {
    const Box b{3, 4, 10, 12};
    return apply_deltas(b, {0, 0, 0, 0}, 100, 100) == b;
  });
  c.check("delta decode by hand", [](std::string& d) {
    const Box r = apply_deltas({0, 0, 2, 2}, {0.1, 0, 0, 0}, 100, 100);
    return all_close(Vec{r.x1, r.y1, r.x2, r.y2}, Vec{0.2, 0, 2.2, 2}, 1e-15, d);
  });
  c.check("log-size deltas are clamped at 4", [](std::string& d) {
    const Box r = apply_deltas({499, 499, 501, 501}, {0, 0, 100, 0}, 1000, 1000);
    return near(r.width(), 2.0 * std::exp(4.0), 1e-9, d);
  });
  c.check("encode inverts apply_deltas", [](std::string& d) {
    Rng rng(34);
    for (int t = 0; t < 200; ++t) {
      const Box b{40 + rng.uniform(0, 10), 40 + rng.uniform(0, 10),
                  60 + rng.uniform(0, 10), 60 + rng.uniform(0, 10)};
      const BoxDeltas dl{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                         rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
      const BoxDeltas back = encode_deltas(b, apply_deltas(b, dl, 200, 200));
      if (!all_close(back, dl, 1e-9, d)) return false;
    }
    return true;
  });
  c.check("box csv round trip", [](std::string&) {
    const std::vector<Box> boxes{{0.5, 1, 2, 3.25}, {4, 5, 6, 7}};
    const std::vector<int> cls{0, 3};
    std::stringstream ss;
    write_boxes_csv(ss, boxes, &cls);
    const LabeledBoxes back = read_boxes_csv(ss);
    return back.boxes == boxes && back.classes && *back.classes == cls;
  });
}

// ------------------------------------------------------------- attention

// Per-head loop over plain arrays: softmax(Q K^T / sqrt(d_h)) V, then W_o.
Vec naive_attention(const Tensor& q, const MhsaParams& p, std::size_t heads,
                    const Vec* iou) {
  const std::size_t n = q.dim(0), d = q.dim(1), dh = d / heads;
  const Vec qkv = naive_linear(q.data(), n, p.qkv);
  Vec merged(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    auto at = [&](std::size_t i, std::size_t part, std::size_t k) {
      return qkv[i * 3 * d + part * d + h * dh + k];
    };
    for (std::size_t i = 0; i < n; ++i) {
      Vec w(n);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dh; ++k) s += at(i, 0, k) * at(j, 1, k);
        w[j] = s / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(w.begin(), w.end());
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        w[j] = std::exp(w[j] - mx) * (iou ? (i == j ? 1.0 : (*iou)[i * n + j]) : 1.0);
        z += w[j];
      }
      for (std::size_t k = 0; k < dh; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += w[j] / z * at(j, 2, k);
        merged[i * d + h * dh + k] = s;
      }
    }
  }
  return naive_linear(merged, n, p.out);
}

void check_attention(Checker& c) {
  c.module("attention");
  c.check("single query routes only to itself", [](std::string& d) {
    ParamStore store(41);
    const AttnConfig cfg{8, 2};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Rng rng(42);
    const Tensor q = random_tensor(rng, {1, 8});
    // out = V W_o + b_o with V the value slice of the projection.
    const Vec qkv = naive_linear(q.data(), 1, p.qkv);
    const Vec v(qkv.begin() + 16, qkv.end());
    return all_close(standard_msa(q, p, cfg).data(), naive_linear(v, 1, p.out), 1e-12, d);
  });
  c.check("equal query rows attend uniformly", [](std::string& d) {
    ParamStore store(43);
    const AttnConfig cfg{8, 4};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Rng rng(44);
    Vec row(8);
    for (auto& v : row) v = rng.normal();
    Vec q;
    for (int i = 0; i < 5; ++i) q.insert(q.end(), row.begin(), row.end());
    const Tensor w = attention_weights(Tensor::from_data({5, 8}, q), Tensor::full({5, 5}, 1.0), p, cfg,
                                       AttnMode::kFullMsa);
    return all_close(w.data(), Vec(4 * 25, 0.2), 1e-15, d);
  });
  c.check("standard msa vs per-head loop oracle", [](std::string& d) {
    ParamStore store(45);
    const AttnConfig cfg{8, 2};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Rng rng(46);
    const Tensor q = random_tensor(rng, {4, 8});
    return all_close(standard_msa(q, p, cfg).data(), naive_attention(q, p, 2, nullptr),
                     1e-12, d);
  });
  c.check("iou-esa vs per-head loop oracle", [](std::string& d) {
    ParamStore store(47);
    const AttnConfig cfg{8, 2};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Rng rng(48);
    const Tensor q = random_tensor(rng, {5, 8});
    const Tensor m = pairwise_iou(random_boxes(rng, 5, 30, 30));
    const Vec iou_v(m.data().begin(), m.data().end());
    return all_close(iou_esa(q, m, p, cfg).data(), naive_attention(q, p, 2, &iou_v),
                     1e-12, d);
  });
  c.check("iou-esa with all-ones iou equals standard msa bitwise", [](std::string&) {
    Rng rng(49);
    for (std::size_t heads : {1, 2, 4}) {
      ParamStore store(rng.next_u64());
      const AttnConfig cfg{8, heads};
      const MhsaParams p = MhsaParams::create(store, "a", cfg);
      const Tensor q = random_tensor(rng, {6, 8}, -3, 3);
      if (!bitwise_equal(iou_esa(q, Tensor::full({6, 6}, 1.0), p, cfg).data(),
                         standard_msa(q, p, cfg).data())) {
        return false;
      }
    }
    return true;
  });
  c.check("iou-esa with identity iou routes one-hot", [](std::string& d) {
    ParamStore store(50);
    const AttnConfig cfg{8, 2};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Rng rng(51);
    Vec eye(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
    const Tensor w = attention_weights(random_tensor(rng, {4, 8}, -3, 3),
                                       Tensor::from_data({4, 4}, eye), p, cfg,
                                       AttnMode::kIouEsa);
    Vec expect;
    for (int h = 0; h < 2; ++h) expect.insert(expect.end(), eye.begin(), eye.end());
    return all_close(w.data(), expect, 0.0, d);
  });
  c.check("hand value: logits [0,0], iou [1,0.5] -> [2/3,1/3]", [](std::string& d) {
    ParamStore store(52);
    const AttnConfig cfg{2, 1};
    MhsaParams p = MhsaParams::create(store, "a", cfg);
    for (auto& v : p.qkv.weight.mutable_data()) v = 0.0;  // all logits 0
    const Tensor iou_m = Tensor::from_data({2, 2}, {1, 0.5, 0.5, 1});
    const Tensor w = attention_weights(Tensor::from_data({2, 2}, {0.3, -1, 2, 0.1}), iou_m,
                                       p, cfg, AttnMode::kIouEsa);
    return all_close(w.data(), Vec{2.0 / 3, 1.0 / 3, 1.0 / 3, 2.0 / 3}, 1e-12, d);
  });
  c.check("weight rows sum to 1 in every mode", [](std::string& d) {
    Rng rng(53);
    ParamStore store(54);
    const AttnConfig cfg{8, 4};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    for (AttnMode mode : {AttnMode::kFullMsa, AttnMode::kIouEsa, AttnMode::kIouAsAttn}) {
      for (int t = 0; t < 20; ++t) {
        const Tensor w = attention_weights(random_tensor(rng, {6, 8}, -5, 5),
                                           pairwise_iou(random_boxes(rng, 6, 40, 40)), p,
                                           cfg, mode);
        for (std::size_t r = 0; r < 4 * 6; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < 6; ++j) s += w.data()[r * 6 + j];
          if (!near(s, 1.0, 1e-9, d)) return false;
        }
      }
    }
    return true;
  });
  c.check("iou-as-attn with identity iou is identity routing", [](std::string& d) {
    ParamStore store(55);
    const AttnConfig cfg{4, 1};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Vec eye(9, 0.0);
    for (std::size_t i = 0; i < 3; ++i) eye[i * 4] = 1.0;
    const Tensor w = attention_weights(Tensor::zeros({3, 4}), Tensor::from_data({3, 3}, eye),
                                       p, cfg, AttnMode::kIouAsAttn);
    return all_close(w.data(), eye, 0.0, d);
  });
  c.check("no-msa weights raise a mode error", [](std::string&) {
    ParamStore store(56);
    const AttnConfig cfg{4, 1};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    return throws<ModeError>([&] {
      attention_weights(Tensor::zeros({2, 4}), Tensor::full({2, 2}, 1.0), p, cfg,
                        AttnMode::kNoMsa);
    });
  });
  c.check("enhanced weights are invariant to row logit shifts", [](std::string& d) {
    Rng rng(57);
    for (int t = 0; t < 50; ++t) {
      const Tensor x = random_tensor(rng, {1, 5, 5}, -10, 10);
      const Tensor m = pairwise_iou(random_boxes(rng, 5, 20, 20));
      const Vec w = with_unit_diagonal(m);
      Vec shifted(x.data().begin(), x.data().end());
      for (std::size_t r = 0; r < 5; ++r) {
        const double s = rng.uniform(-100, 100);
        for (std::size_t j = 0; j < 5; ++j) shifted[r * 5 + j] += s;
      }
      if (!all_close(weighted_softmax_rows(Tensor::from_data({1, 5, 5}, shifted), w).data(),
                     weighted_softmax_rows(x, w).data(), 1e-12, d)) {
        return false;
      }
    }
    return true;
  });
  c.check("raising one iou entry raises its weight only", [](std::string& d) {
    Rng rng(58);
    for (int t = 0; t < 50; ++t) {
      const Tensor x = random_tensor(rng, {1, 4, 4}, -2, 2);
      Vec w(16);
      for (auto& v : w) v = rng.uniform(0.05, 0.9);
      Vec w2 = w;
      w2[1] += 0.05;  // row 0, column 1
      const Tensor a = weighted_softmax_rows(x, w), b = weighted_softmax_rows(x, w2);
      if (!(b.data()[1] > a.data()[1])) return d = "target weight did not grow", false;
      for (std::size_t j : {0, 2, 3}) {
        if (b.data()[j] > a.data()[j]) return d = "another weight grew", false;
      }
    }
    return true;
  });
  c.check("iou-esa is permutation equivariant", [](std::string& d) {
    ParamStore store(59);
    const AttnConfig cfg{8, 2};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    Rng rng(60);
    const Tensor q = random_tensor(rng, {5, 8});
    const BoxSet boxes = random_boxes(rng, 5, 30, 30);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    BoxSet pb{{}, 30, 30};
    for (std::size_t i : perm) pb.boxes.push_back(boxes.boxes[i]);
    const Tensor out = iou_esa(q, pairwise_iou(boxes), p, cfg);
    const Tensor pout = iou_esa(index_rows(q, perm), pairwise_iou(pb), p, cfg);
    return all_close(pout.data(), index_rows(out, perm).data(), 1e-12, d);
  });
  c.check("d_model not divisible by heads raises", [](std::string&) {
    return throws<DimensionError>([] { AttnConfig{6, 4}.validate(); });
  });
}

// -------------------------------------------------------------- roi_align

FeatureMap random_map(Rng& rng, std::size_t d, std::size_t h, std::size_t w,
                      double stride) {
  return {random_tensor(rng, {d, h, w}), stride};
}

// Bilinear lookup on the raw array with border clamping.
double naive_bilinear(const FeatureMap& fm, std::size_t ch, double x, double y) {
  const double w = static_cast<double>(fm.width() - 1), h = static_cast<double>(fm.height() - 1);
  x = std::clamp(x, 0.0, w);
  y = std::clamp(y, 0.0, h);
  const auto x0 = static_cast<std::size_t>(std::min(std::floor(x), std::max(0.0, w - 1)));
  const auto y0 = static_cast<std::size_t>(std::min(std::floor(y), std::max(0.0, h - 1)));
  const std::size_t x1 = std::min(x0 + 1, fm.width() - 1), y1 = std::min(y0 + 1, fm.height() - 1);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  return (1 - fy) * ((1 - fx) * fm.data.at({ch, y0, x0}) + fx * fm.data.at({ch, y0, x1})) +
         fy * ((1 - fx) * fm.data.at({ch, y1, x0}) + fx * fm.data.at({ch, y1, x1}));
}

// Pooling written out as nested loops over bins and sub-samples.
Vec naive_pool(const FeatureMap& fm, const Box& b, std::size_t s, std::size_t spb) {
  const std::size_t d = fm.channels();
  Vec out(s * s * d, 0.0);
  const double bw = b.width() / s, bh = b.height() / s;
  for (std::size_t by = 0; by < s; ++by) {
    for (std::size_t bx = 0; bx < s; ++bx) {
      for (std::size_t iy = 0; iy < spb; ++iy) {
        for (std::size_t ix = 0; ix < spb; ++ix) {
          const double x = b.x1 + (bx + (ix + 0.5) / spb) * bw;
          const double y = b.y1 + (by + (iy + 0.5) / spb) * bh;
          for (std::size_t ch = 0; ch < d; ++ch) {
            out[(by * s + bx) * d + ch] +=
                naive_bilinear(fm, ch, x / fm.stride - 0.5, y / fm.stride - 0.5) /
                static_cast<double>(spb * spb);
          }
        }
      }
    }
  }
  return out;
}

void check_roi(Checker& c) {
  c.module("roi_align");
  c.check("bilinear sample at a grid node is exact", [](std::string& d) {
    Rng rng(61);
    const FeatureMap fm = random_map(rng, 3, 4, 5, 8);
    const Vec v = bilinear_sample(fm, 2, 1);
    return all_close(v, Vec{fm.data.at({0, 1, 2}), fm.data.at({1, 1, 2}), fm.data.at({2, 1, 2})},
                     0.0, d);
  });
  c.check("bilinear midpoint of 0 and 1 is 0.5", [](std::string& d) {
    const FeatureMap fm{Tensor::from_data({1, 1, 2}, {0, 1}), 4};
    return near(bilinear_sample(fm, 0.5, 0)[0], 0.5, 1e-15, d);
  });
  c.check("bilinear sample vs raw-array oracle", [](std::string& d) {
    Rng rng(62);
    const FeatureMap fm = random_map(rng, 2, 5, 6, 8);
    for (int t = 0; t < 200; ++t) {
      const double x = rng.uniform(-1, 6), y = rng.uniform(-1, 5);
      const Vec v = bilinear_sample(fm, x, y);
      for (std::size_t ch = 0; ch < 2; ++ch) {
        if (!near(v[ch], naive_bilinear(fm, ch, x, y), 1e-12, d)) return false;
      }
    }
    return true;
  });
  c.check("constant map pools to the constant", [](std::string& d) {
    const FeatureMap fm{Tensor::full({3, 6, 6}, 0.7), 8};
    Rng rng(63);
    return all_close(roi_align(fm, random_boxes(rng, 4, 48, 48), 7, 2).data(),
                     Vec(4 * 49 * 3, 0.7), 1e-15, d);
  });
  c.check("box covering one cell pools to that cell", [](std::string& d) {
    Rng rng(64);
    const FeatureMap fm = random_map(rng, 2, 4, 4, 8);
    const BoxSet b{{{16, 8, 24, 16}}, 32, 32};
    return all_close(roi_align(fm, b, 1, 1).data(),
                     Vec{fm.data.at({0, 1, 2}), fm.data.at({1, 1, 2})}, 1e-15, d);
  });
  c.check("roi align vs nested-loop oracle", [](std::string& d) {
    Rng rng(65);
    for (int t = 0; t < 20; ++t) {
      const FeatureMap fm = random_map(rng, 2, 6, 6, 8);
      const Box b = random_box(rng, 48, 48);
      const Tensor r = roi_align(fm, BoxSet{{b}, 48, 48}, 7, 2);
      if (!all_close(r.data(), naive_pool(fm, b, 7, 2), 1e-12, d)) return false;
    }
    return true;
  });
  c.check("integer-cell translation leaves pooling unchanged", [](std::string& d) {
    Rng rng(66);
    const std::size_t h = 8, w = 10, shift = 2;
    const Tensor base = random_tensor(rng, {2, h, w});
    Vec moved(2 * h * w, 0.0);
    for (std::size_t ch = 0; ch < 2; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x + shift < w; ++x) {
          moved[(ch * h + y) * w + x + shift] = base.at({ch, y, x});
        }
      }
    }
    const FeatureMap a{base, 4}, b{Tensor::from_data({2, h, w}, moved), 4};
    const Box box{6, 6, 20, 24};
    const Box box2{box.x1 + shift * 4, box.y1, box.x2 + shift * 4, box.y2};
    return all_close(roi_align(b, BoxSet{{box2}, 40, 32}, 5, 2).data(),
                     roi_align(a, BoxSet{{box}, 40, 32}, 5, 2).data(), 1e-12, d);
  });
  c.check("pooled values stay within the map's range", [](std::string& d) {
    Rng rng(67);
    const FeatureMap fm = random_map(rng, 3, 6, 6, 8);
    const auto [lo, hi] = std::minmax_element(fm.data.data().begin(), fm.data.data().end());
    const Tensor pooled = roi_align(fm, random_boxes(rng, 6, 48, 48), 7, 2);
    for (double v : pooled.data()) {
      if (v < *lo - 1e-15 || v > *hi + 1e-15) return d = "value " + num(v) + " out of range", false;
    }
    return true;
  });
}

// ----------------------------------------------------------- dynamic_head

void zero_params(const ParamStore& store) {
  for (const auto& p : store.params()) {
    for (auto& v : Tensor(p.tensor).mutable_data()) v = 0.0;
  }
}

void check_dynamic_head(Checker& c) {
  c.module("dynamic_head");
  const std::size_t d = 8, k = 2;
  c.check("zero query with zero bias gives zero blocks", [&](std::string& det) {
    ParamStore store(71);
    const auto gen = DynamicParamsGen::create(store, "g", d, d, k);
    const DynamicParams p = generate_dynamic_params(Tensor::zeros({3, d}), gen);
    return all_close(p.p1.data(), Vec(3 * d * k, 0.0), 0.0, det) &&
           all_close(p.p2.data(), Vec(3 * k * d, 0.0), 0.0, det);
  });
  c.check("parameter blocks are homogeneous in the query", [&](std::string& det) {
    ParamStore store(72);
    const auto gen = DynamicParamsGen::create(store, "g", d, d, k);
    Rng rng(73);
    const Tensor q = random_tensor(rng, {2, d});
    const DynamicParams a = generate_dynamic_params(q, gen);
    const DynamicParams b = generate_dynamic_params(scale(q, 2.0), gen);
    return all_close(b.p1.data(), scale(a.p1, 2.0).data(), 1e-15, det) &&
           all_close(b.p2.data(), scale(a.p2, 2.0).data(), 1e-15, det);
  });
  c.check("parameter blocks vs per-row oracle", [&](std::string& det) {
    ParamStore store(74);
    const auto gen = DynamicParamsGen::create(store, "g", d, d, k);
    Rng rng(75);
    for (auto& v : Tensor(gen.gen.bias).mutable_data()) v = rng.normal();
    const Tensor q = random_tensor(rng, {3, d});
    const DynamicParams p = generate_dynamic_params(q, gen);
    const Vec all = naive_linear(q.data(), 3, gen.gen);
    Vec p1, p2;
    for (std::size_t i = 0; i < 3; ++i) {
      p1.insert(p1.end(), all.begin() + i * 2 * d * k, all.begin() + i * 2 * d * k + d * k);
      p2.insert(p2.end(), all.begin() + i * 2 * d * k + d * k, all.begin() + (i + 1) * 2 * d * k);
    }
    return all_close(p.p1.data(), p1, 0.0, det) && all_close(p.p2.data(), p2, 0.0, det);
  });
  c.check("zero roi features give zero output", [&](std::string& det) {
    ParamStore store(76);
    const auto gen = DynamicParamsGen::create(store, "g", d, d, k);
    const auto norms = DynamicConvNorms::create(store, "n", d, k);
    Rng rng(77);
    const Tensor out = dynamic_conv(Tensor::zeros({3, 4, d}),
                                    generate_dynamic_params(random_tensor(rng, {3, d}), gen),
                                    norms);
    return out.shape() == Shape{3, 4, d} && all_close(out.data(), Vec(3 * 4 * d, 0.0), 0.0, det);
  });
  c.check("dynamic conv by hand (s=1, d=2, k=2)", [](std::string& det) {
    ParamStore store(78);
    const auto norms = DynamicConvNorms::create(store, "n", 2, 2);
    const Tensor r = Tensor::from_data({1, 1, 2}, {1.0, 2.0});
    const Tensor p1 = Tensor::from_data({1, 2, 2}, {1.0, 0.0, 0.0, -1.0});
    const Tensor p2 = Tensor::from_data({1, 2, 2}, {2.0, 1.0, 0.0, 3.0});
    // r P1 = [1, -2]; normalized over 2 entries: mean -0.5, var 2.25.
    const double s1 = std::sqrt(2.25 + kLayerNormEps);
    const double h0 = std::max(0.0, 1.5 / s1), h1 = std::max(0.0, -1.5 / s1);
    const double z0 = 2 * h0, z1 = h0 + 3 * h1;
    const double mu = 0.5 * (z0 + z1), var = 0.25 * (z0 - z1) * (z0 - z1);
    const double s2 = std::sqrt(var + kLayerNormEps);
    const Vec expect{std::max(0.0, (z0 - mu) / s2), std::max(0.0, (z1 - mu) / s2)};
    return all_close(dynamic_conv(r, {p1, p2}, norms).data(), expect, 1e-12, det);
  });
  c.check("zero mask heads give masks of 0.5", [&](std::string& det) {
    ParamStore store(79);
    const auto heads = ChannelMaskHeads::create(store, "m", d, 2);
    zero_params(store);
    Rng rng(80);
    const ChannelMasks m = dcw_masks(random_tensor(rng, {3, d}), heads);
    return all_close(m.cls.data(), Vec(3 * d, 0.5), 0.0, det) &&
           all_close(m.reg.data(), Vec(3 * d, 0.5), 0.0, det);
  });
  c.check("identical queries get identical masks", [&](std::string&) {
    ParamStore store(81);
    const auto heads = ChannelMaskHeads::create(store, "m", d, 2);
    Rng rng(82);
    Vec row(d);
    for (auto& v : row) v = rng.normal();
    Vec q = row;
    q.insert(q.end(), row.begin(), row.end());
    const ChannelMasks m = dcw_masks(Tensor::from_data({2, d}, q), heads);
    auto v = m.cls.data();
    return std::equal(v.begin(), v.begin() + d, v.begin() + d);
  });
  c.check("masks vs naive oracle, strictly inside (0,1)", [&](std::string& det) {
    ParamStore store(83);
    const auto heads = ChannelMaskHeads::create(store, "m", d, 2);
    Rng rng(84);
    const Tensor q = random_tensor(rng, {4, d}, -2, 2);
    const ChannelMasks m = dcw_masks(q, heads);
    auto oracle = [&](const Linear& f1, const Linear& f2) {
      Vec h = relu_vec(naive_linear(q.data(), 4, f1));
      Vec o = naive_linear(h, 4, f2);
      for (auto& v : o) v = sigmoid_d(v);
      return o;
    };
    for (double v : m.cls.data()) if (!(v > 0 && v < 1)) return det = "mask out of (0,1)", false;
    return all_close(m.cls.data(), oracle(heads.cls_fc1, heads.cls_fc2), 1e-15, det) &&
           all_close(m.reg.data(), oracle(heads.reg_fc1, heads.reg_fc2), 1e-15, det);
  });
  c.check("unit mask leaves features unchanged", [&](std::string&) {
    Rng rng(85);
    const Tensor r = random_tensor(rng, {2, 3, d});
    return bitwise_equal(apply_dcw(r, Tensor::full({2, d}, 1.0)).data(), r.data());
  });
  c.check("zero mask annihilates features", [&](std::string& det) {
    Rng rng(86);
    return all_close(apply_dcw(random_tensor(rng, {2, 3, d}), Tensor::zeros({2, d})).data(),
                     Vec(2 * 3 * d, 0.0), 0.0, det);
  });
  c.check("channel weighting by hand", [](std::string& det) {
    const Tensor r = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
    return all_close(apply_dcw(r, Tensor::from_data({1, 2}, {0.5, 1})).data(),
                     Vec{0.5, 2, 1.5, 4}, 0.0, det);
  });
  c.check("raising a mask entry never shrinks that channel", [&](std::string&) {
    Rng rng(87);
    const Tensor r = random_tensor(rng, {2, 3, d});
    const Tensor m = random_tensor(rng, {2, d}, 0, 1);
    Vec m2(m.data().begin(), m.data().end());
    m2[5] += 0.2;
    const Tensor a = apply_dcw(r, m), b = apply_dcw(r, Tensor::from_data({2, d}, m2));
    for (std::size_t p = 0; p < 3; ++p) {
      if (std::abs(b.at({0, p, 5})) < std::abs(a.at({0, p, 5}))) return false;
    }
    return true;
  });
  c.check("zero inputs and bias give zero embeddings", [&](std::string& det) {
    ParamStore store(88);
    const Linear wc = Linear::create(store, "wc", 3 * d, d);
    const Linear wr = Linear::create(store, "wr", 3 * d, d);
    const ObjectEmbeddings o = project_embeddings(Tensor::zeros({2, 3, d}),
                                                  Tensor::zeros({2, 3, d}), wc, wr);
    return all_close(o.cls.data(), Vec(2 * d, 0.0), 0.0, det) &&
           all_close(o.reg.data(), Vec(2 * d, 0.0), 0.0, det);
  });
  c.check("perturbing the regression projection leaves o_c unchanged", [&](std::string&) {
    ParamStore store(89);
    const Linear wc = Linear::create(store, "wc", 3 * d, d);
    Linear wr = Linear::create(store, "wr", 3 * d, d);
    Rng rng(90);
    const Tensor rc = random_tensor(rng, {2, 3, d}), rr = random_tensor(rng, {2, 3, d});
    const Tensor before = project_embeddings(rc, rr, wc, wr).cls;
    for (auto& v : wr.weight.mutable_data()) v += 0.3;
    const ObjectEmbeddings after = project_embeddings(rc, rr, wc, wr);
    return bitwise_equal(after.cls.data(), before.data());
  });
  c.check("projections vs flatten-then-matmul oracle", [&](std::string& det) {
    ParamStore store(91);
    const Linear wc = Linear::create(store, "wc", 3 * d, d);
    const Linear wr = Linear::create(store, "wr", 3 * d, d);
    Rng rng(92);
    const Tensor rc = random_tensor(rng, {2, 3, d}), rr = random_tensor(rng, {2, 3, d});
    const ObjectEmbeddings o = project_embeddings(rc, rr, wc, wr);
    return all_close(o.cls.data(), naive_linear(rc.data(), 2, wc), 1e-15, det) &&
           all_close(o.reg.data(), naive_linear(rr.data(), 2, wr), 1e-15, det);
  });
  c.check("cancelling embeddings update from zero", [&](std::string& det) {
    ParamStore store(93);
    const FeedForward ffn = FeedForward::create(store, "f", d);
    Rng rng(94);
    const Tensor oc = random_tensor(rng, {3, d});
    return all_close(update_query({oc, neg(oc)}, ffn).data(),
                     feed_forward_update(Tensor::zeros({3, d}), ffn).data(), 0.0, det);
  });
  c.check("query update is permutation equivariant", [&](std::string& det) {
    ParamStore store(95);
    const FeedForward ffn = FeedForward::create(store, "f", d);
    Rng rng(96);
    const Tensor oc = random_tensor(rng, {4, d}), orr = random_tensor(rng, {4, d});
    const std::vector<std::size_t> perm{2, 3, 0, 1};
    return all_close(update_query({index_rows(oc, perm), index_rows(orr, perm)}, ffn).data(),
                     index_rows(update_query({oc, orr}, ffn), perm).data(), 0.0, det);
  });
  c.check("query update vs manual composition", [&](std::string& det) {
    ParamStore store(97);
    const FeedForward ffn = FeedForward::create(store, "f", d);
    Rng rng(98);
    for (const auto& p : store.params()) {
      for (auto& v : Tensor(p.tensor).mutable_data()) v += 0.1 * rng.normal();
    }
    const Tensor oc = random_tensor(rng, {3, d}), orr = random_tensor(rng, {3, d});
    Vec s(3 * d);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = oc.data()[i] + orr.data()[i];
    const Vec f = naive_linear(relu_vec(naive_linear(s, 3, ffn.fc1)), 3, ffn.fc2);
    Vec x(3 * d);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = s[i] + f[i];
    return all_close(update_query({oc, orr}, ffn).data(), naive_layer_norm(x, d, ffn.norm),
                     1e-12, det);
  });
  c.check("classification path ignores regression parameters", [](std::string&) {
    DetectorConfig cfg;
    cfg.num_queries = 3;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.pooled = 3;
    cfg.num_stages = 1;
    SceneSpec spec;
    spec.seed = 99;
    spec.channels = 8;
    const Scene scene = generate_scene(spec);
    ModelState state = ModelState::create(cfg, 100);
    const Tensor before = forward(scene.feature_map, state, cfg)[0].class_logits;
    for (auto& p : state.store.params()) {
      if (p.name.find(".dcw.reg_") != std::string::npos ||
          p.name.find(".proj_reg") != std::string::npos ||
          p.name.find(".reg_") != std::string::npos) {
        for (auto& v : p.tensor.mutable_data()) v += 0.5;
      }
    }
    return bitwise_equal(forward(scene.feature_map, state, cfg)[0].class_logits.data(),
                         before.data());
  });
}

// --------------------------------------------------------- matcher_losses

StageOutput stage_of(const Vec& logits, const std::vector<Box>& boxes, double w,
                     double h) {
  const BoxSet s{boxes, w, h};
  return {Tensor::from_data({boxes.size(), logits.size() / boxes.size()}, logits),
          boxes_to_tensor(s), s, Tensor()};
}

double brute_force_cost(const Vec& cost, std::size_t n, std::size_t m) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  double best = INFINITY;
  // Every ordering of all predictions; the first m take the targets.
  do {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += cost[idx[j] * m + j];
    best = std::min(best, s);
  } while (std::next_permutation(idx.begin(), idx.end()));
  return best;
}

void check_matcher_losses(Checker& c) {
  c.module("matcher_losses");
  const CostConfig cfg;
  c.check("confident correct positive has ~0 focal loss", [&](std::string& d) {
    return near(focal_loss(40.0, true, cfg), 0.0, 1e-15, d);
  });
  c.check("focal loss at p=0.5 (positive and negative)", [&](std::string& d) {
    return near(focal_loss(0.0, true, cfg), 0.25 * 0.25 * std::log(2.0), 1e-12, d) &&
           near(focal_loss(0.0, false, cfg), 0.75 * 0.25 * std::log(2.0), 1e-12, d);
  });
  c.check("focal loss monotone in p", [&](std::string&) {
    double prev_pos = INFINITY, prev_neg = -INFINITY;
    for (double x = -10; x <= 10; x += 0.25) {
      const double pos = focal_loss(x, true, cfg), neg_v = focal_loss(x, false, cfg);
      if (!(pos < prev_pos) || !(neg_v > prev_neg)) return false;
      prev_pos = pos;
      prev_neg = neg_v;
    }
    return true;
  });
  c.check("l1 box loss examples", [](std::string& d) {
    const Box a{10, 20, 30, 40};
    const Box b{20, 30, 40, 50};  // 0.1 of a 100-pixel image in every coordinate
    return near(l1_box_loss(a, a, 100, 100), 0.0, 0.0, d) &&
           near(l1_box_loss(a, b, 100, 100), 0.4, 1e-12, d) &&
           near(l1_box_loss(a, b, 100, 100), l1_box_loss(b, a, 100, 100), 0.0, d);
  });
  c.check("giou loss examples", [](std::string& d) {
    return near(giou_loss({0, 0, 1, 1}, {0, 0, 1, 1}), 0.0, 0.0, d) &&
           near(giou_loss({0, 0, 1, 1}, {2, 0, 3, 1}), 4.0 / 3.0, 1e-12, d) &&
           near(giou_loss({0, 0, 1, 1}, {999, 999, 1000, 1000}), 2.0, 1e-5, d);
  });
  c.check("exact confident prediction has minimal cost", [&](std::string&) {
    const std::vector<Box> targets{{10, 10, 30, 30}};
    const StageOutput s = stage_of({-3.0, 30.0, 0.5}, {{0, 0, 20, 20}, {10, 10, 30, 30}, {12, 8, 33, 29}},
                                   64, 64);
    const Tensor m = cost_matrix(s, {{targets, 64, 64}, {0}}, cfg);
    return m.at({1, 0}) < m.at({0, 0}) && m.at({1, 0}) < m.at({2, 0});
  });
  c.check("uniform lambda scaling keeps the assignment", [&](std::string&) {
    Rng rng(101);
    for (int t = 0; t < 20; ++t) {
      Vec logits(5);
      for (auto& v : logits) v = rng.uniform(-3, 3);
      std::vector<Box> preds;
      for (int i = 0; i < 5; ++i) preds.push_back(random_box(rng, 64, 64));
      const StageOutput s = stage_of(logits, preds, 64, 64);
      const Targets tg{random_boxes(rng, 3, 64, 64), {0, 0, 0}};
      CostConfig scaled = cfg;
      scaled.lambda_cls *= 3.5;
      scaled.lambda_l1 *= 3.5;
      scaled.lambda_giou *= 3.5;
      if (hungarian(cost_matrix(s, tg, cfg)).pairs !=
          hungarian(cost_matrix(s, tg, scaled)).pairs) {
        return false;
      }
    }
    return true;
  });
  c.check("2x2 cost matrix vs term-by-term sum", [&](std::string& d) {
    const std::vector<Box> preds{{0, 0, 10, 10}, {5, 5, 20, 25}};
    const std::vector<Box> gts{{2, 1, 12, 9}, {6, 4, 18, 26}};
    const Vec logits{0.7, -1.2};
    const Tensor m = cost_matrix(stage_of(logits, preds, 32, 32), {{gts, 32, 32}, {0, 0}}, cfg);
    Vec expect;
    for (std::size_t i = 0; i < 2; ++i) {
      const double p = sigmoid_d(logits[i]);
      const double cls = 0.25 * std::pow(1 - p, 2) * -std::log(p) -
                         0.75 * std::pow(p, 2) * -std::log(1 - p);
      for (std::size_t j = 0; j < 2; ++j) {
        const Box& a = preds[i];
        const Box& b = gts[j];
        const double l1 = (std::abs(a.x1 - b.x1) + std::abs(a.y1 - b.y1) +
                           std::abs(a.x2 - b.x2) + std::abs(a.y2 - b.y2)) / 32.0;
        expect.push_back(2 * cls + 5 * l1 + 2 * (1 - giou(a, b)));
      }
    }
    return all_close(m.data(), expect, 1e-12, d);
  });
  c.check("hungarian on [[1,2],[2,1]]", [](std::string& d) {
    const MatchResult r = hungarian(Tensor::from_data({2, 2}, {1, 2, 2, 1}));
    using P = std::pair<std::size_t, std::size_t>;
    if (r.pairs != std::vector<P>{{0, 0}, {1, 1}}) return d = "wrong pairs", false;
    return near(r.total_cost, 2.0, 0.0, d);
  });
  c.check("hungarian on zero-diagonal cost is the identity", [](std::string& d) {
    Rng rng(102);
    Vec cost(25);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) cost[i * 5 + j] = i == j ? 0.0 : rng.uniform(0.1, 1);
    }
    const MatchResult r = hungarian(Tensor::from_data({5, 5}, cost));
    for (const auto& [p, t] : r.pairs) if (p != t) return d = "not identity", false;
    return near(r.total_cost, 0.0, 0.0, d);
  });
  c.check("hungarian vs brute force (random 6x4 and N<=7)", [](std::string& d) {
    Rng rng(103);
    for (int t = 0; t < 50; ++t) {
      const std::size_t n = t < 10 ? 6 : static_cast<std::size_t>(rng.uniform_int(1, 7));
      const std::size_t m = t < 10 ? 4 : static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(n)));
      Vec cost(n * m);
      for (auto& v : cost) v = rng.uniform(0, 10);
      const MatchResult r = hungarian(cost, n, m);
      if (!near(r.total_cost, brute_force_cost(cost, n, m), 1e-9, d)) return false;
    }
    return true;
  });
  c.check("hungarian beats random injections", [](std::string& d) {
    Rng rng(104);
    for (int t = 0; t < 10; ++t) {
      const std::size_t n = 8, m = 5;
      Vec cost(n * m);
      for (auto& v : cost) v = rng.uniform(0, 10);
      const double best = hungarian(cost, n, m).total_cost;
      for (int s = 0; s < 1000; ++s) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (std::size_t i = n - 1; i > 0; --i) {
          std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < m; ++j) total += cost[idx[j] * m + j];
        if (total < best - 1e-12) return d = "random injection cheaper", false;
      }
    }
    return true;
  });
  c.check("hungarian rejects bad input", [](std::string&) {
    return throws<InputError>([] { hungarian(Tensor::from_data({2, 1}, {1, NAN})); }) &&
           throws<DimensionError>([] { hungarian(Tensor::zeros({1, 2})); });
  });
  c.check("exact saturated predictions give ~0 loss", [&](std::string& d) {
    const std::vector<Box> gts{{10, 10, 30, 30}, {5, 20, 25, 40}};
    const StageOutput s = stage_of({40.0, 40.0, -40.0}, {gts[0], gts[1], {0, 0, 8, 8}}, 64, 64);
    return near(set_loss({s}, {{gts, 64, 64}, {0, 0}}, cfg).total.item(), 0.0, 1e-12, d);
  });
  c.check("no targets and confident negatives give ~0 loss", [&](std::string& d) {
    const StageOutput s = stage_of({-40.0, -40.0}, {{0, 0, 8, 8}, {4, 4, 9, 9}}, 64, 64);
    return near(set_loss({s}, {{{}, 64, 64}, {}}, cfg).total.item(), 0.0, 1e-12, d);
  });
  c.check("one-stage N=3, M=1 vs term-by-term computation", [&](std::string& d) {
    const std::vector<Box> preds{{0, 0, 10, 10}, {8, 6, 30, 28}, {40, 40, 60, 62}};
    const Vec logits{0.2, 1.1, -0.4};
    const Box gt{10, 8, 28, 30};
    const SetLoss l = set_loss({stage_of(logits, preds, 64, 64)}, {{{gt}, 64, 64}, {0}}, cfg);
    // The second prediction is the clear match.
    double expect = 0.0;
    for (std::size_t i = 0; i < 3; ++i) expect += 2 * focal_loss(logits[i], i == 1, cfg);
    expect += 5 * l1_box_loss(preds[1], gt, 64, 64) + 2 * giou_loss(preds[1], gt);
    return l.matches[0].pairs.at(0).first == 1 && near(l.total.item(), expect, 1e-9, d);
  });
  c.check("set loss invariant to target and prediction order", [&](std::string& d) {
    Rng rng(105);
    for (int t = 0; t < 10; ++t) {
      std::vector<Box> preds;
      Vec logits;
      for (int i = 0; i < 5; ++i) {
        preds.push_back(random_box(rng, 64, 64));
        logits.push_back(rng.uniform(-2, 2));
      }
      const BoxSet gts = random_boxes(rng, 3, 64, 64);
      const double base = set_loss({stage_of(logits, preds, 64, 64)}, {gts, {0, 0, 0}}, cfg).total.item();
      std::vector<Box> rp(preds.rbegin(), preds.rend());
      Vec rl(logits.rbegin(), logits.rend());
      BoxSet rg{{gts.boxes.rbegin(), gts.boxes.rend()}, 64, 64};
      const double perm = set_loss({stage_of(rl, rp, 64, 64)}, {rg, {0, 0, 0}}, cfg).total.item();
      if (!near(perm, base, 1e-12, d)) return false;
    }
    return true;
  });
}

// --------------------------------------------------------------- pipeline

DetectorConfig tiny_config() {
  DetectorConfig cfg;
  cfg.num_queries = 4;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.pooled = 3;
  cfg.num_stages = 2;
  return cfg;
}

Scene tiny_scene(std::uint64_t seed) {
  SceneSpec spec;
  spec.seed = seed;
  spec.channels = 8;
  spec.min_objects = 1;
  spec.max_objects = 3;
  return generate_scene(spec);
}

void copy_params(const ModelState& from, ModelState& to,
                 const std::map<std::string, std::string>& rename) {
  for (auto& p : to.store.params()) {
    auto it = rename.find(p.name);
    const Tensor& src = from.store.get(it == rename.end() ? p.name : it->second);
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_data().begin());
  }
}

void check_pipeline(Checker& c) {
  c.module("pipeline");
  c.check("iou-esa equals full msa when all proposals coincide", [](std::string&) {
    DetectorConfig cfg = tiny_config();
    cfg.proposal_layout = ProposalLayout::kCentered;
    const Scene scene = tiny_scene(111);
    const ModelState state = ModelState::create(cfg, 112);
    DetectorConfig full = cfg;
    full.attn_mode = AttnMode::kFullMsa;
    const Tensor base = initial_boxes(state, cfg);
    const BoxSet boxes = tensor_to_boxes(base, cfg.image_w, cfg.image_h);
    const StageOutput a = forward_stage(state.q0, base, boxes, scene.feature_map,
                                        state.stages[0], cfg);
    const StageOutput b = forward_stage(state.q0, base, boxes, scene.feature_map,
                                        state.stages[0], full);
    return bitwise_equal(a.class_logits.data(), b.class_logits.data()) &&
           bitwise_equal(a.box_tensor.data(), b.box_tensor.data()) &&
           bitwise_equal(a.queries_out.data(), b.queries_out.data());
  });
  c.check("stage output shapes", [](std::string&) {
    const DetectorConfig cfg = tiny_config();
    const ModelState state = ModelState::create(cfg, 113);
    const auto outs = forward(tiny_scene(114).feature_map, state, cfg);
    for (const auto& o : outs) {
      if (o.class_logits.shape() != Shape{4, 1} || o.boxes.size() != 4 ||
          o.queries_out.shape() != Shape{4, 8}) {
        return false;
      }
    }
    return outs.size() == 2;
  });
  c.check("unit dcw masks equal the entangled head with tied weights", [](std::string&) {
    DetectorConfig dcw = tiny_config();
    dcw.unit_dcw_masks = true;
    DetectorConfig ent = tiny_config();
    ent.set_dcw(false);
    ModelState a = ModelState::create(dcw, 115);
    ModelState b = ModelState::create(ent, 116);
    std::map<std::string, std::string> tie;
    for (std::size_t s = 0; s < 2; ++s) {
      const std::string st = "stage" + std::to_string(s);
      tie[st + ".proj_reg.weight"] = st + ".proj_cls.weight";
      tie[st + ".proj_reg.bias"] = st + ".proj_cls.bias";
    }
    copy_params(ModelState::create(dcw, 115), a, tie);
    std::map<std::string, std::string> rename;
    for (std::size_t s = 0; s < 2; ++s) {
      const std::string st = "stage" + std::to_string(s);
      rename[st + ".proj.weight"] = st + ".proj_cls.weight";
      rename[st + ".proj.bias"] = st + ".proj_cls.bias";
    }
    copy_params(a, b, rename);
    const FeatureMap fm = tiny_scene(117).feature_map;
    const auto oa = forward(fm, a, dcw), ob = forward(fm, b, ent);
    for (std::size_t s = 0; s < 2; ++s) {
      if (!bitwise_equal(oa[s].class_logits.data(), ob[s].class_logits.data()) ||
          !bitwise_equal(oa[s].box_tensor.data(), ob[s].box_tensor.data()) ||
          !bitwise_equal(oa[s].queries_out.data(), ob[s].queries_out.data())) {
        return false;
      }
    }
    return true;
  });
  c.check("one-stage forward is forward_stage", [](std::string&) {
    DetectorConfig cfg = tiny_config();
    cfg.num_stages = 1;
    const ModelState state = ModelState::create(cfg, 118);
    const FeatureMap fm = tiny_scene(119).feature_map;
    const Tensor base = initial_boxes(state, cfg);
    const StageOutput direct =
        forward_stage(state.q0, base, tensor_to_boxes(base, cfg.image_w, cfg.image_h), fm,
                      state.stages[0], cfg);
    const auto outs = forward(fm, state, cfg);
    return outs.size() == 1 && bitwise_equal(outs[0].class_logits.data(), direct.class_logits.data()) &&
           bitwise_equal(outs[0].box_tensor.data(), direct.box_tensor.data());
  });
  c.check("later stages pass no gradient into earlier box deltas", [](std::string& d) {
    const DetectorConfig cfg = tiny_config();
    const Scene scene = tiny_scene(120);
    const ModelState state = ModelState::create(cfg, 121);
    const Tensor& w = state.store.get("stage0.reg_out.weight");
    auto grad_of = [&](bool first_only) {
      auto outs = forward(scene.feature_map, state, cfg);
      if (first_only) outs.resize(1);
      set_loss(outs, scene.targets, cfg.cost).total.backward();
      Vec g = w.grad();
      Tensor(w).zero_grad();
      for (const auto& p : state.store.params()) Tensor(p.tensor).zero_grad();
      return g;
    };
    const Vec both = grad_of(false), first = grad_of(true);
    double mag = 0.0;
    for (double v : first) mag = std::max(mag, std::abs(v));
    if (mag == 0.0) return d = "stage-one gradient vanished", false;
    return bitwise_equal(both, first) || (d = "stage-two loss reached stage-one deltas", false);
  });
  c.check("forward is bitwise deterministic", [](std::string&) {
    const DetectorConfig cfg = tiny_config();
    const FeatureMap fm = tiny_scene(122).feature_map;
    const auto a = forward(fm, ModelState::create(cfg, 123), cfg);
    const auto b = forward(fm, ModelState::create(cfg, 123), cfg);
    return bitwise_equal(a.back().class_logits.data(), b.back().class_logits.data()) &&
           bitwise_equal(a.back().box_tensor.data(), b.back().box_tensor.data());
  });
  c.check("zero learning rate leaves parameters unchanged", [](std::string&) {
    const DetectorConfig cfg = tiny_config();
    ModelState state = ModelState::create(cfg, 124);
    Vec before;
    for (const auto& p : state.store.params()) {
      before.insert(before.end(), p.tensor.data().begin(), p.tensor.data().end());
    }
    OptimizerConfig oc;
    oc.lr = 0.0;
    Optimizer opt(oc);
    const Scene scene = tiny_scene(125);
    train_step(scene.targets, scene.feature_map, state, cfg, opt);
    Vec after;
    for (const auto& p : state.store.params()) {
      after.insert(after.end(), p.tensor.data().begin(), p.tensor.data().end());
    }
    return bitwise_equal(before, after);
  });
  c.check("same seed gives identical loss curves", [](std::string&) {
    const DetectorConfig cfg = tiny_config();
    auto curve = [&] {
      ModelState state = ModelState::create(cfg, 126);
      Optimizer opt(OptimizerConfig{});
      Vec losses;
      for (std::uint64_t s = 0; s < 5; ++s) {
        const Scene scene = tiny_scene(127 + s);
        losses.push_back(train_step(scene.targets, scene.feature_map, state, cfg, opt).loss);
      }
      return losses;
    };
    return bitwise_equal(curve(), curve());
  });
  c.check("boxes stay valid and in-image under large weights", [](std::string& d) {
    const DetectorConfig cfg = tiny_config();
    Rng rng(128);
    for (int t = 0; t < 5; ++t) {
      ModelState state = ModelState::create(cfg, rng.next_u64());
      for (auto& p : state.store.params()) {
        for (auto& v : p.tensor.mutable_data()) v *= rng.uniform(1, 20);
      }
      for (const auto& o : forward(tiny_scene(129 + t).feature_map, state, cfg)) {
        for (const Box& b : o.boxes.boxes) {
          if (!(b.x1 <= b.x2 && b.y1 <= b.y2 && b.x1 >= 0 && b.y1 >= 0 &&
                b.x2 <= cfg.image_w && b.y2 <= cfg.image_h)) {
            d = "invalid box";
            return false;
          }
        }
      }
    }
    return true;
  });
  c.check("non-finite features raise a numeric error naming the stage", [](std::string& d) {
    const DetectorConfig cfg = tiny_config();
    const ModelState state = ModelState::create(cfg, 130);
    FeatureMap fm = tiny_scene(131).feature_map;
    for (auto& v : fm.data.mutable_data()) v = NAN;
    try {
      forward(fm, state, cfg);
    } catch (const NumericError& e) {
      return std::string(e.what()).find("stage 0") != std::string::npos ||
             (d = e.what(), false);
    }
    d = "no error raised";
    return false;
  });
  c.check("single-scene overfit: loss below 10% of initial in 100 steps", [](std::string& d) {
    RunConfig run;
    run.finalize();
    const Scene scene = generate_scene(train_scene_spec(run, 0));
    ModelState state = ModelState::create(run.detector, run.seed);
    OptimizerConfig oc = run.optim;
    oc.total_steps = 100;
    Optimizer opt(oc);
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 100; ++s) {
      last = train_step(scene.targets, scene.feature_map, state, run.detector, opt).loss;
      if (s == 0) first = last;
    }
    d = "initial " + num(first) + ", final " + num(last);
    return last < 0.1 * first;
  });
  c.check("every attention mode x dcw switch trains and evaluates", [](std::string&) {
    for (AttnMode mode : {AttnMode::kFullMsa, AttnMode::kNoMsa, AttnMode::kIouAsAttn,
                          AttnMode::kIouEsa}) {
      for (bool dcw : {false, true}) {
        RunConfig run;
        run.steps = 2;
        run.eval_scenes = 2;
        run.detector.attn_mode = mode;
        run.detector.set_dcw(dcw);
        if (!run_training(run, std::nullopt).ap) return false;
      }
    }
    return true;
  });
}

// ------------------------------------------------------------- synth_data

double mean_pairwise_iou(double overlap) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    SceneSpec spec;
    spec.seed = s;
    spec.overlap_bias = overlap;
    const auto& b = generate_scene(spec).targets.boxes.boxes;
    for (std::size_t i = 0; i < b.size(); ++i) {
      for (std::size_t j = i + 1; j < b.size(); ++j) {
        total += iou(b[i], b[j]);
        ++pairs;
      }
    }
  }
  return pairs ? total / static_cast<double>(pairs) : 0.0;
}

// Sum of |value| minus the noise expectation over the cells whose centers
// fall inside a box.
double feature_mass(const FeatureMap& fm, const Box& b, double sigma) {
  const double noise_mean = sigma * std::sqrt(2.0 / M_PI);
  double mass = 0.0;
  for (std::size_t y = 0; y < fm.height(); ++y) {
    for (std::size_t x = 0; x < fm.width(); ++x) {
      const double cx = (x + 0.5) * fm.stride, cy = (y + 0.5) * fm.stride;
      if (cx < b.x1 || cx >= b.x2 || cy < b.y1 || cy >= b.y2) continue;
      for (std::size_t ch = 0; ch < fm.channels(); ++ch) {
        mass += std::abs(fm.data.at({ch, y, x})) - noise_mean;
      }
    }
  }
  return mass;
}

void check_synth(Checker& c) {
  c.module("synth_data");
  c.check("identical spec gives an identical scene", [](std::string&) {
    SceneSpec spec;
    spec.seed = 141;
    const Scene a = generate_scene(spec), b = generate_scene(spec);
    return a.targets.boxes.boxes == b.targets.boxes.boxes &&
           bitwise_equal(a.feature_map.data.data(), b.feature_map.data.data());
  });
  c.check("overlap bias raises mean pairwise target iou", [](std::string& d) {
    const double lo = mean_pairwise_iou(0.0), hi = mean_pairwise_iou(0.9);
    d = "bias 0: " + num(lo) + ", bias 0.9: " + num(hi);
    return hi > lo;
  });
  c.check("fixed object count [3,3]", [](std::string&) {
    for (std::uint64_t s = 0; s < 50; ++s) {
      SceneSpec spec;
      spec.seed = s;
      spec.min_objects = spec.max_objects = 3;
      if (generate_scene(spec).targets.size() != 3) return false;
    }
    return true;
  });
  c.check("targets in-image with area >= 4", [](std::string&) {
    for (std::uint64_t s = 0; s < 100; ++s) {
      SceneSpec spec;
      spec.seed = s;
      spec.overlap_bias = 0.9;
      for (const Box& b : generate_scene(spec).targets.boxes.boxes) {
        if (b.x1 < 0 || b.y1 < 0 || b.x2 > spec.image_w || b.y2 > spec.image_h ||
            b.area() < 4) {
          return false;
        }
      }
    }
    return true;
  });
  c.check("impossible constraints raise", [](std::string&) {
    SceneSpec spec;
    spec.min_size = 200;
    spec.max_size = 300;
    return throws<InputError>([&] { generate_scene(spec); });
  });
  c.check("empty scene is pure noise with sigma within 20%", [](std::string& d) {
    Rng rng(142);
    const FeatureMap fm = render_features({{{}, 96, 96}, {}}, 32, 4, rng);
    double s = 0.0, s2 = 0.0;
    const auto v = fm.data.data();
    for (double x : v) {
      s += x;
      s2 += x * x;
    }
    const double n = static_cast<double>(v.size());
    const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
    d = "empirical sigma " + num(sd);
    return std::abs(sd - kFeatureNoiseSigma) <= 0.2 * kFeatureNoiseSigma;
  });
  c.check("feature mass inside each target exceeds an empty region's", [](std::string& d) {
    for (std::uint64_t s = 0; s < 20; ++s) {
      SceneSpec spec;
      spec.seed = 143 + s;
      spec.image_w = spec.image_h = 160;
      spec.max_objects = 3;
      spec.overlap_bias = 0.0;
      const Scene scene = generate_scene(spec);
      const auto& targets = scene.targets.boxes.boxes;
      for (const Box& t : targets) {
        const double w = t.width(), h = t.height();
        // Scan for an equal-size window clear of every target.
        std::optional<Box> empty;
        for (double y = 0; y + h <= spec.image_h && !empty; y += 4) {
          for (double x = 0; x + w <= spec.image_w && !empty; x += 4) {
            const Box cand{x, y, x + w, y + h};
            bool clear = true;
            for (const Box& o : targets) {
              clear = clear && !(cand.x1 < o.x2 && o.x1 < cand.x2 && cand.y1 < o.y2 &&
                                 o.y1 < cand.y2);
            }
            if (clear) empty = cand;
          }
        }
        if (!empty) continue;
        const double in = feature_mass(scene.feature_map, t, spec.noise_sigma);
        const double out = feature_mass(scene.feature_map, *empty, spec.noise_sigma);
        if (!(in > out)) {
          d = "target mass " + num(in) + " vs empty " + num(out);
          return false;
        }
      }
    }
    return true;
  });
  c.check("rendering is deterministic", [](std::string&) {
    const Targets t{{{{10, 10, 40, 30}}, 96, 96}, {0}};
    Rng a(144), b(144);
    return bitwise_equal(render_features(t, 16, 8, a).data.data(),
                         render_features(t, 16, 8, b).data.data());
  });
  c.check("scene geometry is pinned across platforms", [](std::string& d) {
    SceneSpec spec;
    spec.seed = 42;
    const auto& b = generate_scene(spec).targets.boxes.boxes;
    // Integer-only sampling; these coordinates must never change.
    const std::vector<Box> expect{
        {48, 31, 82, 62}, {59, 30, 91, 69}, {66, 43, 96, 74}, {23, 63, 60, 92}, {29, 62, 66, 92}};
    if (b != expect) {
      std::ostringstream os;
      for (const Box& x : b) os << "{" << x.x1 << "," << x.y1 << "," << x.x2 << "," << x.y2 << "}";
      d = "got " + os.str();
      return false;
    }
    return true;
  });
  c.check("perfect predictions give AP 1", [](std::string& d) {
    const std::vector<Box> t{{0, 0, 10, 10}, {20, 20, 30, 30}};
    return near(*evaluate_ap({{{t[0], 1.0}, {t[1], 1.0}}}, {t}), 1.0, 0.0, d);
  });
  c.check("no predictions give AP 0", [](std::string& d) {
    return near(*evaluate_ap({{}}, {{{0, 0, 10, 10}}}), 0.0, 0.0, d);
  });
  c.check("wrong-then-right ranking gives AP 0.5", [](std::string& d) {
    const Box t{0, 0, 10, 10};
    return near(*evaluate_ap({{{{50, 50, 60, 60}, 0.9}, {t, 0.4}}}, {{t}}), 0.5, 1e-15, d);
  });
  c.check("no targets anywhere gives no AP", [](std::string&) {
    return !evaluate_ap({{{{0, 0, 1, 1}, 0.5}}}, {{}}).has_value();
  });
  c.check("AP invariant to prediction list order", [](std::string& d) {
    Rng rng(145);
    std::vector<std::vector<ScoredBox>> preds(3);
    std::vector<std::vector<Box>> tg(3);
    for (std::size_t s = 0; s < 3; ++s) {
      for (int i = 0; i < 4; ++i) tg[s].push_back(random_box(rng, 50, 50));
      for (int i = 0; i < 6; ++i) {
        preds[s].push_back({i < 4 ? tg[s][i] : random_box(rng, 50, 50), rng.uniform()});
      }
    }
    const double base = *evaluate_ap(preds, tg);
    for (auto& p : preds) std::reverse(p.begin(), p.end());
    return near(*evaluate_ap(preds, tg), base, 0.0, d);
  });
  c.check("demoting a correct prediction never raises AP", [](std::string&) {
    const Box t1{0, 0, 10, 10}, t2{20, 20, 30, 30};
    const Box wrong{60, 60, 70, 70};
    const double before = *evaluate_ap({{{t1, 0.9}, {wrong, 0.5}, {t2, 0.3}}}, {{t1, t2}});
    const double after = *evaluate_ap({{{t1, 0.4}, {wrong, 0.5}, {t2, 0.3}}}, {{t1, t2}});
    return after <= before;
  });
  c.check("scene export/import round trip", [](std::string&) {
    SceneSpec spec;
    spec.seed = 146;
    const Scene scene = generate_scene(spec);
    const auto dir = std::filesystem::temp_directory_path() /
                     ("sparsedet_selftest_" + std::to_string(::getpid()));
    export_scene(scene, dir);
    const Scene back = import_scene(dir, spec.image_w, spec.image_h);
    std::filesystem::remove_all(dir);
    return back.targets.boxes.boxes == scene.targets.boxes.boxes &&
           back.targets.classes == scene.targets.classes &&
           back.feature_map.stride == scene.feature_map.stride &&
           bitwise_equal(back.feature_map.data.data(), scene.feature_map.data.data());
  });
}

// ------------------------------------------------------------ harness_cli

void check_harness(Checker& c) {
  c.module("harness_cli");
  c.check("config entries round trip through settings", [](std::string&) {
    RunConfig a;
    apply_setting(a, "lr", "0.015");
    apply_setting(a, "attn_mode", "full");
    apply_setting(a, "disentangle", "half_dim");
    RunConfig b;
    for (const auto& [k, v] : config_entries(a)) apply_setting(b, k, v);
    return config_entries(a) == config_entries(b);
  });
  c.check("unknown settings are rejected", [](std::string&) {
    RunConfig a;
    return throws<InputError>([&] { apply_setting(a, "bogus", "1"); }) &&
           throws<InputError>([&] { apply_setting(a, "steps", "ten"); });
  });
  c.check("ablation grid cells are unique", [](std::string&) {
    AblationGrid g = AblationGrid::product({AttnMode::kFullMsa, AttnMode::kIouEsa},
                                           {true, false}, {1, 2, 3, 4, 5});
    g.validate();
    g.cells.push_back(g.cells.front());
    return g.cells.size() == 21 && throws<InputError>([&] { g.validate(); });
  });
  c.check("ablation summary independent of cell order", [](std::string&) {
    std::vector<CellResult> r;
    Rng rng(151);
    for (const auto& cell : AblationGrid::product({AttnMode::kFullMsa, AttnMode::kIouEsa},
                                                  {true, false}, {1, 2, 3, 4, 5}).cells) {
      r.push_back({cell, rng.uniform()});
    }
    const auto a = summarize_ablation(r);
    std::reverse(r.begin(), r.end());
    const auto b = summarize_ablation(r);
    if (a.size() != 4 || b.size() != 4) return false;
    for (std::size_t i = 0; i < 4; ++i) {
      if (a[i].aps != b[i].aps || a[i].median_ap != b[i].median_ap || a[i].aps.size() != 5) {
        return false;
      }
    }
    return true;
  });
  c.check("training records are deterministic", [](std::string&) {
    RunConfig run;
    run.steps = 4;
    run.log_interval = 2;
    run.eval_scenes = 3;
    auto text = [&] {
      std::string s;
      const TrainResult r = run_training(run, std::nullopt);
      for (const auto& rec : r.records) s += run_record_json(rec) + "\n";
      return s + num(r.ap.value_or(-1));
    };
    return text() == text();
  });
}

}  // namespace

std::vector<CheckResult> run_selftest(const SelftestOptions& options) {
  std::vector<CheckResult> results;
  Checker c(results);
  check_tensor(c);
  check_geometry(c, options);
  check_attention(c);
  check_roi(c);
  check_dynamic_head(c);
  check_matcher_losses(c);
  check_pipeline(c);
  check_synth(c);
  check_harness(c);
  return results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.pass; });
}

void write_selftest_table(std::ostream& os, const std::vector<CheckResult>& results) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<int, int>> counts;
  for (const auto& r : results) {
    if (!counts.count(r.module)) order.push_back(r.module);
    auto& [passed, total] = counts[r.module];
    passed += r.pass;
    ++total;
  }
  os << std::left << std::setw(18) << "module" << std::setw(10) << "checks"
     << "result\n";
  for (const auto& m : order) {
    const auto [passed, total] = counts[m];
    os << std::setw(18) << m << std::setw(10)
       << (std::to_string(passed) + "/" + std::to_string(total))
       << (passed == total ? "pass" : "FAIL") << '\n';
  }
  os << std::right;
  for (const auto& r : results) {
    if (!r.pass) os << "FAIL " << r.module << ": " << r.property << ": " << r.detail << '\n';
  }
}

}  // namespace sparsedet
