// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sparsedet/attention.hpp"
#include "sparsedet/errors.hpp"
#include "sparsedet/gradcheck.hpp"
#include "sparsedet/ops.hpp"

using namespace sparsedet;
using oracle::Vec;

namespace {

// Attention spelled out per head and per row. `iou` (row-major, may be
// null) multiplies the exponentials; its diagonal is taken as 1.
Vec naive_attention(const Tensor& q, const MhsaParams& p, std::size_t heads, const Vec* iou) {
  const std::size_t n = q.dim(0), d = q.dim(1), dh = d / heads;
  const Vec qkv = oracle::linear(q.data(), n, p.qkv);
  Vec merged(n * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec logits(n);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dh; ++k) {
          s += qkv[i * 3 * d + h * dh + k] * qkv[j * 3 * d + d + h * dh + k];
        }
        logits[j] = s / std::sqrt(static_cast<double>(dh));
      }
      Vec w(n);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double m = iou ? (i == j ? 1.0 : (*iou)[i * n + j]) : 1.0;
        z += (w[j] = std::exp(logits[j]) * m);
      }
      for (std::size_t k = 0; k < dh; ++k) {
        for (std::size_t j = 0; j < n; ++j) {
          merged[i * d + h * dh + k] += w[j] / z * qkv[j * 3 * d + 2 * d + h * dh + k];
        }
      }
    }
  }
  return oracle::linear(merged, n, p.out);
}

Tensor random_iou(Rng& rng, std::size_t n) {
  BoxSet s{{}, 64, 64};
  for (std::size_t i = 0; i < n; ++i) s.boxes.push_back(oracle::random_box(rng, 64, 64));
  return pairwise_iou(s);
}

}  // namespace

TEST_CASE("mode names round trip") {
  for (AttnMode m : {AttnMode::kFullMsa, AttnMode::kNoMsa, AttnMode::kIouAsAttn, AttnMode::kIouEsa}) {
    CHECK(parse_attn_mode(attn_mode_name(m)) == m);
  }
  CHECK(attn_mode_name(AttnMode::kIouEsa) == "iou-esa");
  CHECK_THROWS(parse_attn_mode("iou_esa_typo"));
}

TEST_CASE("standard and enhanced attention match the per-head oracle") {
  Rng rng(1);
  for (std::size_t heads : {1, 2, 4}) {
    ParamStore store(rng.next_u64());
    const AttnConfig cfg{16, heads};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    const Tensor q = oracle::random_tensor(rng, {7, 16});
    CHECK(oracle::max_abs_diff(standard_msa(q, p, cfg).data(), naive_attention(q, p, heads, nullptr)) <
          1e-12);
    const Tensor m = random_iou(rng, 7);
    const Vec mv(m.data().begin(), m.data().end());
    CHECK(oracle::max_abs_diff(iou_esa(q, m, p, cfg).data(), naive_attention(q, p, heads, &mv)) <
          1e-12);
  }
}

TEST_CASE("all-ones iou reproduces standard attention bit for bit") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const std::size_t heads = std::vector<std::size_t>{1, 2, 4}[static_cast<std::size_t>(t % 3)];
    const std::size_t d = heads * static_cast<std::size_t>(rng.uniform_int(1, 16 / static_cast<std::int64_t>(heads)));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 16));
    ParamStore store(rng.next_u64());
    const AttnConfig cfg{d, heads};
    const MhsaParams p = MhsaParams::create(store, "a", cfg);
    const Tensor q = oracle::random_tensor(rng, {n, d}, -3, 3);
    CHECK(oracle::bitwise_equal(iou_esa(q, Tensor::full({n, n}, 1.0), p, cfg).data(),
                                standard_msa(q, p, cfg).data()));
  }
}

TEST_CASE("hand example: equal logits, iou row [1, 0.5]") {
  ParamStore store(3);
  const AttnConfig cfg{2, 1};
  MhsaParams p = MhsaParams::create(store, "a", cfg);
  for (auto& v : p.qkv.weight.mutable_data()) v = 0.0;
  const Tensor w = attention_weights(Tensor::from_data({2, 2}, {1, 2, 3, 4}),
                                     Tensor::from_data({2, 2}, {1, 0.5, 0.5, 1}), p, cfg,
                                     AttnMode::kIouEsa);
  // exp(0) * 1 / (exp(0) * 1 + exp(0) * 0.5) = 2/3.
  CHECK(std::abs(w.at({0, 0, 0}) - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(w.at({0, 0, 1}) - 1.0 / 3.0) < 1e-12);
}

TEST_CASE("identity iou routes every query to itself") {
  ParamStore store(4);
  const AttnConfig cfg{8, 2};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  Rng rng(5);
  Vec eye(25, 0.0);
  for (std::size_t i = 0; i < 5; ++i) eye[i * 6] = 1.0;
  const Tensor q = oracle::random_tensor(rng, {5, 8}, -4, 4);
  const Tensor w = attention_weights(q, Tensor::from_data({5, 5}, eye), p, cfg, AttnMode::kIouEsa);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) CHECK(w.at({h, i, j}) == (i == j ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("zero iou rows still route through the forced diagonal") {
  ParamStore store(6);
  const AttnConfig cfg{4, 1};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  Rng rng(7);
  const Tensor w = attention_weights(oracle::random_tensor(rng, {3, 4}), Tensor::zeros({3, 3}), p,
                                     cfg, AttnMode::kIouEsa);
  for (std::size_t i = 0; i < 3; ++i) CHECK(w.at({0, i, i}) == 1.0);
}

TEST_CASE("extreme logits with tiny iou weights stay finite") {
  const Vec weights{1, 1e-300, 1e-300, 1};
  const Tensor w = weighted_softmax_rows(Tensor::from_data({2, 2}, {-800, 800, 0, 0}), weights);
  for (double v : w.data()) CHECK(std::isfinite(v));
  CHECK(w.at({0, 0}) + w.at({0, 1}) == doctest::Approx(1.0));
}

TEST_CASE("weights sum to one and ignore row shifts") {
  Rng rng(8);
  ParamStore store(9);
  const AttnConfig cfg{8, 4};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  for (int t = 0; t < 100; ++t) {
    const Tensor q = oracle::random_tensor(rng, {6, 8}, -5, 5);
    const Tensor m = random_iou(rng, 6);
    for (AttnMode mode : {AttnMode::kFullMsa, AttnMode::kIouEsa, AttnMode::kIouAsAttn}) {
      const Tensor w = attention_weights(q, m, p, cfg, mode);
      for (std::size_t h = 0; h < 4; ++h) {
        for (std::size_t i = 0; i < 6; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < 6; ++j) s += w.at({h, i, j});
          CHECK(std::abs(s - 1.0) < 1e-9);
        }
      }
    }
    const Tensor logits = oracle::random_tensor(rng, {2, 6, 6}, -10, 10);
    Vec shifted(logits.data().begin(), logits.data().end());
    for (std::size_t r = 0; r < 12; ++r) {
      const double c = rng.uniform(-50, 50);
      for (std::size_t j = 0; j < 6; ++j) shifted[r * 6 + j] += c;
    }
    const Vec wm = with_unit_diagonal(m);
    CHECK(oracle::max_abs_diff(weighted_softmax_rows(Tensor::from_data({2, 6, 6}, shifted), wm).data(),
                               weighted_softmax_rows(logits, wm).data()) < 1e-12);
  }
}

TEST_CASE("iou-as-attention ignores the queries") {
  ParamStore store(10);
  const AttnConfig cfg{8, 2};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  Rng rng(11);
  const Tensor m = random_iou(rng, 5);
  const Tensor a = attention_weights(oracle::random_tensor(rng, {5, 8}), m, p, cfg, AttnMode::kIouAsAttn);
  const Tensor b = attention_weights(oracle::random_tensor(rng, {5, 8}), m, p, cfg, AttnMode::kIouAsAttn);
  CHECK(oracle::bitwise_equal(a.data(), b.data()));
  const Vec wm = with_unit_diagonal(m);
  for (std::size_t i = 0; i < 5; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 5; ++j) z += wm[i * 5 + j];
    for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(a.at({0, i, j}) - wm[i * 5 + j] / z) < 1e-15);
  }
}

TEST_CASE("no-msa has no attention weights") {
  ParamStore store(12);
  const AttnConfig cfg{4, 2};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  CHECK_THROWS_AS(attention_weights(Tensor::zeros({2, 4}), Tensor::full({2, 2}, 1.0), p, cfg,
                                    AttnMode::kNoMsa),
                  ModeError);
  CHECK_THROWS_AS(attend(Tensor::zeros({2, 4}), Tensor::full({2, 2}, 1.0), p, cfg, AttnMode::kNoMsa),
                  ModeError);
}

TEST_CASE("raising one iou entry shifts weight toward that key only") {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const Tensor x = oracle::random_tensor(rng, {1, 5, 5}, -3, 3);
    Vec w(25);
    for (auto& v : w) v = rng.uniform(0.05, 0.9);
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, 4));
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, 4));
    Vec w2 = w;
    w2[i * 5 + j] *= 1.5;
    const Tensor a = weighted_softmax_rows(x, w), b = weighted_softmax_rows(x, w2);
    CHECK(b.at({0, i, j}) > a.at({0, i, j}));
    for (std::size_t k = 0; k < 5; ++k) {
      if (k != j) CHECK(b.at({0, i, k}) <= a.at({0, i, k}));
    }
  }
}

TEST_CASE("enhanced attention is permutation equivariant") {
  ParamStore store(14);
  const AttnConfig cfg{8, 2};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  Rng rng(15);
  BoxSet boxes{{}, 40, 40};
  for (int i = 0; i < 6; ++i) boxes.boxes.push_back(oracle::random_box(rng, 40, 40));
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  BoxSet permuted{{}, 40, 40};
  for (std::size_t i : perm) permuted.boxes.push_back(boxes.boxes[i]);
  const Tensor q = oracle::random_tensor(rng, {6, 8});
  const Tensor out = iou_esa(q, pairwise_iou(boxes), p, cfg);
  const Tensor pout = iou_esa(index_rows(q, perm), pairwise_iou(permuted), p, cfg);
  CHECK(oracle::max_abs_diff(pout.data(), index_rows(out, perm).data()) < 1e-12);
}

TEST_CASE("single query returns its own projected value") {
  ParamStore store(16);
  const AttnConfig cfg{8, 4};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  Rng rng(17);
  const Tensor q = oracle::random_tensor(rng, {1, 8});
  const Vec qkv = oracle::linear(q.data(), 1, p.qkv);
  const Vec v(qkv.begin() + 16, qkv.end());
  CHECK(oracle::max_abs_diff(iou_esa(q, Tensor::full({1, 1}, 0.3), p, cfg).data(),
                             oracle::linear(v, 1, p.out)) < 1e-12);
}

TEST_CASE("gradients through enhanced attention") {
  ParamStore store(18);
  const AttnConfig cfg{8, 2};
  const MhsaParams p = MhsaParams::create(store, "a", cfg);
  Rng rng(19);
  const Tensor m = random_iou(rng, 4);
  const Tensor c = oracle::random_tensor(rng, {4, 8});
  CHECK(grad_check([&](const Tensor& q) { return sum(mul(iou_esa(q, m, p, cfg), c)); },
                   oracle::random_tensor(rng, {4, 8})) < 1e-5);
}

TEST_CASE("head count must divide the width") {
  CHECK_THROWS_AS((AttnConfig{6, 4}.validate()), DimensionError);
  CHECK_THROWS_AS((AttnConfig{8, 0}.validate()), DimensionError);
  CHECK_NOTHROW((AttnConfig{8, 4}.validate()));
}
