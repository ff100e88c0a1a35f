// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sparsedet/dynamic_head.hpp"
#include "sparsedet/gradcheck.hpp"
#include "sparsedet/ops.hpp"

using namespace sparsedet;
using oracle::Vec;

namespace {

Vec relu_v(Vec v) {
  for (auto& x : v) x = std::max(0.0, x);
  return v;
}

Vec layer_norm_v(const Vec& x, std::size_t width, const LayerNorm& ln) {
  Vec y(x.size());
  for (std::size_t r = 0; r < x.size() / width; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += x[r * width + j] / static_cast<double>(width);
    for (std::size_t j = 0; j < width; ++j) {
      var += (x[r * width + j] - mu) * (x[r * width + j] - mu) / static_cast<double>(width);
    }
    for (std::size_t j = 0; j < width; ++j) {
      y[r * width + j] = (x[r * width + j] - mu) / std::sqrt(var + 1e-5) * ln.gamma.data()[j] +
                         ln.beta.data()[j];
    }
  }
  return y;
}

void perturb(ParamStore& store, Rng& rng, double scale) {
  for (auto& p : store.params()) {
    for (auto& v : p.tensor.mutable_data()) v += scale * rng.normal();
  }
}

}  // namespace

TEST_CASE("generated blocks follow the [P1 | P2] layout") {
  ParamStore store(1);
  const auto gen = DynamicParamsGen::create(store, "g", 6, 4, 3);
  Rng rng(2);
  perturb(store, rng, 0.2);
  const Tensor q = oracle::random_tensor(rng, {2, 6});
  const DynamicParams p = generate_dynamic_params(q, gen);
  CHECK(p.p1.shape() == Shape{2, 4, 3});
  CHECK(p.p2.shape() == Shape{2, 3, 4});
  const Vec all = oracle::linear(q.data(), 2, gen.gen);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = 0; b < 3; ++b) {
        CHECK(p.p1.at({i, a, b}) == doctest::Approx(all[i * 24 + a * 3 + b]).epsilon(1e-14));
        CHECK(p.p2.at({i, b, a}) == doctest::Approx(all[i * 24 + 12 + b * 4 + a]).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("zero queries give zero blocks; blocks scale with the query") {
  ParamStore store(3);
  const auto gen = DynamicParamsGen::create(store, "g", 8, 8, 2);
  const DynamicParams z = generate_dynamic_params(Tensor::zeros({3, 8}), gen);
  for (double v : z.p1.data()) CHECK(v == 0.0);
  Rng rng(4);
  const Tensor q = oracle::random_tensor(rng, {3, 8});
  const DynamicParams a = generate_dynamic_params(q, gen);
  const DynamicParams b = generate_dynamic_params(scale(q, -3.0), gen);
  CHECK(oracle::max_abs_diff(b.p2.data(), scale(a.p2, -3.0).data()) < 1e-14);
}

TEST_CASE("dynamic conv matches the two-layer per-query oracle") {
  ParamStore store(5);
  const std::size_t n = 3, pos = 4, c = 6, k = 2;
  const auto norms = DynamicConvNorms::create(store, "n", c, k);
  Rng rng(6);
  perturb(store, rng, 0.3);
  const Tensor r = oracle::random_tensor(rng, {n, pos, c});
  const Tensor p1 = oracle::random_tensor(rng, {n, c, k}), p2 = oracle::random_tensor(rng, {n, k, c});
  const Tensor out = dynamic_conv(r, {p1, p2}, norms);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec ri(r.data().begin() + i * pos * c, r.data().begin() + (i + 1) * pos * c);
    const Vec a(p1.data().begin() + i * c * k, p1.data().begin() + (i + 1) * c * k);
    const Vec b(p2.data().begin() + i * k * c, p2.data().begin() + (i + 1) * k * c);
    const Vec h = relu_v(layer_norm_v(oracle::matmul(ri, a, pos, c, k), k, norms.hidden));
    const Vec o = relu_v(layer_norm_v(oracle::matmul(h, b, pos, k, c), c, norms.output));
    CHECK(oracle::max_abs_diff(Vec(out.data().begin() + i * pos * c,
                                   out.data().begin() + (i + 1) * pos * c),
                               o) < 1e-12);
  }
}

TEST_CASE("dynamic conv of zero features is zero") {
  ParamStore store(7);
  const auto norms = DynamicConvNorms::create(store, "n", 4, 2);
  Rng rng(8);
  const Tensor out = dynamic_conv(Tensor::zeros({2, 3, 4}),
                                  {oracle::random_tensor(rng, {2, 4, 2}), oracle::random_tensor(rng, {2, 2, 4})},
                                  norms);
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("masks are sigmoids of a two-layer bottleneck") {
  ParamStore store(9);
  const auto heads = ChannelMaskHeads::create(store, "m", 8, 2);
  Rng rng(10);
  perturb(store, rng, 0.5);
  const Tensor q = oracle::random_tensor(rng, {5, 8}, -2, 2);
  const ChannelMasks m = dcw_masks(q, heads);
  auto expect = [&](const Linear& a, const Linear& b) {
    Vec o = oracle::linear(relu_v(oracle::linear(q.data(), 5, a)), 5, b);
    for (auto& v : o) v = 1.0 / (1.0 + std::exp(-v));
    return o;
  };
  CHECK(oracle::max_abs_diff(m.cls.data(), expect(heads.cls_fc1, heads.cls_fc2)) < 1e-15);
  CHECK(oracle::max_abs_diff(m.reg.data(), expect(heads.reg_fc1, heads.reg_fc2)) < 1e-15);
  for (double v : m.cls.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("zeroed mask heads give one half everywhere") {
  ParamStore store(11);
  const auto heads = ChannelMaskHeads::create(store, "m", 4, 1);
  for (auto& p : store.params()) {
    for (auto& v : p.tensor.mutable_data()) v = 0.0;
  }
  Rng rng(12);
  const ChannelMasks m = dcw_masks(oracle::random_tensor(rng, {3, 4}), heads);
  for (double v : m.reg.data()) CHECK(v == 0.5);
}

TEST_CASE("channel weighting") {
  const Tensor r = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4});
  CHECK(apply_dcw(r, Tensor::from_data({1, 2}, {0.5, 1})).data()[0] == 0.5);
  CHECK(oracle::bitwise_equal(apply_dcw(r, Tensor::from_data({1, 2}, {0.5, 1})).data(),
                              Vec{0.5, 2, 1.5, 4}));
  CHECK(oracle::bitwise_equal(apply_dcw(r, Tensor::full({1, 2}, 1.0)).data(), r.data()));
  const Tensor zeroed = apply_dcw(r, Tensor::zeros({1, 2}));
  for (double v : zeroed.data()) CHECK(v == 0.0);
  Rng rng(13);
  const Tensor big = oracle::random_tensor(rng, {3, 5, 4});
  const Tensor m = oracle::random_tensor(rng, {3, 4}, 0, 1);
  Vec m2(m.data().begin(), m.data().end());
  m2[6] += 0.3;  // query 1, channel 2
  const Tensor a = apply_dcw(big, m), b = apply_dcw(big, Tensor::from_data({3, 4}, m2));
  for (std::size_t p = 0; p < 5; ++p) CHECK(std::abs(b.at({1, p, 2})) >= std::abs(a.at({1, p, 2})));
}

TEST_CASE("embedding projections flatten then apply separate maps") {
  ParamStore store(14);
  const Linear wc = Linear::create(store, "wc", 12, 4), wr = Linear::create(store, "wr", 12, 4);
  Rng rng(15);
  perturb(store, rng, 0.1);
  const Tensor rc = oracle::random_tensor(rng, {2, 3, 4}), rr = oracle::random_tensor(rng, {2, 3, 4});
  const ObjectEmbeddings o = project_embeddings(rc, rr, wc, wr);
  CHECK(oracle::max_abs_diff(o.cls.data(), oracle::linear(rc.data(), 2, wc)) < 1e-15);
  CHECK(oracle::max_abs_diff(o.reg.data(), oracle::linear(rr.data(), 2, wr)) < 1e-15);
}

TEST_CASE("the regression projection never reaches o_c") {
  ParamStore store(16);
  const Linear wc = Linear::create(store, "wc", 8, 4);
  Linear wr = Linear::create(store, "wr", 8, 4);
  Rng rng(17);
  const Tensor rc = oracle::random_tensor(rng, {3, 2, 4}), rr = oracle::random_tensor(rng, {3, 2, 4});
  const Tensor before = project_embeddings(rc, rr, wc, wr).cls;
  for (auto& v : wr.weight.mutable_data()) v = rng.normal();
  CHECK(oracle::bitwise_equal(project_embeddings(rc, rr, wc, wr).cls.data(), before.data()));
}

TEST_CASE("query update is layer_norm(s + ffn(s)) with s = o_c + o_r") {
  ParamStore store(18);
  const FeedForward ffn = FeedForward::create(store, "f", 6);
  Rng rng(19);
  perturb(store, rng, 0.2);
  const Tensor oc = oracle::random_tensor(rng, {4, 6}), orr = oracle::random_tensor(rng, {4, 6});
  Vec s(24);
  for (std::size_t i = 0; i < 24; ++i) s[i] = oc.data()[i] + orr.data()[i];
  const Vec f = oracle::linear(relu_v(oracle::linear(s, 4, ffn.fc1)), 4, ffn.fc2);
  Vec x(24);
  for (std::size_t i = 0; i < 24; ++i) x[i] = s[i] + f[i];
  CHECK(oracle::max_abs_diff(update_query({oc, orr}, ffn).data(), layer_norm_v(x, 6, ffn.norm)) < 1e-12);
  // Cancelling embeddings give the update of zero.
  CHECK(oracle::bitwise_equal(update_query({oc, neg(oc)}, ffn).data(),
                              feed_forward_update(Tensor::zeros({4, 6}), ffn).data()));
}

TEST_CASE("end-to-end head gradient") {
  ParamStore store(20);
  const std::size_t d = 8, s2 = 4;
  const auto gen = DynamicParamsGen::create(store, "g", d, d, 2);
  const auto norms = DynamicConvNorms::create(store, "n", d, 2);
  const auto heads = ChannelMaskHeads::create(store, "m", d, 2);
  const Linear wc = Linear::create(store, "wc", s2 * d, d), wr = Linear::create(store, "wr", s2 * d, d);
  const FeedForward ffn = FeedForward::create(store, "f", d);
  Rng rng(21);
  const Tensor r = oracle::random_tensor(rng, {3, s2, d});
  const Tensor c = oracle::random_tensor(rng, {3, d});
  auto head = [&](const Tensor& q) {
    const Tensor f = dynamic_conv(r, generate_dynamic_params(q, gen), norms);
    const ChannelMasks m = dcw_masks(q, heads);
    const ObjectEmbeddings o = project_embeddings(apply_dcw(f, m.cls), apply_dcw(f, m.reg), wc, wr);
    return sum(mul(update_query(o, ffn), c));
  };
  CHECK(grad_check(head, oracle::random_tensor(rng, {3, d})) < 1e-5);
}
