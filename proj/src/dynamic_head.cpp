// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/dynamic_head.hpp"

#include "sparsedet/errors.hpp"
#include "sparsedet/ops.hpp"

namespace sparsedet {

DynamicParamsGen DynamicParamsGen::create(ParamStore& store,
                                          const std::string& name,
                                          std::size_t query_width,
                                          std::size_t channels,
                                          std::size_t hidden) {
  return {Linear::create(store, name, query_width, 2 * channels * hidden),
          channels, hidden};
}

DynamicParams generate_dynamic_params(const Tensor& q,
                                      const DynamicParamsGen& gen) {
  if (q.ndim() != 2 || q.dim(1) != gen.gen.in()) {
    throw DimensionError("generate_dynamic_params: queries " +
                         shape_str(q.shape()) + " for generator input " +
                         std::to_string(gen.gen.in()));
  }
  const std::size_t n = q.dim(0);
  const std::size_t block = gen.channels * gen.hidden;
  Tensor all = gen.gen(q);
  return {reshape(slice(all, 1, 0, block), {n, gen.channels, gen.hidden}),
          reshape(slice(all, 1, block, block), {n, gen.hidden, gen.channels})};
}

DynamicConvNorms DynamicConvNorms::create(ParamStore& store,
                                          const std::string& name,
                                          std::size_t channels,
                                          std::size_t hidden) {
  return {LayerNorm::create(store, name + ".norm1", hidden),
          LayerNorm::create(store, name + ".norm2", channels)};
}

Tensor dynamic_conv(const Tensor& r, const DynamicParams& params,
                    const DynamicConvNorms& norms) {
  Tensor h = relu(norms.hidden(bmm(r, params.p1)));
  return relu(norms.output(bmm(h, params.p2)));
}

ChannelMaskHeads ChannelMaskHeads::create(ParamStore& store,
                                          const std::string& name,
                                          std::size_t width,
                                          std::size_t bottleneck) {
  return {Linear::create(store, name + ".cls_fc1", width, bottleneck),
          Linear::create(store, name + ".cls_fc2", bottleneck, width),
          Linear::create(store, name + ".reg_fc1", width, bottleneck),
          Linear::create(store, name + ".reg_fc2", bottleneck, width)};
}

ChannelMasks dcw_masks(const Tensor& q, const ChannelMaskHeads& heads) {
  return {sigmoid(heads.cls_fc2(relu(heads.cls_fc1(q)))),
          sigmoid(heads.reg_fc2(relu(heads.reg_fc1(q))))};
}

Tensor apply_dcw(const Tensor& r, const Tensor& mask) {
  return scale_channels(r, mask);
}

namespace {

Tensor flatten_rows(const Tensor& r) {
  if (r.ndim() != 3) {
    throw DimensionError("expected [N x P x c] features, got " +
                         shape_str(r.shape()));
  }
  return reshape(r, {r.dim(0), r.dim(1) * r.dim(2)});
}

}  // namespace

ObjectEmbeddings project_embeddings(const Tensor& r_cls, const Tensor& r_reg,
                                    const Linear& w_cls, const Linear& w_reg) {
  return {w_cls(flatten_rows(r_cls)), w_reg(flatten_rows(r_reg))};
}

FeedForward FeedForward::create(ParamStore& store, const std::string& name,
                                std::size_t width) {
  return {Linear::create(store, name + ".fc1", width, 2 * width),
          Linear::create(store, name + ".fc2", 2 * width, width),
          LayerNorm::create(store, name + ".norm", width)};
}

Tensor feed_forward_update(const Tensor& x, const FeedForward& ffn) {
  return ffn.norm(add(x, ffn.fc2(relu(ffn.fc1(x)))));
}

Tensor update_query(const ObjectEmbeddings& o, const FeedForward& ffn) {
  return feed_forward_update(add(o.cls, o.reg), ffn);
}

}  // namespace sparsedet
