// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/nn.hpp"

#include <cmath>

#include "sparsedet/errors.hpp"
#include "sparsedet/ops.hpp"

namespace sparsedet {

Tensor ParamStore::create(const std::string& name, Shape shape, Init init) {
  std::vector<double> values(shape_numel(shape), 0.0);
  switch (init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(values.begin(), values.end(), 1.0);
      break;
    case Init::kXavier: {
      if (shape.size() != 2) {
        throw ContractError("xavier init needs a 2-D shape for " + name);
      }
      const double limit =
          std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      for (auto& v : values) v = rng_.uniform(-limit, limit);
      break;
    }
  }
  return create_from(name, std::move(shape), std::move(values));
}

Tensor ParamStore::create_from(const std::string& name, Shape shape,
                               std::vector<double> values) {
  if (!names_.insert(name).second) {
    throw ContractError("duplicate parameter name " + name);
  }
  Tensor t = Tensor::from_data(std::move(shape), std::move(values), true);
  params_.push_back({name, t});
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("no parameter named " + name);
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

Linear Linear::create(ParamStore& store, const std::string& name,
                      std::size_t in, std::size_t out) {
  return {store.create(name + ".weight", {in, out}, Init::kXavier),
          store.create(name + ".bias", {out}, Init::kZeros)};
}

Tensor Linear::operator()(const Tensor& x) const {
  return linear(x, weight, bias);
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name,
                            std::size_t width) {
  return {store.create(name + ".gamma", {width}, Init::kOnes),
          store.create(name + ".beta", {width}, Init::kZeros)};
}

Tensor LayerNorm::operator()(const Tensor& x) const {
  return layer_norm(x, gamma, beta);
}

}  // namespace sparsedet
