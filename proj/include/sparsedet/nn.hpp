// SPDX-License-Identifier: Apache-2.0
//
// Parameter bookkeeping and the two stock layers every head is built from.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "sparsedet/random.hpp"
#include "sparsedet/tensor.hpp"

namespace sparsedet {

enum class Init { kZeros, kOnes, kXavier };

// Owns the named parameters of one model in creation order. Names are
// unique; registering a duplicate throws ContractError.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  Tensor create(const std::string& name, Shape shape, Init init);
  Tensor create_from(const std::string& name, Shape shape,
                     std::vector<double> values);

  const std::vector<Parameter>& params() const { return params_; }
  std::vector<Parameter>& params() { return params_; }
  const Tensor& get(const std::string& name) const;
  std::size_t total_size() const;
  Rng& rng() { return rng_; }

 private:
  Rng rng_;
  std::vector<Parameter> params_;
  std::unordered_set<std::string> names_;
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear create(ParamStore& store, const std::string& name,
                       std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const;
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(ParamStore& store, const std::string& name,
                          std::size_t width);
  Tensor operator()(const Tensor& x) const;
};

}  // namespace sparsedet
