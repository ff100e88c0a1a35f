// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "sparsedet/errors.hpp"

namespace sparsedet {

namespace {

double eval_checked(const std::function<Tensor()>& f) {
  double v = f().item();
  if (!std::isfinite(v)) {
    throw DomainError("grad_check: function is non-finite at a probe point");
  }
  return v;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h) {
  Tensor leaf = Tensor::from_data(x.shape(),
                                  {x.data().begin(), x.data().end()}, true);
  return grad_check_leaves([&] { return f(leaf); }, {leaf}, h);
}

double grad_check_leaves(const std::function<Tensor()>& f,
                         std::vector<Tensor> leaves, double h) {
  for (auto& t : leaves) {
    if (!t.requires_grad()) {
      throw ContractError("grad_check: leaf does not require gradients");
    }
    t.zero_grad();
  }
  Tensor out = f();
  if (!std::isfinite(out.item())) {
    throw DomainError("grad_check: function is non-finite at the base point");
  }
  out.backward();

  double worst = 0.0;
  for (auto& t : leaves) {
    const std::vector<double> analytic = t.grad();
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = eval_checked(f);
      data[i] = saved - h;
      const double down = eval_checked(f);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max(1.0, std::abs(analytic[i]));
      worst = std::max(worst, err);
    }
    t.zero_grad();
  }
  return worst;
}

}  // namespace sparsedet
