// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "okd/tensor.hpp"

namespace okd_test {

// Independent gradient oracle: central finite differences over every element
// of every listed leaf, compared against the gradients produced by
// okd::backward on the same loss. Returns the max of
// |analytic - fd| / max(1, |fd|).
template <typename LossFn>
double grad_max_rel_error(LossFn&& make_loss, std::vector<okd::Tensor> leaves, double h = 1e-5) {
  for (auto& p : leaves) {
    p.zero_grad();
    if (!p.requires_grad()) p.set_requires_grad(true);
  }
  okd::Tensor loss = make_loss();
  okd::backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& p : leaves) analytic.push_back(p.grad());

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    auto& data = leaves[pi].raw_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = make_loss().item();
      data[i] = orig - h;
      const double fm = make_loss().item();
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double rel = std::abs(analytic[pi][i] - fd) / std::max(1.0, std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace okd_test
