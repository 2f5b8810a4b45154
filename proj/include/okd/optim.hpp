// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "okd/net.hpp"

namespace okd {

/// Per-epoch cosine annealing: 0.5 * lr0 * (1 + cos(pi * epoch / max_epochs)).
inline double cosine_lr(std::size_t epoch, std::size_t max_epochs, double lr0) {
  if (max_epochs == 0) throw std::invalid_argument("cosine_lr: max_epochs must be positive");
  if (epoch > max_epochs)
    throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) + " exceeds max_epochs " +
                                std::to_string(max_epochs));
  constexpr double kPi = 3.14159265358979323846;
  return 0.5 * lr0 * (1.0 + std::cos(kPi * static_cast<double>(epoch) / static_cast<double>(max_epochs)));
}

/// v <- momentum * v + g;  p <- p - lr * v.
inline void sgd_momentum_step(std::vector<double>& params, const std::vector<double>& grads,
                              std::vector<double>& velocity, double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw std::invalid_argument("sgd_momentum_step: size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t t = 0;
};

/// Standard bias-corrected Adam update.
inline void adam_step(std::vector<double>& params, const std::vector<double>& grads, AdamState& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: size mismatch");
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

struct OptimizerConfig {
  std::string kind = "sgd_momentum";  // sgd_momentum | adam
  double lr0 = 0.01;
  double momentum = 0.9;

  void validate() const {
    if (kind != "sgd_momentum" && kind != "adam")
      throw std::invalid_argument("OptimizerConfig: unknown kind: " + kind);
    if (lr0 <= 0.0) throw std::invalid_argument("OptimizerConfig: lr0 must be positive");
    if (momentum < 0.0 || momentum >= 1.0)
      throw std::invalid_argument("OptimizerConfig: momentum must be in [0, 1)");
  }
};

/// Applies the configured update rule across a network's parameters using
/// their accumulated gradients. Parameters without gradients are skipped
/// (a parameter cut off by dead relus simply keeps its value).
class Optimizer {
public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const OptimizerConfig& config() const { return cfg_; }

  void step(Network& net, double lr) {
    auto& params = net.params();
    if (velocity_.empty() && adam_.empty()) {
      if (cfg_.kind == "sgd_momentum")
        for (const auto& p : params) velocity_.emplace_back(p.tensor.size(), 0.0);
      else
        adam_.resize(params.size());
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& t = params[i].tensor;
      if (!t.has_grad()) continue;
      if (cfg_.kind == "sgd_momentum")
        sgd_momentum_step(t.raw_data(), t.grad(), velocity_[i], lr, cfg_.momentum);
      else
        adam_step(t.raw_data(), t.grad(), adam_[i], lr);
    }
  }

private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> velocity_;
  std::vector<AdamState> adam_;
};

}  // namespace okd
