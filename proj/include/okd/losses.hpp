// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "okd/tensor.hpp"

namespace okd {

/// Balancing weight and temperatures for distillation. lambda multiplies the
/// cross-entropy term; (1 - lambda) multiplies every KL term.
struct DistillConfig {
  double lambda = 0.1;
  double pi_ce = 1.0;
  double pi_kl = 4.0;

  void validate() const {
    if (!(lambda > 0.0 && lambda <= 1.0))
      throw std::invalid_argument("DistillConfig: lambda must be in (0, 1]");
    if (pi_ce <= 0.0 || pi_kl <= 0.0)
      throw std::invalid_argument("DistillConfig: temperatures must be positive");
  }
};

/// Mean over the batch of -log softmax_temp(logits, pi)[i, label_i],
/// evaluated in log space with max subtraction.
inline Tensor cross_entropy(const std::vector<int>& labels, const Tensor& logits, double pi = 1.0) {
  if (pi <= 0.0) throw std::invalid_argument("cross_entropy: temperature must be positive");
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy: expects [N,C] logits, got " + shape_str(logits.shape()));
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n)
    throw std::invalid_argument("cross_entropy: got " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " rows");
  for (const int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw std::runtime_error("cross_entropy: label " + std::to_string(y) + " out of range [0, " +
                               std::to_string(c) + ")");

  const auto& zv = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = zv.data() + i * c;
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp((row[j] - m) / pi);
      probs[i * c + j] = e;
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] *= inv;
    total += std::log(denom) - (row[labels[i]] - m) / pi;
  }
  const double loss = total / static_cast<double>(n);

  return make_op(
      Shape{1}, {loss}, {logits},
      [labels, probs = std::move(probs), n, c, pi](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& zg = detail::grad_buf(*self.parents[0]);
        const double g = self.grad[0] / (pi * static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = (static_cast<std::size_t>(labels[i]) == j) ? 1.0 : 0.0;
            zg[i * c + j] += g * (probs[i * c + j] - onehot);
          }
      },
      "cross_entropy");
}

/// Mean over rows of sum_j p_teacher_j * (ln p_teacher_j - ln p_student_j).
/// Both inputs must be row-stochastic. Probabilities below 1e-12 are floored
/// inside the logs (saturated students stay finite). The teacher side is the
/// reference measure: gradients flow to the student argument only.
inline Tensor kl_div(const Tensor& p_student, const Tensor& p_teacher) {
  constexpr double kEps = 1e-12;
  if (p_student.rank() != 2 || p_teacher.rank() != 2 || p_student.shape() != p_teacher.shape())
    throw std::invalid_argument("kl_div: expects matching [N,C] inputs, got " + shape_str(p_student.shape()) +
                                " and " + shape_str(p_teacher.shape()));
  const std::size_t n = p_student.shape()[0], c = p_student.shape()[1];
  const auto& ps = p_student.data();
  const auto& pt = p_teacher.data();
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0, st = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (ps[i * c + j] < -1e-9 || pt[i * c + j] < -1e-9)
        throw std::runtime_error("kl_div: negative probability in row " + std::to_string(i));
      ss += ps[i * c + j];
      st += pt[i * c + j];
    }
    if (std::abs(ss - 1.0) > 1e-6 || std::abs(st - 1.0) > 1e-6)
      throw std::runtime_error("kl_div: row " + std::to_string(i) + " is not a probability distribution");
  }

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double t = pt[i * c + j];
      if (t <= 0.0) continue;  // 0 * ln 0 = 0
      row += t * (std::log(std::max(t, kEps)) - std::log(std::max(ps[i * c + j], kEps)));
    }
    // rows are stochastic only to 1e-6, so clamp float-noise negatives
    total += std::max(row, 0.0);
  }
  const double loss = total / static_cast<double>(n);

  return make_op(
      Shape{1}, {loss}, {p_student},
      [pt_copy = pt, n, c](detail::TensorNode& self) {
        if (!self.parents[0]->tracked()) return;
        auto& sg = detail::grad_buf(*self.parents[0]);
        const auto& ps = self.parents[0]->value;
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n * c; ++i) {
          if (pt_copy[i] <= 0.0 || ps[i] <= kEps) continue;
          sg[i] += -g * pt_copy[i] / ps[i];
        }
      },
      "kl_div");
}

}  // namespace okd
