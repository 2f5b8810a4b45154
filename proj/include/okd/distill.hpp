// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "okd/augment.hpp"
#include "okd/losses.hpp"
#include "okd/net.hpp"

namespace okd {

/// lambda * CE(y, f_S(x); pi_ce) +
/// (1 - lambda) * KL(softmax(f_S(x)/pi_kl), softmax(f_T(x)/pi_kl)).
/// The teacher is evaluated without gradient tracking; gradients reach
/// student parameters only.
inline Tensor kd_loss(const Tensor& x, const std::vector<int>& y, const Network& student,
                      const Network& teacher, const DistillConfig& cfg) {
  cfg.validate();
  Tensor student_logits = student.forward(x);
  Tensor ce = cross_entropy(y, student_logits, cfg.pi_ce);
  Tensor teacher_probs;
  {
    NoGradGuard ng;
    teacher_probs = softmax_temp(teacher.forward(x), cfg.pi_kl);
  }
  Tensor student_probs = softmax_temp(student_logits, cfg.pi_kl);
  return add(scale(ce, cfg.lambda), scale(kl_div(student_probs, teacher_probs), 1.0 - cfg.lambda));
}

/// L_KD + (1 - lambda) * KL(softmax(f_S(A(x))/pi_kl), softmax(f_T(A(x))/pi_kl)).
/// A(x) is drawn once per call and the identical batch is fed to both
/// networks; no cross-entropy is computed on A(x) since it need not keep the
/// semantics of x. `augmented_out`, when given, receives the A(x) batch.
inline Tensor okd_loss(const Tensor& x, const std::vector<int>& y, const Network& student,
                       const Network& teacher, const Augmentor& aug, const DistillConfig& cfg, SplitRng rng,
                       Tensor* augmented_out = nullptr) {
  cfg.validate();
  const Tensor augmented = apply_augmentor(aug, x, rng, &y, &teacher);
  if (augmented_out) *augmented_out = augmented;
  Tensor base = kd_loss(x, y, student, teacher, cfg);
  Tensor teacher_probs;
  {
    NoGradGuard ng;
    teacher_probs = softmax_temp(teacher.forward(augmented), cfg.pi_kl);
  }
  Tensor student_probs = softmax_temp(student.forward(augmented), cfg.pi_kl);
  return add(base, scale(kl_div(student_probs, teacher_probs), 1.0 - cfg.lambda));
}

/// Ablation control: the distillation term stays on clean data, while the
/// cross-entropy term moves onto A(x) against the ORIGINAL labels (labels are
/// never mixed).
inline Tensor kd_aug_loss(const Tensor& x, const std::vector<int>& y, const Network& student,
                          const Network& teacher, const Augmentor& aug, const DistillConfig& cfg,
                          SplitRng rng, Tensor* augmented_out = nullptr) {
  cfg.validate();
  const Tensor augmented = apply_augmentor(aug, x, rng, &y, &teacher);
  if (augmented_out) *augmented_out = augmented;
  Tensor ce = cross_entropy(y, student.forward(augmented), cfg.pi_ce);
  Tensor teacher_probs;
  {
    NoGradGuard ng;
    teacher_probs = softmax_temp(teacher.forward(x), cfg.pi_kl);
  }
  Tensor student_probs = softmax_temp(student.forward(x), cfg.pi_kl);
  return add(scale(ce, cfg.lambda), scale(kl_div(student_probs, teacher_probs), 1.0 - cfg.lambda));
}

}  // namespace okd
