// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "okd/losses.hpp"
#include "okd/net.hpp"
#include "okd/rng.hpp"
#include "okd/tensor.hpp"

namespace okd {

// The OOD data generator A(.). Every generator maps a batch to a batch of the
// same shape, never mutates its input, and is a pure function of
// (input, rng seed): per-example draws come from a substream forked on the
// example index, so results do not depend on evaluation schedule.

enum class AugKind {
  identity,
  cutmix,
  mixup,
  cutmix_mixup,
  jigsaw,
  gaussian_noise,
  adv_gradient,
  wave_mixup,
  wave_noise,
  wave_mask,
};

inline std::string to_string(AugKind k) {
  switch (k) {
    case AugKind::identity: return "identity";
    case AugKind::cutmix: return "cutmix";
    case AugKind::mixup: return "mixup";
    case AugKind::cutmix_mixup: return "cutmix_mixup";
    case AugKind::jigsaw: return "jigsaw";
    case AugKind::gaussian_noise: return "gaussian_noise";
    case AugKind::adv_gradient: return "adv_gradient";
    case AugKind::wave_mixup: return "wave_mixup";
    case AugKind::wave_noise: return "wave_noise";
    case AugKind::wave_mask: return "wave_mask";
  }
  throw std::logic_error("unknown AugKind");
}

inline AugKind aug_kind_from_string(const std::string& s) {
  for (const AugKind k : {AugKind::identity, AugKind::cutmix, AugKind::mixup, AugKind::cutmix_mixup,
                          AugKind::jigsaw, AugKind::gaussian_noise, AugKind::adv_gradient, AugKind::wave_mixup,
                          AugKind::wave_noise, AugKind::wave_mask})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown augmentor kind: " + s);
}

struct Augmentor {
  AugKind kind = AugKind::identity;
  double beta_a = 1.0;  // mixing Beta parameters
  double beta_b = 1.0;
  std::size_t k = 4;    // jigsaw patch count (perfect square)
  double sigma = 0.1;   // noise stddev
  double epsilon = 0.03;  // adversarial step size
  double mask_fraction = 0.2;

  void validate() const {
    if (beta_a <= 0.0 || beta_b <= 0.0) throw std::invalid_argument("Augmentor: Beta parameters must be positive");
    if (sigma < 0.0 || epsilon < 0.0) throw std::invalid_argument("Augmentor: magnitudes must be >= 0");
    if (mask_fraction < 0.0 || mask_fraction > 1.0)
      throw std::invalid_argument("Augmentor: mask_fraction must be in [0, 1]");
    if (kind == AugKind::jigsaw) {
      const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(k))));
      if (side * side != k) throw std::invalid_argument("Augmentor: jigsaw k must be a perfect square");
    }
  }
};

namespace detail {

inline void require_batch_rank(const Tensor& batch, std::size_t rank, const char* op) {
  if (batch.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expects rank-" + std::to_string(rank) + " batch, got " +
                                shape_str(batch.shape()));
}

}  // namespace detail

/// out_i = m * x_i + (1 - m) * x_{perm(i)}, m ~ Beta(a, b) per example.
/// Works for any batch layout [N, ...].
inline Tensor mixup(const Tensor& batch, SplitRng rng, double beta_a = 1.0, double beta_b = 1.0) {
  const std::size_t n = batch.rank() >= 1 ? batch.shape()[0] : 0;
  if (batch.rank() < 2 || n < 2)
    throw std::invalid_argument("mixup: needs a batch of at least 2 examples, got " + shape_str(batch.shape()));
  const std::size_t stride = batch.size() / n;
  const auto perm = rng.fork("perm").permutation(n);
  SplitRng ex = rng.fork("ex");
  std::vector<double> out(batch.size());
  const auto& xv = batch.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double m = ex.fork(i).beta(beta_a, beta_b);
    const double* self = xv.data() + i * stride;
    const double* partner = xv.data() + perm[i] * stride;
    double* o = out.data() + i * stride;
    for (std::size_t e = 0; e < stride; ++e) o[e] = m * self[e] + (1.0 - m) * partner[e];
  }
  return Tensor(batch.shape(), std::move(out));
}

/// Box side lengths for a cutmix draw: H*sqrt(1-m) by W*sqrt(1-m), rounded,
/// so the realized area stays within one pixel row/column of (1-m)*H*W.
inline std::pair<std::size_t, std::size_t> cutmix_box(std::size_t h, std::size_t w, double m) {
  const double side = std::sqrt(1.0 - m);
  return {static_cast<std::size_t>(std::lround(side * static_cast<double>(h))),
          static_cast<std::size_t>(std::lround(side * static_cast<double>(w)))};
}

/// Pastes a partner rectangle of area fraction (1 - m), m ~ Beta(a, b), at a
/// uniformly random position chosen so the box lies fully inside the image;
/// every output pixel comes verbatim from exactly one of the two sources.
inline Tensor cutmix(const Tensor& batch, SplitRng rng, double beta_a = 1.0, double beta_b = 1.0) {
  detail::require_batch_rank(batch, 4, "cutmix");
  const std::size_t n = batch.shape()[0], c = batch.shape()[1], h = batch.shape()[2], w = batch.shape()[3];
  const auto perm = rng.fork("perm").permutation(n);
  SplitRng ex = rng.fork("ex");
  std::vector<double> out = batch.data();
  const auto& xv = batch.data();
  for (std::size_t i = 0; i < n; ++i) {
    SplitRng er = ex.fork(i);
    const double m = er.beta(beta_a, beta_b);
    const auto [rh, rw] = cutmix_box(h, w, m);
    if (rh == 0 || rw == 0) continue;
    const std::size_t y0 = static_cast<std::size_t>(er.next_below(h - rh + 1));
    const std::size_t x0 = static_cast<std::size_t>(er.next_below(w - rw + 1));
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = y0; y < y0 + rh; ++y) {
        const std::size_t row = ((perm[i] * c + ch) * h + y) * w;
        const std::size_t orow = ((i * c + ch) * h + y) * w;
        for (std::size_t x = x0; x < x0 + rw; ++x) out[orow + x] = xv[row + x];
      }
  }
  return Tensor(batch.shape(), std::move(out));
}

/// alpha * Mixup(x) + (1 - alpha) * CutMix(x), alpha ~ Beta(a, b) per
/// example, with independent partner permutations, so an output may blend up
/// to three examples.
inline Tensor cutmix_mixup(const Tensor& batch, SplitRng rng, double beta_a = 1.0, double beta_b = 1.0) {
  detail::require_batch_rank(batch, 4, "cutmix_mixup");
  const Tensor mixed = mixup(batch, rng.fork("mixup"), beta_a, beta_b);
  const Tensor cut = cutmix(batch, rng.fork("cutmix"), beta_a, beta_b);
  const std::size_t n = batch.shape()[0];
  const std::size_t stride = batch.size() / n;
  SplitRng al = rng.fork("alpha");
  std::vector<double> out(batch.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double alpha = al.fork(i).beta(beta_a, beta_b);
    const double* mv = mixed.data().data() + i * stride;
    const double* cv = cut.data().data() + i * stride;
    double* o = out.data() + i * stride;
    for (std::size_t e = 0; e < stride; ++e) o[e] = alpha * mv[e] + (1.0 - alpha) * cv[e];
  }
  return Tensor(batch.shape(), std::move(out));
}

/// Partitions each image into sqrt(k) x sqrt(k) patches and permutes them
/// uniformly at random; the multiset of pixel values is exactly preserved.
inline Tensor jigsaw(const Tensor& batch, std::size_t k, SplitRng rng) {
  detail::require_batch_rank(batch, 4, "jigsaw");
  const std::size_t n = batch.shape()[0], c = batch.shape()[1], h = batch.shape()[2], w = batch.shape()[3];
  const std::size_t g = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(k))));
  if (g * g != k) throw std::invalid_argument("jigsaw: k must be a perfect square, got " + std::to_string(k));
  if (g == 0 || h % g != 0 || w % g != 0)
    throw std::invalid_argument("jigsaw: grid " + std::to_string(g) + "x" + std::to_string(g) +
                                " does not divide image " + shape_str(batch.shape()));
  const std::size_t ph = h / g, pw = w / g;
  SplitRng ex = rng.fork("ex");
  std::vector<double> out(batch.size());
  const auto& xv = batch.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto perm = ex.fork(i).permutation(k);
    for (std::size_t p = 0; p < k; ++p) {
      const std::size_t dst_gy = p / g, dst_gx = p % g;
      const std::size_t src_gy = perm[p] / g, src_gx = perm[p] % g;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < ph; ++y) {
          const std::size_t srow = ((i * c + ch) * h + src_gy * ph + y) * w + src_gx * pw;
          const std::size_t drow = ((i * c + ch) * h + dst_gy * ph + y) * w + dst_gx * pw;
          for (std::size_t x = 0; x < pw; ++x) out[drow + x] = xv[srow + x];
        }
    }
  }
  return Tensor(batch.shape(), std::move(out));
}

/// out = x + eps, eps ~ N(0, sigma^2) i.i.d.
inline Tensor gaussian_noise(const Tensor& batch, double sigma, SplitRng rng) {
  if (sigma < 0.0) throw std::invalid_argument("gaussian_noise: sigma must be >= 0");
  if (batch.rank() < 2) throw std::invalid_argument("gaussian_noise: expects a batch");
  if (sigma == 0.0) return Tensor(batch.shape(), batch.data());
  const std::size_t n = batch.shape()[0];
  const std::size_t stride = batch.size() / n;
  SplitRng ex = rng.fork("ex");
  std::vector<double> out(batch.size());
  const auto& xv = batch.data();
  for (std::size_t i = 0; i < n; ++i) {
    SplitRng er = ex.fork(i);
    const double* self = xv.data() + i * stride;
    double* o = out.data() + i * stride;
    for (std::size_t e = 0; e < stride; ++e) o[e] = self[e] + sigma * er.normal();
  }
  return Tensor(batch.shape(), std::move(out));
}

/// Single-step sign-gradient perturbation using the given (teacher) model:
/// out = x + eps * sign(d CE(y, f(x)) / d x).
inline Tensor adv_gradient(const Tensor& batch, const std::vector<int>& labels, const Network& model,
                           double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("adv_gradient: epsilon must be >= 0");
  if (epsilon == 0.0) return Tensor(batch.shape(), batch.data());
  if (!grad_enabled())
    throw std::invalid_argument("adv_gradient: input gradient unavailable while grad mode is disabled");
  Tensor x(batch.shape(), batch.data(), true);
  Tensor loss = cross_entropy(labels, model.forward(x), 1.0);
  backward(loss);
  const auto& g = x.grad();
  std::vector<double> out(batch.size());
  const auto& xv = batch.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    out[i] = xv[i] + epsilon * s;
  }
  return Tensor(batch.shape(), std::move(out));
}

/// Zeros one contiguous random segment of round(fraction * L) samples per
/// example (all channels).
inline Tensor wave_mask(const Tensor& batch, double fraction, SplitRng rng) {
  detail::require_batch_rank(batch, 3, "wave_mask");
  if (fraction < 0.0 || fraction > 1.0) throw std::invalid_argument("wave_mask: fraction must be in [0, 1]");
  const std::size_t n = batch.shape()[0], c = batch.shape()[1], l = batch.shape()[2];
  const std::size_t len = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(l)));
  std::vector<double> out = batch.data();
  if (len == 0) return Tensor(batch.shape(), std::move(out));
  SplitRng ex = rng.fork("ex");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = static_cast<std::size_t>(ex.fork(i).next_below(l - len + 1));
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* row = out.data() + (i * c + ch) * l;
      for (std::size_t s = start; s < start + len; ++s) row[s] = 0.0;
    }
  }
  return Tensor(batch.shape(), std::move(out));
}

inline Tensor wave_noise(const Tensor& batch, double sigma, SplitRng rng) {
  detail::require_batch_rank(batch, 3, "wave_noise");
  return gaussian_noise(batch, sigma, rng);
}

inline Tensor wave_mixup(const Tensor& batch, SplitRng rng, double beta_a = 1.0, double beta_b = 1.0) {
  detail::require_batch_rank(batch, 3, "wave_mixup");
  return mixup(batch, rng, beta_a, beta_b);
}

/// Dispatches a configured generator. `labels` and `model` are needed by
/// adv_gradient only (the perturbation direction comes from the fixed
/// reference model, i.e. the teacher).
inline Tensor apply_augmentor(const Augmentor& aug, const Tensor& batch, SplitRng rng,
                              const std::vector<int>* labels = nullptr, const Network* model = nullptr) {
  aug.validate();
  switch (aug.kind) {
    case AugKind::identity: return Tensor(batch.shape(), batch.data());
    case AugKind::mixup: return mixup(batch, rng, aug.beta_a, aug.beta_b);
    case AugKind::cutmix: return cutmix(batch, rng, aug.beta_a, aug.beta_b);
    case AugKind::cutmix_mixup: return cutmix_mixup(batch, rng, aug.beta_a, aug.beta_b);
    case AugKind::jigsaw: return jigsaw(batch, aug.k, rng);
    case AugKind::gaussian_noise: return gaussian_noise(batch, aug.sigma, rng);
    case AugKind::adv_gradient:
      if (!labels || !model)
        throw std::invalid_argument("adv_gradient: needs labels and a reference model");
      return adv_gradient(batch, *labels, *model, aug.epsilon);
    case AugKind::wave_mixup: return wave_mixup(batch, rng, aug.beta_a, aug.beta_b);
    case AugKind::wave_noise: return wave_noise(batch, aug.sigma, rng);
    case AugKind::wave_mask: return wave_mask(batch, aug.mask_fraction, rng);
  }
  throw std::logic_error("unknown augmentor kind");
}

}  // namespace okd
