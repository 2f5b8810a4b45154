// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace okd {

/// Splittable counter-based RNG. Every consumer derives its own substream
/// from a root seed via fixed string labels or integer indices, so results
/// are bit-reproducible across platforms and independent of call order
/// between substreams. Draw routines avoid std:: distributions on purpose:
/// their output is not portable across standard library implementations.
class SplitRng {
public:
  explicit SplitRng(std::uint64_t seed) : state_(mix(seed ^ 0x6f6b642d666f7267ull)) {}

  /// Derive an independent substream keyed by a fixed label.
  SplitRng fork(std::string_view label) const {
    return SplitRng(from_state{}, mix(state_ ^ fnv1a(label)));
  }

  /// Derive an independent substream keyed by an index (epoch, step, example).
  SplitRng fork(std::uint64_t index) const {
    return SplitRng(from_state{}, mix(state_ ^ (0x9e3779b97f4a7c15ull * (index + 1))));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1]; safe as a log argument.
  double uniform_pos() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("SplitRng::next_below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  /// Standard normal via Box-Muller (no caching, so the stream position is
  /// a pure function of the number of calls).
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * pi() * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Gamma(k, 1) via Marsaglia-Tsang, boosted for k < 1.
  double gamma(double k) {
    if (k <= 0.0) throw std::invalid_argument("SplitRng::gamma: shape must be positive");
    if (k < 1.0) {
      const double u = uniform_pos();
      return gamma(k + 1.0) * std::pow(u, 1.0 / k);
    }
    const double d = k - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform_pos();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    if (a <= 0.0 || b <= 0.0) throw std::invalid_argument("SplitRng::beta: parameters must be positive");
    if (a == 1.0 && b == 1.0) return uniform();
    const double ga = gamma(a);
    const double gb = gamma(b);
    return ga / (ga + gb);
  }

  /// Uniformly random permutation of {0, ..., n-1} (Fisher-Yates).
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

private:
  struct from_state {};
  SplitRng(from_state, std::uint64_t state) : state_(state) {}

  static constexpr double pi() { return 3.14159265358979323846; }

  // SplitMix64 finalizer.
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const char ch : s) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ull;
    }
    return h;
  }

  std::uint64_t state_;
};

}  // namespace okd
