// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "okd/rng.hpp"
#include "okd/tensor.hpp"

namespace okd {

struct KMeansResult {
  std::vector<int> assignments;      // one entry per point
  std::vector<double> centroids;     // k x d row-major
  std::size_t k = 0;
  double objective = 0.0;            // sum of squared distances to assigned centroid
  std::size_t iterations = 0;
  std::vector<double> objective_trace;
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double acc = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace detail

/// Objective of an assignment with centroids at cluster means; empty
/// clusters contribute nothing. Summation runs in point-index order.
inline double kmeans_objective(const std::vector<double>& points, std::size_t n, std::size_t d,
                               const std::vector<int>& assignments, std::size_t k) {
  std::vector<double> means(k * d, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = assignments[i];
    ++counts[c];
    for (std::size_t j = 0; j < d; ++j) means[c * d + j] += points[i * d + j];
  }
  for (std::size_t c = 0; c < k; ++c)
    if (counts[c] > 0)
      for (std::size_t j = 0; j < d; ++j) means[c * d + j] /= static_cast<double>(counts[c]);
  double obj = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    obj += detail::sq_dist(points.data() + i * d, means.data() + assignments[i] * d, d);
  return obj;
}

namespace detail {

/// Single-point relocation refinement (Hartigan-style) applied after Lloyd
/// converges: move a point to another cluster whenever the exact objective
/// delta is negative, scanning in index order until no move helps. Pure
/// improvement; Lloyd alone plateaus short of the optimum too often for the
/// best-of-20-restarts contract on small instances.
inline bool hartigan_pass(const std::vector<double>& pts, std::size_t n, std::size_t d,
                          std::vector<int>& assignments, std::vector<double>& centroids,
                          std::vector<std::size_t>& counts, std::size_t k) {
  bool any = false;
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int a = assignments[i];
      const std::size_t na = counts[a];
      if (na <= 1) continue;  // never empty a cluster
      const double da = sq_dist(pts.data() + i * d, centroids.data() + a * d, d);
      const double removal = static_cast<double>(na) / static_cast<double>(na - 1) * da;
      double best_delta = -1e-12 * (1.0 + da);
      int best_b = -1;
      for (std::size_t b = 0; b < k; ++b) {
        if (static_cast<int>(b) == a) continue;
        const double db = sq_dist(pts.data() + i * d, centroids.data() + b * d, d);
        const double delta = static_cast<double>(counts[b]) / static_cast<double>(counts[b] + 1) * db - removal;
        if (delta < best_delta) {
          best_delta = delta;
          best_b = static_cast<int>(b);
        }
      }
      if (best_b < 0) continue;
      const std::size_t nb = counts[best_b];
      for (std::size_t j = 0; j < d; ++j) {
        centroids[a * d + j] =
            (centroids[a * d + j] * static_cast<double>(na) - pts[i * d + j]) / static_cast<double>(na - 1);
        centroids[best_b * d + j] =
            (centroids[best_b * d + j] * static_cast<double>(nb) + pts[i * d + j]) /
            static_cast<double>(nb + 1);
      }
      --counts[a];
      ++counts[best_b];
      assignments[i] = best_b;
      improved = true;
      any = true;
    }
  }
  return any;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding, followed by a deterministic
/// single-point relocation refinement. Converges when assignments stabilize
/// or max_iter is reached. An empty cluster is re-seeded at the point
/// farthest from its currently assigned centroid (lowest index on ties).
/// The per-iteration objective is verified to be non-increasing.
inline KMeansResult kmeans(const Tensor& features, std::size_t k, SplitRng rng, std::size_t max_iter = 100) {
  if (features.rank() != 2)
    throw std::invalid_argument("kmeans: expects [N,D] features, got " + shape_str(features.shape()));
  const std::size_t n = features.shape()[0], d = features.shape()[1];
  if (k == 0) throw std::invalid_argument("kmeans: k must be positive");
  if (n < k)
    throw std::runtime_error("kmeans: " + std::to_string(n) + " points cannot form " + std::to_string(k) +
                             " clusters");
  const auto& pts = features.data();

  // k-means++ seeding
  std::vector<double> centroids(k * d);
  std::vector<double> min_sq(n, std::numeric_limits<double>::infinity());
  const std::size_t first = static_cast<std::size_t>(rng.next_below(n));
  std::copy(pts.begin() + first * d, pts.begin() + (first + 1) * d, centroids.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double sq = detail::sq_dist(pts.data() + i * d, centroids.data() + (c - 1) * d, d);
      min_sq[i] = std::min(min_sq[i], sq);
      total += min_sq[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      chosen = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += min_sq[i];
        if (acc > r) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = static_cast<std::size_t>(rng.next_below(n));
    }
    std::copy(pts.begin() + chosen * d, pts.begin() + (chosen + 1) * d, centroids.begin() + c * d);
  }

  std::vector<int> assignments(n, -1);
  std::vector<int> prev(n, -2);
  KMeansResult res;
  res.k = k;
  double prev_obj = std::numeric_limits<double>::infinity();
  std::size_t iter = 0;
  for (; iter < max_iter; ++iter) {
    // assignment step, lowest index wins ties
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_c = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double sq = detail::sq_dist(pts.data() + i * d, centroids.data() + c * d, d);
        if (sq < best) {
          best = sq;
          best_c = static_cast<int>(c);
        }
      }
      assignments[i] = best_c;
    }

    // re-seed empty clusters at the farthest point from its assigned centroid
    std::vector<std::size_t> counts(k, 0);
    for (const int a : assignments) ++counts[a];
    std::vector<bool> stolen(n, false);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      double far = -1.0;
      std::size_t far_i = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (stolen[i] || counts[assignments[i]] <= 1) continue;
        const double sq = detail::sq_dist(pts.data() + i * d, centroids.data() + assignments[i] * d, d);
        if (sq > far) {
          far = sq;
          far_i = i;
        }
      }
      if (far < 0.0) continue;  // nothing left to steal
      stolen[far_i] = true;
      --counts[assignments[far_i]];
      assignments[far_i] = static_cast<int>(c);
      ++counts[c];
      std::copy(pts.begin() + far_i * d, pts.begin() + (far_i + 1) * d, centroids.begin() + c * d);
    }

    const bool converged = assignments == prev;

    // update step: centroids at cluster means
    std::fill(centroids.begin(), centroids.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assignments[i]];
      for (std::size_t j = 0; j < d; ++j) centroids[assignments[i] * d + j] += pts[i * d + j];
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] /= static_cast<double>(counts[c]);

    const double obj = kmeans_objective(pts, n, d, assignments, k);
    if (obj > prev_obj + 1e-9 * (1.0 + prev_obj))
      throw std::logic_error("kmeans: objective increased from " + std::to_string(prev_obj) + " to " +
                             std::to_string(obj));
    res.objective_trace.push_back(obj);
    prev_obj = obj;
    if (converged) {
      if (!detail::hartigan_pass(pts, n, d, assignments, centroids, counts, k)) break;
      // refinement moved points: restore exact means and keep iterating
      std::fill(centroids.begin(), centroids.end(), 0.0);
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t i = 0; i < n; ++i) {
        ++counts[assignments[i]];
        for (std::size_t j = 0; j < d; ++j) centroids[assignments[i] * d + j] += pts[i * d + j];
      }
      for (std::size_t c = 0; c < k; ++c)
        if (counts[c] > 0)
          for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] /= static_cast<double>(counts[c]);
      const double robj = kmeans_objective(pts, n, d, assignments, k);
      if (robj > prev_obj + 1e-9 * (1.0 + prev_obj))
        throw std::logic_error("kmeans: refinement increased the objective");
      res.objective_trace.push_back(robj);
      prev_obj = robj;
    }
    prev = assignments;
  }

  res.assignments = std::move(assignments);
  res.centroids = std::move(centroids);
  res.objective = prev_obj;
  res.iterations = std::min(iter + 1, max_iter);
  return res;
}

/// Best of `restarts` seeded runs by final objective (earliest run wins ties).
inline KMeansResult kmeans_best(const Tensor& features, std::size_t k, SplitRng rng,
                                std::size_t restarts = 20, std::size_t max_iter = 100) {
  if (restarts == 0) throw std::invalid_argument("kmeans_best: restarts must be positive");
  KMeansResult best;
  bool have = false;
  for (std::size_t r = 0; r < restarts; ++r) {
    KMeansResult cur = kmeans(features, k, rng.fork(r), max_iter);
    if (!have || cur.objective < best.objective) {
      best = std::move(cur);
      have = true;
    }
  }
  return best;
}

}  // namespace okd
