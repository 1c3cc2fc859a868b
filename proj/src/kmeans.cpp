#include "cast/kmeans.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cast/error.hpp"

namespace cast {

double squared_distance(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

KMeansResult kmeans_once(const Tensor& points, std::size_t k, Rng& rng, const KMeansOptions& opts) {
  const std::size_t n = points.rows(), d = points.cols();
  require(k >= 1 && k <= n, ErrorCode::KOutOfRange, "k-means needs 1 <= k <= n");

  KMeansResult r;
  r.centroids = Tensor::matrix(k, d);
  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.below(n);
  std::copy_n(points.data() + first * d, d, r.centroids.data());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points.data() + i * d, r.centroids.data() + (c - 1) * d, d));
      total += d2[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        u -= d2[i];
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    std::copy_n(points.data() + pick * d, d, r.centroids.data() + c * d);
  }

  r.assignment.assign(n, 0);
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    r.iterations = it + 1;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = squared_distance(points.data() + i * d, r.centroids.data() + c * d, d);
        if (dist < best) {
          best = dist;
          r.assignment[i] = c;
        }
      }
      inertia += best;
    }
    std::vector<double> count(k, 0.0);
    Tensor sums = Tensor::matrix(k, d);
    for (std::size_t i = 0; i < n; ++i) {
      count[r.assignment[i]] += 1.0;
      for (std::size_t j = 0; j < d; ++j) sums(r.assignment[i], j) += points(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      require(count[c] > 0.0, ErrorCode::EmptyCluster, "cluster " + std::to_string(c) + " lost all points");
      for (std::size_t j = 0; j < d; ++j) r.centroids(c, j) = sums(c, j) / count[c];
    }
    r.inertia = inertia;
    const double rel = std::isinf(prev) ? 1.0 : std::abs(prev - inertia) / std::max(prev, 1e-300);
    if (rel < opts.tolerance || inertia == 0.0) break;
    prev = inertia;
  }
  // Final assignment against the final centroids.
  r.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      const double dist = squared_distance(points.data() + i * d, r.centroids.data() + c * d, d);
      if (dist < best) {
        best = dist;
        r.assignment[i] = c;
      }
    }
    r.inertia += best;
  }
  std::vector<bool> used(k, false);
  for (auto a : r.assignment) used[a] = true;
  for (std::size_t c = 0; c < k; ++c)
    require(used[c], ErrorCode::EmptyCluster, "cluster " + std::to_string(c) + " is empty after convergence");
  return r;
}

KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts) {
  for (std::size_t attempt = 0;; ++attempt) {
    Rng rng = Rng::stream(seed + attempt, "kmeans");
    try {
      return kmeans_once(points, k, rng, opts);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyCluster || attempt >= opts.max_restarts) throw;
    }
  }
}

}  // namespace cast
