#pragma once

#include <cstdint>
#include <vector>

#include "cast/rng.hpp"
#include "cast/tensor.hpp"

namespace cast {

struct KMeansOptions {
  std::size_t max_iterations = 100;
  /// Stop when the relative change of inertia falls below this.
  double tolerance = 1e-6;
  std::size_t max_restarts = 5;
};

struct KMeansResult {
  Tensor centroids;                    // [k x d]
  std::vector<std::size_t> assignment;  // per point
  double inertia = 0.0;
  std::size_t iterations = 0;
};

/// Lloyd iterations from a k-means++ initialisation drawn from `rng`. Throws
/// EmptyCluster if a cluster loses all its points.
KMeansResult kmeans_once(const Tensor& points, std::size_t k, Rng& rng, const KMeansOptions& opts = {});

/// kmeans_once with the restart policy: each restart draws a fresh stream
/// from (seed, attempt); after max_restarts failures EmptyCluster propagates.
KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opts = {});

double squared_distance(const double* a, const double* b, std::size_t d);

}  // namespace cast
