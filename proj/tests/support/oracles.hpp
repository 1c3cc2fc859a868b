#pragma once

// Independent reference implementations used only by the tests. None of
// these call into the library's kernels.

#include <cstdint>
#include <vector>

#include "cast/autodiff.hpp"
#include "cast/pixelio.hpp"
#include "cast/rng.hpp"

namespace oracle {

using cast::Tensor;

Tensor random_matrix(std::size_t r, std::size_t c, cast::Rng& rng, double scale = 1.0);
Tensor naive_matmul(const Tensor& a, const Tensor& b);
Tensor naive_softmax_rows(const Tensor& a);
double naive_gelu(double x);

/// Multi-head attention from raw parameters with explicit per-head loops.
Tensor naive_msa(const Tensor& x, const Tensor& wqkv, const Tensor& bqkv, const Tensor& wproj, const Tensor& bproj,
                 std::size_t heads);
Tensor naive_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Farthest-point order recomputed from scratch at every step.
std::vector<std::size_t> brute_force_fps(const Tensor& points, std::size_t k, std::size_t start);

/// Argmax per row with ties to the smallest column, by linear scan.
std::vector<std::size_t> scan_argmax(const Tensor& m);

/// Mean of rows grouped by label through explicit scatter-sum then divide.
Tensor scatter_mean(const Tensor& rows, const std::vector<std::size_t>& labels, std::size_t n);

/// Minimum distance of every set pixel of `from` to any set pixel of `to`, brute force.
std::vector<double> brute_force_min_distance(const std::vector<bool>& from, const std::vector<bool>& to,
                                             std::size_t h, std::size_t w);

}  // namespace oracle
