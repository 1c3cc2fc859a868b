#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cast/autodiff.hpp"
#include "cast/pixelio.hpp"
#include "cast/rng.hpp"
#include "cast/tokenizer.hpp"

namespace cast {

/// Row-stochastic fine-to-coarse assignment P (rows: fine segments, cols: coarse).
struct AssignmentMatrix {
  Tensor data;

  std::size_t rows() const { return data.rows(); }
  std::size_t cols() const { return data.cols(); }
};

/// Row-stochastic unit-to-segment membership S. Units are pixels, cells or
/// level-0 segments; `height`/`width` describe the unit grid when spatial.
struct SoftSegmentation {
  Tensor data;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t units() const { return data.rows(); }
  std::size_t cols() const { return data.cols(); }
};

/// Binary membership matrix of a label map; units follow the map's raster order.
SoftSegmentation binary_segmentation(const LabelMap& map);

/// Greedy farthest-point order in Euclidean distance. First index is `start`,
/// each next index maximises the minimum distance to the chosen set, ties to
/// the smallest index.
std::vector<std::size_t> fps(const Tensor& points, std::size_t k, std::size_t start = 0);

enum class CentroidSelector { Fps, Random, KMeans, KMedoids, Significance };

/// Centroid selection behind one interface (FPS is the default; the others
/// exist for ablations). Always returns k distinct row indices.
std::vector<std::size_t> select_centroids(const Tensor& points, std::size_t k, CentroidSelector selector,
                                          std::uint64_t seed = 0);

struct GraphPoolOptions {
  std::size_t heads = 4;
  CentroidSelector selector = CentroidSelector::Fps;
  std::uint64_t seed = 0;
  /// Replaces the learnt similarity scale.
  std::optional<double> kappa_override;
};

/// Parameters under `prefix`: attn (MSA), bias (normalisation), mlp, kappa.
void init_graph_pool(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t mlp_hidden, Rng& rng,
                     double kappa = 10.0, double attn_out_gain = 1.0);

struct GraphPoolResult {
  TokenSet coarse;
  Var assignment;  // P, [n x m], differentiable
  std::vector<std::size_t> centroids;

  AssignmentMatrix assignment_matrix() const { return {assignment.value()}; }
};

/// Coarsens the segment rows of `z` into m tokens; the class token passes
/// through untouched. Centroid indices are constants of the forward pass.
GraphPoolResult graph_pool(Tape& tape, const TokenSet& z, std::size_t m, const ParamStore& store,
                           const std::string& prefix, const GraphPoolOptions& opts = {});

/// S_l = S_{l-1} * P_l
SoftSegmentation compose(const SoftSegmentation& prev, const AssignmentMatrix& p);

struct Hardened {
  LabelMap labels;
  /// Original column -> compact id, -1 for columns that win no unit.
  std::vector<std::int64_t> old_to_new;
};

/// Winner-take-all per unit (ties to the smallest column), compacted.
Hardened harden(const SoftSegmentation& s);

/// Row index of the maximum of each row, ties to the smallest column.
std::vector<std::size_t> argmax_rows(const Tensor& m);

/// out[a] = coarse[argmax_c P[a, c]]; `coarse` holds segment rows only.
Tensor unpool(const Tensor& coarse, const AssignmentMatrix& p);
Var unpool(Var coarse, const AssignmentMatrix& p);

struct NestednessReport {
  std::size_t units = 0;
  std::size_t consistent = 0;
  std::size_t degenerate = 0;  // fine-level margin <= threshold, excluded
  double fraction() const {
    const std::size_t checked = units - degenerate;
    return checked == 0 ? 1.0 : static_cast<double>(consistent) / static_cast<double>(checked);
  }
};

/// For every unit u: argmax S_fine*P[u] == argmax_c P[argmax S_fine[u], c]
/// whenever the top-two margin of S_fine[u] exceeds `margin`.
NestednessReport check_nestedness(const SoftSegmentation& fine, const AssignmentMatrix& p, double margin = 1e-6);

}  // namespace cast
