#pragma once

#include <cstdint>
#include <vector>

#include "cast/pixelio.hpp"

namespace cast {

enum class SuperpixelAlgorithm { Seeds, Slic };

struct SuperpixelConfig {
  std::size_t target_count = 49;
  SuperpixelAlgorithm algorithm = SuperpixelAlgorithm::Seeds;
  /// Hill-climbing passes per block level (SEEDS) or k-means rounds (SLIC).
  std::size_t iterations = 4;
  std::size_t seeds_histogram_bins = 5;
  double slic_compactness = 10.0;
};

/// Checks the config invariants (target >= 2, iterations >= 1, bins in [2,16]).
void validate(const SuperpixelConfig& cfg);

/// SEEDS: grid initialisation refined by block-level then pixel-level moves
/// that raise the histogram intersection between a unit and its segment.
/// Every move keeps both segments 4-connected.
LabelMap seeds_superpixels(const Image& image, const SuperpixelConfig& cfg);

/// SLIC: k-means in (CIELAB, x, y) with compactness weighting, followed by
/// absorption of orphan components into the largest adjacent segment.
LabelMap slic_superpixels(const Image& image, const SuperpixelConfig& cfg);

/// Dispatches on cfg.algorithm.
LabelMap compute_superpixels(const Image& image, const SuperpixelConfig& cfg);

struct PartitionReport {
  bool covered = true;    // one in-range label per pixel
  bool compact = true;    // labels are exactly [0, n_segments)
  bool connected = true;  // each segment is 4-connected
  std::vector<std::uint32_t> missing_labels;
  std::vector<std::uint32_t> disconnected_segments;

  bool ok() const { return covered && compact && connected; }
};

PartitionReport validate_partition(const LabelMap& map);

/// Number of 4-connected components of every label.
std::vector<std::size_t> component_counts(const LabelMap& map);

/// Superpixel grid shape (rows, cols) used to initialise both algorithms.
std::pair<std::size_t, std::size_t> superpixel_grid(std::size_t height, std::size_t width, std::size_t target);

}  // namespace cast
