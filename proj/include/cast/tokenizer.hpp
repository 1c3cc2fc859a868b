#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cast/autodiff.hpp"
#include "cast/pixelio.hpp"
#include "cast/rng.hpp"

namespace cast {

/// Pixel-level features on a grid coarser than the image by `stride`.
struct FeatureGrid {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = 0;
  std::size_t stride = 1;
  Var features;  // [(grid_h * grid_w) x channels], row-major cells
};

/// Segment tokens of one hierarchy level; row 0 is the class token.
struct TokenSet {
  Var tokens;
  std::size_t level = 0;
  std::size_t partition_ref = 0;

  std::size_t segment_count() const { return tokens.rows() - 1; }
};

struct StemConfig {
  std::size_t hidden1 = 8;
  std::size_t hidden2 = 16;
  std::size_t out_channels = 32;
};
inline constexpr std::size_t kStemStride = 4;

/// Two 3x3 stride-2 convolutions with GELU between, then a 1x1 projection.
void init_conv_stem(ParamStore& store, const std::string& prefix, const StemConfig& cfg, Rng& rng);
FeatureGrid conv_stem(Tape& tape, const Image& image, const ParamStore& store, const std::string& prefix = "stem");

/// Image as [(h*w) x 3] with channels scaled to [0, 1].
Tensor image_tensor(const Image& image);

struct DownsampledPartition {
  LabelMap cells;   // majority label of each stride x stride block
  LabelMap pixels;  // pixel map relabelled consistently with `cells`
  /// old id -> new id, -1 for segments eliminated by downsampling.
  std::vector<std::int64_t> old_to_new;
};

/// Majority vote per cell (ties to the smallest label). Segments that lose
/// every cell are eliminated: their pixels take the label of their cell and
/// the surviving ids are compacted in order.
DownsampledPartition downsample_partition(const LabelMap& map, std::size_t stride);

/// Fixed 2-D sinusoidal encodings [(h*w) x d]; even channels encode the row,
/// odd channels the column.
Tensor sinusoidal_encoding_2d(std::size_t h, std::size_t w, std::size_t d);

void init_class_token(ParamStore& store, const std::string& name, std::size_t d, Rng& rng);

/// Z0 = [class; mean(features) + mean(encodings)] per segment of `cell_map`.
TokenSet aggregate_tokens(Tape& tape, const FeatureGrid& grid, const LabelMap& cell_map, const ParamStore& store,
                          const std::string& class_token = "cls_token");

}  // namespace cast
