#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cast {

/// 8-bit RGB image, row-major interleaved.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), data(h * w * 3, fill) {}

  std::uint8_t* pixel(std::size_t y, std::size_t x) { return data.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t y, std::size_t x) const { return data.data() + (y * width + x) * 3; }
  std::size_t pixel_count() const { return height * width; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Per-pixel (or per-cell) segment or class indices.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> labels;
  std::size_t n_segments = 0;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint32_t fill = 0, std::size_t n = 1)
      : height(h), width(w), labels(h * w, fill), n_segments(n) {}

  std::uint32_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

Image load_image(const std::filesystem::path& path);
void save_image(const Image& image, const std::filesystem::path& path);

/// 16-bit big-endian binary PGM (P5, maxval 65535).
void save_label_map(const LabelMap& map, const std::filesystem::path& path);
/// n_segments is recovered as max label + 1.
LabelMap load_label_map(const std::filesystem::path& path);

/// Relabels to [0, n) in order of first appearance of the original ids
/// sorted ascending; returns the old->new mapping (unused ids map to -1).
std::vector<std::int64_t> compact_labels(LabelMap& map);
/// Nearest-cell upsampling of a coarse map by an integer factor.
LabelMap upsample_nearest(const LabelMap& cells, std::size_t stride);
/// out[p] = mapping[map[p]].
LabelMap remap(const LabelMap& map, std::span<const std::uint32_t> mapping, std::size_t n_out);

/// For a fine map nested in a coarse one, parent[f] = coarse label of fine segment f.
/// Throws NonNestedLevels when some fine segment straddles two coarse segments.
std::vector<std::uint32_t> parent_table(const LabelMap& fine, const LabelMap& coarse);

struct OverlayOptions {
  /// Weight of the segment colour against the grey image; 1 paints flat colour.
  double alpha = 1.0;
  bool contours = true;
};

/// Coarse-to-fine colouring: the coarsest level spreads hues evenly from 0
/// degrees, the first refinement alternates saturation {1.0, 0.55} among the
/// children of a parent and the second alternates value {1.0, 0.7}. Contours
/// of the finest level are white. `levels` run coarse to fine.
Image render_hierarchy_overlay(const Image& image, std::span<const LabelMap> levels, const OverlayOptions& opts = {});

struct Rgb {
  std::uint8_t r, g, b;
};
Rgb hsv_to_rgb(double hue_deg, double sat, double val);
void rgb_to_hsv(Rgb c, double& hue_deg, double& sat, double& val);

}  // namespace cast
