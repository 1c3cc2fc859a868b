#pragma once

#include <cstdint>
#include <vector>

#include "cast/pixelio.hpp"

namespace cast {

inline constexpr std::size_t kSynthClasses = 3;
/// Part classes over all shapes, background included (see part_class_ids).
inline constexpr std::size_t kSynthPartClasses = 8;

/// One synthetic image. Ground truth comes at three granularities:
///   parts:  0 background, otherwise a global part class (kSynthPartClasses)
///   object: 0 background, 1 + class_label on the object
///   figure: 0 background, 1 object
struct SynthSample {
  Image image;
  std::size_t class_label = 0;
  LabelMap parts;
  LabelMap object;
  LabelMap figure;
};

/// Shapes: 0 disk with three limbs, 1 T-shape, 2 ring cut into three arcs.
/// Every part class has its own hue band; the background is a near-grey texture.
/// Classes are balanced (i mod 3, then shuffled); the pixels of sample i
/// depend only on (seed, i, class).
std::vector<SynthSample> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t size = 64);
SynthSample synth_sample(std::uint64_t seed, std::size_t index, std::size_t class_label, std::size_t size = 64);

/// Global part classes for a shape class, in drawing priority order.
std::vector<std::uint32_t> part_class_ids(std::size_t class_label);

}  // namespace cast
