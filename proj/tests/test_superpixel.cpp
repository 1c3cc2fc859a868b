#include <gtest/gtest.h>

#include <cmath>

#include "cast/dataset.hpp"
#include "cast/error.hpp"
#include "cast/eval.hpp"
#include "cast/superpixel.hpp"
#include "support/synthetic.hpp"

using namespace cast;

namespace {

SuperpixelConfig config(SuperpixelAlgorithm alg, std::size_t target) {
  SuperpixelConfig cfg;
  cfg.algorithm = alg;
  cfg.target_count = target;
  return cfg;
}

// Fraction of rows where a label transition lies within 1 px of the colour
// edge between columns w/2-1 and w/2.
double edge_agreement(const LabelMap& m) {
  const std::size_t edge = m.width / 2;
  std::size_t good = 0;
  for (std::size_t y = 0; y < m.height; ++y) {
    bool hit = false;
    for (std::size_t x = edge - 2; x <= edge; ++x) hit = hit || m.at(y, x) != m.at(y, x + 1);
    good += hit;
  }
  return static_cast<double>(good) / m.height;
}

class BothAlgorithms : public ::testing::TestWithParam<SuperpixelAlgorithm> {};

}  // namespace

TEST_P(BothAlgorithms, UniformImageGivesGridBlocks) {
  Image img = fixture::uniform_image(32, 32, 120, 80, 40);
  LabelMap m = compute_superpixels(img, config(GetParam(), 4));
  ASSERT_EQ(m.n_segments, 4u);
  EXPECT_TRUE(validate_partition(m).ok());
  // four 16x16 blocks, whichever ids they got
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      EXPECT_EQ(m.at(y, x), m.at((y / 16) * 16, (x / 16) * 16)) << y << "," << x;
  EXPECT_NE(m.at(0, 0), m.at(0, 16));
  EXPECT_NE(m.at(0, 0), m.at(16, 0));
  EXPECT_NE(m.at(16, 16), m.at(0, 16));
}

TEST_P(BothAlgorithms, HalvesSnapToColourEdge) {
  Image img = fixture::halves_image(64, 64);
  LabelMap m = compute_superpixels(img, config(GetParam(), 2));
  EXPECT_TRUE(validate_partition(m).ok());
  EXPECT_GE(edge_agreement(m), 0.95);
}

TEST_P(BothAlgorithms, SyntheticShapesPartition) {
  const auto data = synth_dataset(3, 12);
  for (const auto& s : data) {
    LabelMap m = compute_superpixels(s.image, config(GetParam(), 49));
    const PartitionReport r = validate_partition(m);
    EXPECT_TRUE(r.ok());
    EXPECT_GE(m.n_segments, 37u);
    EXPECT_LE(m.n_segments, 61u);
    for (std::size_t c : component_counts(m)) EXPECT_EQ(c, 1u);
  }
}

TEST_P(BothAlgorithms, Deterministic) {
  const auto s = synth_sample(9, 0, 2);
  EXPECT_EQ(compute_superpixels(s.image, config(GetParam(), 49)), compute_superpixels(s.image, config(GetParam(), 49)));
}

TEST_P(BothAlgorithms, TooSmall) {
  Image tiny = fixture::uniform_image(4, 16, 0, 0, 0);
  EXPECT_THROW(compute_superpixels(tiny, config(GetParam(), 2)), Error);
  Image small = fixture::uniform_image(8, 8, 0, 0, 0);
  try {
    compute_superpixels(small, config(GetParam(), 17));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ImageTooSmall);
  }
}

INSTANTIATE_TEST_SUITE_P(Superpixels, BothAlgorithms,
                         ::testing::Values(SuperpixelAlgorithm::Seeds, SuperpixelAlgorithm::Slic));

TEST(Seeds, BoundaryRecallOnShapes) {
  const auto data = synth_dataset(11, 10);
  double total = 0.0;
  for (const auto& s : data) {
    LabelMap m = seeds_superpixels(s.image, config(SuperpixelAlgorithm::Seeds, 49));
    total += boundary_fscore(m, s.parts, 2.0).extra.at("recall");
  }
  EXPECT_GE(total / data.size(), 0.9);
}

TEST(Slic, InfiniteCompactnessKeepsGrid) {
  // Seeds start on the grid and may shift by a pixel towards low gradient,
  // so each segment stays within two pixels of its grid block.
  const auto s = synth_sample(4, 1, 0);
  SuperpixelConfig cfg = config(SuperpixelAlgorithm::Slic, 16);
  cfg.slic_compactness = 1e9;
  LabelMap m = slic_superpixels(s.image, cfg);
  ASSERT_EQ(m.n_segments, 16u);
  LabelMap grid = fixture::block_map(64, 64, 16);
  std::size_t off_grid = 0;
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      bool near = false;
      for (std::size_t yy = y > 1 ? y - 2 : 0; yy <= std::min<std::size_t>(63, y + 2); ++yy)
        for (std::size_t xx = x > 1 ? x - 2 : 0; xx <= std::min<std::size_t>(63, x + 2); ++xx)
          near = near || grid.at(yy, xx) == m.at(y, x);
      off_grid += !near;
    }
  EXPECT_EQ(off_grid, 0u);
}

TEST(Config, Validation) {
  SuperpixelConfig cfg;
  EXPECT_NO_THROW(validate(cfg));
  cfg.target_count = 1;
  EXPECT_THROW(validate(cfg), Error);
  cfg = {};
  cfg.seeds_histogram_bins = 17;
  EXPECT_THROW(validate(cfg), Error);
  cfg = {};
  cfg.iterations = 0;
  EXPECT_THROW(validate(cfg), Error);
}

TEST(ValidatePartition, SplitSegmentReported) {
  LabelMap m(8, 8, 0, 2);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) m.at(y, x) = (x >= 3 && x < 5) ? 1 : 0;
  PartitionReport r = validate_partition(m);
  EXPECT_FALSE(r.connected);
  EXPECT_EQ(r.disconnected_segments, std::vector<std::uint32_t>{0});
  EXPECT_TRUE(r.compact);
}

TEST(ValidatePartition, MissingLabelReported) {
  LabelMap m(4, 5, 0, 5);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) m.at(y, x) = x == 3 ? 4 : static_cast<std::uint32_t>(x);
  PartitionReport r = validate_partition(m);
  EXPECT_FALSE(r.compact);
  EXPECT_EQ(r.missing_labels, std::vector<std::uint32_t>{3});
  EXPECT_TRUE(r.connected);
}

TEST(ValidatePartition, OutOfRangeLabelIsCoverageFailure) {
  LabelMap m(2, 2, 0, 1);
  m.labels[3] = 5;
  EXPECT_FALSE(validate_partition(m).covered);
}
