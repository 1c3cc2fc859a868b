#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <set>

#include "cast/dataset.hpp"
#include "cast/error.hpp"
#include "cast/pixelio.hpp"
#include "support/synthetic.hpp"

using namespace cast;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::InvalidParameter;
}

}  // namespace

TEST(LoadImage, TwoByTwoRed) {
  const auto dir = fixture::scratch_dir("pixelio_small");
  std::string bytes = "P6\n2 2\n255\n";
  for (int i = 0; i < 4; ++i) bytes += std::string("\xff\x00\x00", 3);
  write_bytes(dir / "red.ppm", bytes);
  Image img = load_image(dir / "red.ppm");
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.width, 2u);
  const std::vector<std::uint8_t> expect{255, 0, 0, 255, 0, 0, 255, 0, 0, 255, 0, 0};
  EXPECT_EQ(img.data, expect);
}

TEST(LoadImage, HeaderCommentsAccepted) {
  const auto dir = fixture::scratch_dir("pixelio_comment");
  write_bytes(dir / "c.ppm", std::string("P6\n# made by hand\n1 1\n255\n") + std::string("\x01\x02\x03", 3));
  EXPECT_EQ(load_image(dir / "c.ppm").data, (std::vector<std::uint8_t>{1, 2, 3}));
}

TEST(LoadImage, Errors) {
  const auto dir = fixture::scratch_dir("pixelio_errors");
  write_bytes(dir / "p5.ppm", std::string("P5\n2 2\n255\n") + std::string(4, '\0'));
  write_bytes(dir / "deep.ppm", std::string("P6\n1 1\n65535\n") + std::string(6, '\0'));
  write_bytes(dir / "short.ppm", std::string("P6\n2 2\n255\n") + std::string(5, '\0'));
  EXPECT_EQ(code_of([&] { load_image(dir / "p5.ppm"); }), ErrorCode::MalformedHeader);
  EXPECT_EQ(code_of([&] { load_image(dir / "deep.ppm"); }), ErrorCode::MalformedHeader);
  EXPECT_EQ(code_of([&] { load_image(dir / "short.ppm"); }), ErrorCode::TruncatedPayload);
  EXPECT_EQ(code_of([&] { load_image(dir / "nope.ppm"); }), ErrorCode::MissingFile);
}

TEST(SaveImage, RoundTripIsByteIdentical) {
  const auto dir = fixture::scratch_dir("pixelio_roundtrip");
  const auto data = synth_dataset(5, 20);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto a = dir / ("a" + std::to_string(i) + ".ppm");
    const auto b = dir / ("b" + std::to_string(i) + ".ppm");
    save_image(data[i].image, a);
    Image back = load_image(a);
    EXPECT_EQ(back, data[i].image);
    save_image(back, b);
    EXPECT_EQ(read_bytes(a), read_bytes(b));
  }
}

TEST(LabelMapIo, ZeroMapHasZeroPayload) {
  const auto dir = fixture::scratch_dir("pixelio_zero");
  save_label_map(LabelMap(8, 9, 0, 1), dir / "z.pgm");
  const std::string bytes = read_bytes(dir / "z.pgm");
  const std::string header = "P5\n9 8\n65535\n";
  ASSERT_EQ(bytes.size(), header.size() + 8 * 9 * 2);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) EXPECT_EQ(bytes[i], '\0');
}

TEST(LabelMapIo, BigEndianSamples) {
  const auto dir = fixture::scratch_dir("pixelio_endian");
  LabelMap m(1, 2, 0, 0x0203);
  m.labels = {0x0102, 0x0202};
  m.n_segments = 0x0203;
  save_label_map(m, dir / "e.pgm");
  const std::string bytes = read_bytes(dir / "e.pgm");
  EXPECT_EQ(bytes.substr(bytes.size() - 4), std::string("\x01\x02\x02\x02", 4));
}

TEST(LabelMapIo, RandomRoundTrip) {
  const auto dir = fixture::scratch_dir("pixelio_labels");
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 1 + rng.below(300);
    LabelMap m = fixture::voronoi_map(16 + rng.below(40), 16 + rng.below(40), std::min<std::size_t>(n, 200), rng);
    save_label_map(m, dir / "m.pgm");
    EXPECT_EQ(load_label_map(dir / "m.pgm"), m);
  }
}

TEST(LabelMapIo, TooManySegments) {
  const auto dir = fixture::scratch_dir("pixelio_many");
  LabelMap m(8, 8, 0, 70000);
  EXPECT_EQ(code_of([&] { save_label_map(m, dir / "m.pgm"); }), ErrorCode::TooManySegments);
}

TEST(LabelMapHelpers, CompactUpsampleParents) {
  LabelMap m(2, 2, 0, 8);
  m.labels = {7, 3, 3, 5};
  auto old_to_new = compact_labels(m);
  EXPECT_EQ(m.labels, (std::vector<std::uint32_t>{2, 0, 0, 1}));
  EXPECT_EQ(m.n_segments, 3u);
  EXPECT_EQ(old_to_new[3], 0);
  EXPECT_EQ(old_to_new[4], -1);
  LabelMap up = upsample_nearest(m, 2);
  EXPECT_EQ(up.height, 4u);
  EXPECT_EQ(up.at(3, 3), 1u);
  EXPECT_EQ(up.at(0, 1), 2u);

  LabelMap fine = fixture::block_map(8, 8, 2);    // 16 blocks
  LabelMap coarse = fixture::block_map(8, 8, 4);  // 4 blocks
  auto parent = parent_table(fine, coarse);
  ASSERT_EQ(parent.size(), 16u);
  EXPECT_EQ(parent[0], 0u);
  EXPECT_EQ(parent[3], 1u);
  EXPECT_EQ(parent[15], 3u);
  LabelMap shifted = coarse;
  shifted.at(0, 1) = 1;
  EXPECT_EQ(code_of([&] { parent_table(fine, shifted); }), ErrorCode::NonNestedLevels);
}

TEST(HsvColour, RoundTrip) {
  for (double h : {0.0, 45.0, 120.0, 200.0, 330.0})
    for (double s : {1.0, 0.55})
      for (double v : {1.0, 0.7}) {
        Rgb c = hsv_to_rgb(h, s, v);
        double h2, s2, v2;
        rgb_to_hsv(c, h2, s2, v2);
        EXPECT_NEAR(std::fmod(h2 - h + 540.0, 360.0) - 180.0, 0.0, 1.0);
        EXPECT_NEAR(s2, s, 0.01);
        EXPECT_NEAR(v2, v, 0.01);
      }
  Rgb red = hsv_to_rgb(0.0, 1.0, 1.0);
  EXPECT_EQ(red.r, 255);
  EXPECT_EQ(red.g, 0);
  EXPECT_EQ(red.b, 0);
}

namespace {

struct ColourCells {
  std::set<long> hues, sats, vals;
  std::set<std::tuple<int, int, int>> colours;
};

ColourCells count_cells(const Image& img) {
  ColourCells c;
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const std::uint8_t* p = img.data.data() + 3 * i;
    double h, s, v;
    rgb_to_hsv({p[0], p[1], p[2]}, h, s, v);
    c.hues.insert(std::lround(h / 5.0) % 72);
    c.sats.insert(std::lround(s * 20.0));
    c.vals.insert(std::lround(v * 20.0));
    c.colours.insert({p[0], p[1], p[2]});
  }
  return c;
}

}  // namespace

TEST(Overlay, SingleSegmentIsUniform) {
  Image img = synth_dataset(1, 1)[0].image;
  LabelMap one(64, 64, 0, 1);
  std::vector<LabelMap> levels{one};
  Image out = render_hierarchy_overlay(img, levels);
  EXPECT_EQ(out.height, 64u);
  EXPECT_EQ(out.width, 64u);
  ColourCells c = count_cells(out);
  EXPECT_EQ(c.colours.size(), 1u);
}

TEST(Overlay, TwoByTwoSplit) {
  Image img = fixture::uniform_image(16, 16, 90, 90, 90);
  LabelMap coarse(16, 16, 0, 2), fine(16, 16, 0, 4);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      coarse.at(y, x) = x < 8 ? 0 : 1;
      fine.at(y, x) = (x < 8 ? 0 : 2) + (y < 8 ? 0 : 1);
    }
  std::vector<LabelMap> levels{coarse, fine};
  Image out = render_hierarchy_overlay(img, levels, {.alpha = 1.0, .contours = false});
  ColourCells c = count_cells(out);
  EXPECT_EQ(c.colours.size(), 4u);
  EXPECT_EQ(c.hues.size(), 2u);
  EXPECT_EQ(c.sats.size(), 2u);
  EXPECT_EQ(c.vals.size(), 1u);

  Image with_contours = render_hierarchy_overlay(img, levels);
  std::size_t white = 0;
  for (std::size_t i = 0; i < with_contours.pixel_count(); ++i)
    white += with_contours.data[3 * i] == 255 && with_contours.data[3 * i + 1] == 255 && with_contours.data[3 * i + 2] == 255;
  EXPECT_EQ(white, 16u + 16u - 1u);  // one column and one row of transitions, sharing a pixel
}

TEST(Overlay, EightSixteenThirtyTwo) {
  Image img = fixture::uniform_image(64, 64, 10, 200, 10);
  LabelMap l8(64, 64, 0, 8), l16(64, 64, 0, 16), l32(64, 64, 0, 32);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const std::uint32_t strip = static_cast<std::uint32_t>(x / 8);
      l8.at(y, x) = strip;
      l16.at(y, x) = strip * 2 + (y < 32 ? 0 : 1);
      l32.at(y, x) = l16.at(y, x) * 2 + (x % 8 < 4 ? 0 : 1);
    }
  std::vector<LabelMap> levels{l8, l16, l32};
  Image out = render_hierarchy_overlay(img, levels, {.alpha = 1.0, .contours = false});
  ColourCells c = count_cells(out);
  EXPECT_EQ(c.hues.size(), 8u);
  EXPECT_LE(c.sats.size(), 2u);
  EXPECT_LE(c.vals.size(), 2u);
  EXPECT_EQ(c.colours.size(), 32u);
}

TEST(Overlay, RejectsNonNestedLevels) {
  Image img = fixture::uniform_image(8, 8, 0, 0, 0);
  LabelMap coarse(8, 8, 0, 2), fine(8, 8, 0, 2);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      coarse.at(y, x) = x < 4 ? 0 : 1;
      fine.at(y, x) = y < 4 ? 0 : 1;
    }
  std::vector<LabelMap> levels{coarse, fine};
  EXPECT_EQ(code_of([&] { render_hierarchy_overlay(img, levels); }), ErrorCode::NonNestedLevels);
}
