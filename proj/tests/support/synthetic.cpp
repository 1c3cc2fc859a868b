#include "synthetic.hpp"

#include <limits>
#include <vector>

namespace fixture {

cast::Image uniform_image(std::size_t h, std::size_t w, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  cast::Image img(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    img.data[3 * i] = r;
    img.data[3 * i + 1] = g;
    img.data[3 * i + 2] = b;
  }
  return img;
}

cast::Image halves_image(std::size_t h, std::size_t w) {
  cast::Image img(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::uint8_t* p = img.pixel(y, x);
      if (x < w / 2) {
        p[0] = 220, p[1] = 30, p[2] = 30;
      } else {
        p[0] = 30, p[1] = 40, p[2] = 210;
      }
    }
  return img;
}

cast::LabelMap voronoi_map(std::size_t h, std::size_t w, std::size_t n, cast::Rng& rng) {
  std::vector<std::size_t> seeds;
  while (seeds.size() < n) {
    const std::size_t s = rng.below(h * w);
    bool dup = false;
    for (std::size_t t : seeds) dup = dup || t == s;
    if (!dup) seeds.push_back(s);
  }
  cast::LabelMap m(h, w, 0, n);
  for (std::size_t i = 0; i < h * w; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      const double dy = double(i / w) - double(seeds[k] / w), dx = double(i % w) - double(seeds[k] % w);
      const double d = dy * dy + dx * dx;
      if (d < best) {
        best = d;
        m.labels[i] = static_cast<std::uint32_t>(k);
      }
    }
  }
  return m;
}

cast::LabelMap block_map(std::size_t h, std::size_t w, std::size_t block) {
  const std::size_t bw = (w + block - 1) / block, bh = (h + block - 1) / block;
  cast::LabelMap m(h, w, 0, bw * bh);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) m.at(y, x) = static_cast<std::uint32_t>((y / block) * bw + x / block);
  return m;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cast_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixture
