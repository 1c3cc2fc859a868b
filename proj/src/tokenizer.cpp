#include "cast/tokenizer.hpp"

#include <algorithm>
#include <cmath>

#include "cast/error.hpp"
#include "cast/nn.hpp"

namespace cast {

void init_conv_stem(ParamStore& store, const std::string& prefix, const StemConfig& cfg, Rng& rng) {
  auto conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) {
    Tensor w = Tensor::matrix(cout, k * k * cin);
    const double std = std::sqrt(2.0 / static_cast<double>(k * k * cin));
    for (double& v : w.values()) v = std * rng.normal();
    store.add(prefix + "." + name + ".w", std::move(w));
    store.add(prefix + "." + name + ".b", Tensor::matrix(1, cout));
  };
  conv("conv1", 3, cfg.hidden1, 3);
  conv("conv2", cfg.hidden1, cfg.hidden2, 3);
  conv("proj", cfg.hidden2, cfg.out_channels, 1);
}

Tensor image_tensor(const Image& image) {
  Tensor t = Tensor::matrix(image.pixel_count(), 3);
  for (std::size_t i = 0; i < image.data.size(); ++i) t[i] = image.data[i] / 255.0;
  return t;
}

FeatureGrid conv_stem(Tape& tape, const Image& image, const ParamStore& store, const std::string& prefix) {
  require(image.height % kStemStride == 0 && image.width % kStemStride == 0, ErrorCode::ShapeMismatch,
          "image dimensions must be divisible by the stem stride " + std::to_string(kStemStride));
  auto p = [&](const std::string& n) { return tape.param(store, prefix + "." + n); };
  Var x = tape.constant(image_tensor(image));
  const std::size_t h1 = image.height / 2, w1 = image.width / 2;
  Var y = ad::conv2d(x, p("conv1.w"), p("conv1.b"), image.height, image.width, 3, 2, 1);
  y = ad::gelu(y);
  y = ad::conv2d(y, p("conv2.w"), p("conv2.b"), h1, w1, 3, 2, 1);
  y = ad::conv2d(y, p("proj.w"), p("proj.b"), h1 / 2, w1 / 2, 1, 1, 0);
  return FeatureGrid{h1 / 2, w1 / 2, y.cols(), kStemStride, y};
}

DownsampledPartition downsample_partition(const LabelMap& map, std::size_t stride) {
  require(stride > 0 && map.height % stride == 0 && map.width % stride == 0, ErrorCode::ShapeMismatch,
          "stride must divide the map dimensions");
  const std::size_t gh = map.height / stride, gw = map.width / stride;
  std::uint32_t mx = 0;
  for (auto l : map.labels) mx = std::max(mx, l);
  const std::size_t n = std::max<std::size_t>(map.n_segments, map.labels.empty() ? 0 : mx + 1);

  LabelMap cells(gh, gw, 0, n);
  std::vector<std::uint32_t> votes;
  for (std::size_t cy = 0; cy < gh; ++cy)
    for (std::size_t cx = 0; cx < gw; ++cx) {
      votes.clear();
      for (std::size_t y = cy * stride; y < (cy + 1) * stride; ++y)
        for (std::size_t x = cx * stride; x < (cx + 1) * stride; ++x) votes.push_back(map.at(y, x));
      std::sort(votes.begin(), votes.end());
      std::uint32_t best = votes[0];
      std::size_t best_count = 0;
      for (std::size_t i = 0; i < votes.size();) {
        std::size_t j = i;
        while (j < votes.size() && votes[j] == votes[i]) ++j;
        if (j - i > best_count) {  // strict: ties keep the smaller label
          best_count = j - i;
          best = votes[i];
        }
        i = j;
      }
      cells.at(cy, cx) = best;
    }

  DownsampledPartition out;
  out.old_to_new.assign(n, -1);
  for (auto l : cells.labels) out.old_to_new[l] = 0;
  std::int64_t next = 0;
  for (auto& m : out.old_to_new)
    if (m == 0) m = next++;
  for (auto& l : cells.labels) l = static_cast<std::uint32_t>(out.old_to_new[l]);
  cells.n_segments = static_cast<std::size_t>(next);

  LabelMap pixels = map;
  pixels.n_segments = cells.n_segments;
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const std::int64_t m = out.old_to_new[map.at(y, x)];
      pixels.at(y, x) = m >= 0 ? static_cast<std::uint32_t>(m) : cells.at(y / stride, x / stride);
    }
  out.cells = std::move(cells);
  out.pixels = std::move(pixels);
  return out;
}

Tensor sinusoidal_encoding_2d(std::size_t h, std::size_t w, std::size_t d) {
  Tensor pe = Tensor::matrix(h * w, d);
  const std::size_t per_axis = (d + 1) / 2;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t j = c / 2;
        const double pos = static_cast<double>(c % 2 == 0 ? y : x);
        const std::size_t f = j / 2;
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(f) / static_cast<double>(per_axis));
        pe(y * w + x, c) = (j % 2 == 0) ? std::sin(pos * omega) : std::cos(pos * omega);
      }
  return pe;
}

void init_class_token(ParamStore& store, const std::string& name, std::size_t d, Rng& rng) {
  Tensor t = Tensor::matrix(1, d);
  for (double& v : t.values()) v = 0.02 * rng.normal();
  store.add(name, std::move(t));
}

TokenSet aggregate_tokens(Tape& tape, const FeatureGrid& grid, const LabelMap& cell_map, const ParamStore& store,
                          const std::string& class_token) {
  require(cell_map.height == grid.grid_h && cell_map.width == grid.grid_w, ErrorCode::ShapeMismatch,
          "cell map dimensions differ from the feature grid");
  std::vector<std::size_t> labels(cell_map.labels.begin(), cell_map.labels.end());
  Var xs = ad::segment_mean(grid.features, labels, cell_map.n_segments);
  Var pe = tape.constant(sinusoidal_encoding_2d(grid.grid_h, grid.grid_w, grid.channels));
  Var epos = ad::segment_mean(pe, labels, cell_map.n_segments);
  const Var parts[] = {tape.param(store, class_token), ad::add(xs, epos)};
  return TokenSet{ad::concat_rows(parts), 0, 0};
}

}  // namespace cast
