#include "cast/superpixel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "cast/error.hpp"

namespace cast {

void validate(const SuperpixelConfig& cfg) {
  require(cfg.target_count >= 2, ErrorCode::InvalidConfig, "superpixel target_count must be >= 2");
  require(cfg.iterations >= 1, ErrorCode::InvalidConfig, "superpixel iterations must be >= 1");
  require(cfg.seeds_histogram_bins >= 2 && cfg.seeds_histogram_bins <= 16, ErrorCode::InvalidConfig,
          "seeds_histogram_bins must lie in [2, 16]");
  require(cfg.slic_compactness > 0.0, ErrorCode::InvalidConfig, "slic_compactness must be positive");
}

std::pair<std::size_t, std::size_t> superpixel_grid(std::size_t height, std::size_t width, std::size_t target) {
  const double aspect = static_cast<double>(height) / static_cast<double>(width);
  std::size_t rows = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(target) * aspect)));
  rows = std::clamp<std::size_t>(rows, 1, height);
  std::size_t cols = static_cast<std::size_t>(std::lround(static_cast<double>(target) / static_cast<double>(rows)));
  cols = std::clamp<std::size_t>(cols, 1, width);
  return {rows, cols};
}

namespace {

void check_input(const Image& image, const SuperpixelConfig& cfg) {
  validate(cfg);
  require(image.height >= 8 && image.width >= 8, ErrorCode::ImageTooSmall, "images must be at least 8x8");
  require(cfg.target_count * 4 <= image.height * image.width, ErrorCode::ImageTooSmall,
          "target_count exceeds height*width/4");
}

// Whether removing the centre of a 3x3 neighbourhood keeps the centre's
// segment 4-connected. ring holds N, NE, E, SE, S, SW, W, NW membership.
bool removable(const std::array<bool, 8>& ring) {
  int members = 0;
  for (bool b : ring) members += b;
  const bool has_edge_neighbour = ring[0] || ring[2] || ring[4] || ring[6];
  if (!has_edge_neighbour) return false;
  if (members == 8) return true;
  // Walk arcs of consecutive members starting after a non-member.
  int start = 0;
  while (ring[start]) ++start;
  int arcs_with_edge = 0;
  bool in_arc = false, arc_has_edge = false;
  for (int k = 1; k <= 8; ++k) {
    const int i = (start + k) % 8;
    if (ring[i]) {
      if (!in_arc) {
        in_arc = true;
        arc_has_edge = false;
      }
      if (i % 2 == 0) arc_has_edge = true;
    } else if (in_arc) {
      in_arc = false;
      arcs_with_edge += arc_has_edge;
    }
  }
  if (in_arc) arcs_with_edge += arc_has_edge;
  return arcs_with_edge == 1;
}

constexpr int kRingDy[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
constexpr int kRingDx[8] = {0, 1, 1, 1, 0, -1, -1, -1};

// Grid of labels at some granularity (pixels or square blocks).
struct LabelGrid {
  std::size_t h, w;
  std::vector<std::uint32_t> lab;

  std::uint32_t at(std::ptrdiff_t y, std::ptrdiff_t x) const {
    if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(h) || x >= static_cast<std::ptrdiff_t>(w))
      return std::numeric_limits<std::uint32_t>::max();
    return lab[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  }

  bool can_remove(std::size_t y, std::size_t x) const {
    const std::uint32_t a = lab[y * w + x];
    std::array<bool, 8> ring{};
    for (int k = 0; k < 8; ++k)
      ring[k] = at(static_cast<std::ptrdiff_t>(y) + kRingDy[k], static_cast<std::ptrdiff_t>(x) + kRingDx[k]) == a;
    return removable(ring);
  }
};

class SeedsState {
public:
  SeedsState(const Image& img, std::size_t bins, std::size_t n_segments)
      : img_(img), bins_(bins), hist_size_(bins * bins * bins), n_(n_segments) {
    bin_.resize(img.pixel_count());
    for (std::size_t i = 0; i < img.pixel_count(); ++i) {
      const std::uint8_t* p = img.data.data() + 3 * i;
      std::size_t b = 0;
      for (int c = 0; c < 3; ++c) b = b * bins + (static_cast<std::size_t>(p[c]) * bins) / 256;
      bin_[i] = static_cast<std::uint32_t>(b);
    }
  }

  void init_labels(std::vector<std::uint32_t> labels) {
    labels_ = std::move(labels);
    hist_.assign(n_ * hist_size_, 0);
    size_.assign(n_, 0);
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      ++hist_[labels_[i] * hist_size_ + bin_[i]];
      ++size_[labels_[i]];
    }
  }

  // Histogram intersection between a unit (given as bin counts) and a
  // segment, both normalised, optionally with the unit removed from the segment.
  double intersection(const std::vector<std::pair<std::uint32_t, int>>& unit, int unit_size, std::uint32_t seg,
                      bool exclude_unit) const {
    const int seg_size = size_[seg] - (exclude_unit ? unit_size : 0);
    if (seg_size <= 0) return 0.0;
    double s = 0.0;
    for (auto [b, c] : unit) {
      const int h = hist_[seg * hist_size_ + b] - (exclude_unit ? c : 0);
      s += std::min(static_cast<double>(c) / unit_size, static_cast<double>(h) / seg_size);
    }
    return s;
  }

  void block_pass(std::size_t side) {
    const std::size_t H = img_.height, W = img_.width;
    LabelGrid grid{(H + side - 1) / side, (W + side - 1) / side, {}};
    grid.lab.resize(grid.h * grid.w);
    for (std::size_t by = 0; by < grid.h; ++by)
      for (std::size_t bx = 0; bx < grid.w; ++bx) grid.lab[by * grid.w + bx] = labels_[by * side * W + bx * side];

    std::vector<std::pair<std::uint32_t, int>> unit;
    for (std::size_t by = 0; by < grid.h; ++by)
      for (std::size_t bx = 0; bx < grid.w; ++bx) {
        const std::uint32_t a = grid.lab[by * grid.w + bx];
        std::array<std::uint32_t, 4> cand{};
        std::size_t nc = 0;
        for (int k = 0; k < 8; k += 2) {
          const std::uint32_t l =
              grid.at(static_cast<std::ptrdiff_t>(by) + kRingDy[k], static_cast<std::ptrdiff_t>(bx) + kRingDx[k]);
          if (l != a && l != std::numeric_limits<std::uint32_t>::max() &&
              std::find(cand.begin(), cand.begin() + nc, l) == cand.begin() + nc)
            cand[nc++] = l;
        }
        if (nc == 0 || !grid.can_remove(by, bx)) continue;

        unit.clear();
        int unit_size = 0;
        const std::size_t y1 = std::min(H, (by + 1) * side), x1 = std::min(W, (bx + 1) * side);
        for (std::size_t y = by * side; y < y1; ++y)
          for (std::size_t x = bx * side; x < x1; ++x) {
            add_bin(unit, bin_[y * W + x]);
            ++unit_size;
          }
        if (unit_size >= size_[a]) continue;

        const std::uint32_t best = best_target(unit, unit_size, a, cand, nc);
        if (best == a) continue;
        for (std::size_t y = by * side; y < y1; ++y)
          for (std::size_t x = bx * side; x < x1; ++x) move_pixel(y * W + x, best);
        grid.lab[by * grid.w + bx] = best;
      }
  }

  void pixel_pass() {
    const std::size_t H = img_.height, W = img_.width;
    LabelGrid grid{H, W, {}};
    grid.lab = labels_;
    std::vector<std::pair<std::uint32_t, int>> unit(1);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::uint32_t a = grid.lab[y * W + x];
        std::array<std::uint32_t, 4> cand{};
        std::size_t nc = 0;
        for (int k = 0; k < 8; k += 2) {
          const std::uint32_t l =
              grid.at(static_cast<std::ptrdiff_t>(y) + kRingDy[k], static_cast<std::ptrdiff_t>(x) + kRingDx[k]);
          if (l != a && l != std::numeric_limits<std::uint32_t>::max() &&
              std::find(cand.begin(), cand.begin() + nc, l) == cand.begin() + nc)
            cand[nc++] = l;
        }
        if (nc == 0 || size_[a] <= 1 || !grid.can_remove(y, x)) continue;
        unit[0] = {bin_[y * W + x], 1};
        const std::uint32_t best = best_target(unit, 1, a, cand, nc);
        if (best == a) continue;
        move_pixel(y * W + x, best);
        grid.lab[y * W + x] = best;
      }
  }

  const std::vector<std::uint32_t>& labels() const { return labels_; }

private:
  static void add_bin(std::vector<std::pair<std::uint32_t, int>>& unit, std::uint32_t b) {
    for (auto& [bb, c] : unit)
      if (bb == b) {
        ++c;
        return;
      }
    unit.emplace_back(b, 1);
  }

  std::uint32_t best_target(const std::vector<std::pair<std::uint32_t, int>>& unit, int unit_size, std::uint32_t a,
                            const std::array<std::uint32_t, 4>& cand, std::size_t nc) const {
    double best_score = intersection(unit, unit_size, a, true);
    std::uint32_t best = a;
    for (std::size_t i = 0; i < nc; ++i) {
      const double s = intersection(unit, unit_size, cand[i], false);
      if (s > best_score + 1e-12) {
        best_score = s;
        best = cand[i];
      }
    }
    return best;
  }

  void move_pixel(std::size_t i, std::uint32_t to) {
    const std::uint32_t from = labels_[i];
    --hist_[from * hist_size_ + bin_[i]];
    --size_[from];
    ++hist_[to * hist_size_ + bin_[i]];
    ++size_[to];
    labels_[i] = to;
  }

  const Image& img_;
  std::size_t bins_, hist_size_, n_;
  std::vector<std::uint32_t> bin_;
  std::vector<std::uint32_t> labels_;
  std::vector<int> hist_;
  std::vector<int> size_;
};

// ---- CIELAB (D65) for SLIC

struct Lab {
  double l, a, b;
};

Lab to_lab(const std::uint8_t* rgb) {
  auto lin = [](double c) {
    c /= 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const double r = lin(rgb[0]), g = lin(rgb[1]), b = lin(rgb[2]);
  const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
  const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b);
  const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
  auto f = [](double t) { return t > 216.0 / 24389.0 ? std::cbrt(t) : (24389.0 / 27.0 * t + 16.0) / 116.0; };
  const double fx = f(x), fy = f(y), fz = f(z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

}  // namespace

LabelMap seeds_superpixels(const Image& image, const SuperpixelConfig& cfg) {
  check_input(image, cfg);
  const std::size_t H = image.height, W = image.width;
  const auto [gy, gx] = superpixel_grid(H, W, cfg.target_count);
  const std::size_t n = gy * gx;

  // Block sides 2^k up to half the superpixel extent.
  const double sp_extent = std::min(static_cast<double>(H) / gy, static_cast<double>(W) / gx);
  std::vector<std::size_t> sides;
  for (std::size_t s = 2; static_cast<double>(s) <= sp_extent / 2.0; s *= 2) sides.push_back(s);
  const std::size_t top = sides.empty() ? 1 : sides.back();

  // Assign top-level blocks to grid cells by block centre.
  std::vector<std::uint32_t> labels(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double cy = (static_cast<double>((y / top) * top) + std::min<double>(top, H - (y / top) * top) / 2.0);
      const double cx = (static_cast<double>((x / top) * top) + std::min<double>(top, W - (x / top) * top) / 2.0);
      const std::size_t ry = std::min(gy - 1, static_cast<std::size_t>(cy * gy / H));
      const std::size_t rx = std::min(gx - 1, static_cast<std::size_t>(cx * gx / W));
      labels[y * W + x] = static_cast<std::uint32_t>(ry * gx + rx);
    }

  SeedsState state(image, cfg.seeds_histogram_bins, n);
  state.init_labels(std::move(labels));
  for (auto it = sides.rbegin(); it != sides.rend(); ++it)
    for (std::size_t i = 0; i < cfg.iterations; ++i) state.block_pass(*it);
  for (std::size_t i = 0; i < cfg.iterations; ++i) state.pixel_pass();

  LabelMap out(H, W, 0, n);
  out.labels = state.labels();
  compact_labels(out);
  return out;
}

LabelMap slic_superpixels(const Image& image, const SuperpixelConfig& cfg) {
  check_input(image, cfg);
  const std::size_t H = image.height, W = image.width;
  const std::size_t N = H * W;
  const auto [gy, gx] = superpixel_grid(H, W, cfg.target_count);
  const std::size_t k = gy * gx;
  const double step = std::sqrt(static_cast<double>(N) / static_cast<double>(k));
  const double m = cfg.slic_compactness;

  std::vector<Lab> lab(N);
  for (std::size_t i = 0; i < N; ++i) lab[i] = to_lab(image.data.data() + 3 * i);

  auto grad_at = [&](std::size_t y, std::size_t x) {
    if (y == 0 || x == 0 || y + 1 >= H || x + 1 >= W) return std::numeric_limits<double>::infinity();
    auto d2 = [](const Lab& a, const Lab& b) {
      return (a.l - b.l) * (a.l - b.l) + (a.a - b.a) * (a.a - b.a) + (a.b - b.b) * (a.b - b.b);
    };
    return d2(lab[y * W + x + 1], lab[y * W + x - 1]) + d2(lab[(y + 1) * W + x], lab[(y - 1) * W + x]);
  };

  struct Center {
    double l, a, b, y, x;
  };
  std::vector<Center> centers(k);
  for (std::size_t ry = 0; ry < gy; ++ry)
    for (std::size_t rx = 0; rx < gx; ++rx) {
      double cy = (ry + 0.5) * static_cast<double>(H) / gy;
      double cx = (rx + 0.5) * static_cast<double>(W) / gx;
      // Move the seed to the lowest gradient in its 3x3 neighbourhood; ties keep the original.
      std::size_t py = std::min(H - 1, static_cast<std::size_t>(cy)), px = std::min(W - 1, static_cast<std::size_t>(cx));
      double best = grad_at(py, px);
      std::size_t by = py, bx = px;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(py) + dy, xx = static_cast<std::ptrdiff_t>(px) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(H) || xx >= static_cast<std::ptrdiff_t>(W)) continue;
          const double g = grad_at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          if (g < best) {
            best = g;
            by = static_cast<std::size_t>(yy);
            bx = static_cast<std::size_t>(xx);
          }
        }
      if (by != py || bx != px) {
        cy = by + 0.5;
        cx = bx + 0.5;
      }
      const Lab& c = lab[std::min(H - 1, static_cast<std::size_t>(cy)) * W + std::min(W - 1, static_cast<std::size_t>(cx))];
      centers[ry * gx + rx] = {c.l, c.a, c.b, cy, cx};
    }

  std::vector<std::uint32_t> label(N, 0);
  std::vector<double> dist(N);
  const double spatial_w = (m / step) * (m / step);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t c = 0; c < k; ++c) {
      const Center& ce = centers[c];
      const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(ce.y - 2 * step)));
      const std::ptrdiff_t y1 = std::min<std::ptrdiff_t>(H, static_cast<std::ptrdiff_t>(std::ceil(ce.y + 2 * step)));
      const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(std::floor(ce.x - 2 * step)));
      const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, static_cast<std::ptrdiff_t>(std::ceil(ce.x + 2 * step)));
      for (std::ptrdiff_t y = y0; y < y1; ++y)
        for (std::ptrdiff_t x = x0; x < x1; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
          const Lab& p = lab[i];
          const double dc = (p.l - ce.l) * (p.l - ce.l) + (p.a - ce.a) * (p.a - ce.a) + (p.b - ce.b) * (p.b - ce.b);
          const double dy = y + 0.5 - ce.y, dx = x + 0.5 - ce.x;
          const double d = dc + spatial_w * (dy * dy + dx * dx);
          if (d < dist[i]) {
            dist[i] = d;
            label[i] = static_cast<std::uint32_t>(c);
          }
        }
    }
    std::vector<Center> acc(k, Center{0, 0, 0, 0, 0});
    std::vector<double> cnt(k, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      Center& a = acc[label[i]];
      a.l += lab[i].l;
      a.a += lab[i].a;
      a.b += lab[i].b;
      a.y += static_cast<double>(i / W) + 0.5;
      a.x += static_cast<double>(i % W) + 0.5;
      cnt[label[i]] += 1.0;
    }
    for (std::size_t c = 0; c < k; ++c)
      if (cnt[c] > 0) centers[c] = {acc[c].l / cnt[c], acc[c].a / cnt[c], acc[c].b / cnt[c], acc[c].y / cnt[c], acc[c].x / cnt[c]};
  }

  // Connectivity: keep the largest component of every label; orphans join
  // the adjacent segment with the largest (final) size.
  std::vector<std::int64_t> comp(N, -1);
  std::vector<std::size_t> comp_size;
  std::vector<std::uint32_t> comp_label;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < N; ++s) {
    if (comp[s] >= 0) continue;
    const std::int64_t id = static_cast<std::int64_t>(comp_size.size());
    comp_size.push_back(0);
    comp_label.push_back(label[s]);
    comp[s] = id;
    stack.assign(1, s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++comp_size[id];
      const std::size_t y = i / W, x = i % W;
      const std::size_t nb[4] = {y > 0 ? i - W : N, y + 1 < H ? i + W : N, x > 0 ? i - 1 : N, x + 1 < W ? i + 1 : N};
      for (std::size_t j : nb)
        if (j < N && comp[j] < 0 && label[j] == label[i]) {
          comp[j] = id;
          stack.push_back(j);
        }
    }
  }
  std::vector<std::int64_t> main_comp(k, -1);
  for (std::size_t c = 0; c < comp_size.size(); ++c) {
    auto& mc = main_comp[comp_label[c]];
    if (mc < 0 || comp_size[c] > comp_size[static_cast<std::size_t>(mc)]) mc = static_cast<std::int64_t>(c);
  }
  // Orphans are merged smallest first so the target sizes are those of kept segments.
  std::vector<std::size_t> seg_size(k, 0);
  for (std::size_t c = 0; c < comp_size.size(); ++c)
    if (main_comp[comp_label[c]] == static_cast<std::int64_t>(c)) seg_size[comp_label[c]] = comp_size[c];
  std::vector<std::size_t> orphans;
  for (std::size_t c = 0; c < comp_size.size(); ++c)
    if (main_comp[comp_label[c]] != static_cast<std::int64_t>(c)) orphans.push_back(c);
  std::stable_sort(orphans.begin(), orphans.end(), [&](std::size_t a, std::size_t b) { return comp_size[a] < comp_size[b]; });
  std::vector<std::uint32_t> comp_target(comp_size.size());
  std::vector<bool> settled(comp_size.size(), false);
  for (std::size_t c = 0; c < comp_size.size(); ++c) {
    comp_target[c] = comp_label[c];
    settled[c] = main_comp[comp_label[c]] == static_cast<std::int64_t>(c);
  }
  // An orphan may only join a settled neighbour (a kept component or an
  // already merged orphan); orphans surrounded by orphans wait a round.
  while (!orphans.empty()) {
    std::vector<std::size_t> waiting;
    for (std::size_t c : orphans) {
      std::uint32_t best = 0;
      std::size_t best_size = 0;
      bool found = false;
      for (std::size_t i = 0; i < N; ++i) {
        if (comp[i] != static_cast<std::int64_t>(c)) continue;
        const std::size_t y = i / W, x = i % W;
        const std::size_t nb[4] = {y > 0 ? i - W : N, y + 1 < H ? i + W : N, x > 0 ? i - 1 : N, x + 1 < W ? i + 1 : N};
        for (std::size_t j : nb) {
          if (j >= N || comp[j] == static_cast<std::int64_t>(c) || !settled[static_cast<std::size_t>(comp[j])]) continue;
          const std::uint32_t t = comp_target[static_cast<std::size_t>(comp[j])];
          if (!found || seg_size[t] > best_size || (seg_size[t] == best_size && t < best)) {
            best = t;
            best_size = seg_size[t];
            found = true;
          }
        }
      }
      if (!found) {
        waiting.push_back(c);
        continue;
      }
      comp_target[c] = best;
      settled[c] = true;
      seg_size[best] += comp_size[c];
    }
    orphans.swap(waiting);
  }
  LabelMap out(H, W, 0, k);
  for (std::size_t i = 0; i < N; ++i) out.labels[i] = comp_target[static_cast<std::size_t>(comp[i])];
  compact_labels(out);
  return out;
}

LabelMap compute_superpixels(const Image& image, const SuperpixelConfig& cfg) {
  return cfg.algorithm == SuperpixelAlgorithm::Seeds ? seeds_superpixels(image, cfg) : slic_superpixels(image, cfg);
}

std::vector<std::size_t> component_counts(const LabelMap& map) {
  const std::size_t H = map.height, W = map.width, N = H * W;
  std::uint32_t mx = 0;
  for (auto l : map.labels) mx = std::max(mx, l);
  std::vector<std::size_t> counts(std::max<std::size_t>(map.n_segments, N ? mx + 1 : 0), 0);
  std::vector<bool> seen(N, false);
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < N; ++s) {
    if (seen[s]) continue;
    ++counts[map.labels[s]];
    seen[s] = true;
    stack.assign(1, s);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / W, x = i % W;
      const std::size_t nb[4] = {y > 0 ? i - W : N, y + 1 < H ? i + W : N, x > 0 ? i - 1 : N, x + 1 < W ? i + 1 : N};
      for (std::size_t j : nb)
        if (j < N && !seen[j] && map.labels[j] == map.labels[i]) {
          seen[j] = true;
          stack.push_back(j);
        }
    }
  }
  return counts;
}

PartitionReport validate_partition(const LabelMap& map) {
  PartitionReport r;
  if (map.labels.size() != map.height * map.width) r.covered = false;
  std::vector<bool> present(map.n_segments, false);
  for (auto l : map.labels) {
    if (l >= map.n_segments)
      r.covered = false;
    else
      present[l] = true;
  }
  for (std::uint32_t l = 0; l < map.n_segments; ++l)
    if (!present[l]) {
      r.compact = false;
      r.missing_labels.push_back(l);
    }
  if (!r.covered) return r;
  const auto counts = component_counts(map);
  for (std::uint32_t l = 0; l < counts.size(); ++l)
    if (counts[l] > 1) {
      r.connected = false;
      r.disconnected_segments.push_back(l);
    }
  return r;
}

}  // namespace cast
