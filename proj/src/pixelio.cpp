#include "cast/pixelio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>

#include "cast/error.hpp"

namespace cast {
namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& is) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

std::size_t header_number(std::istream& is, const std::filesystem::path& path) {
  const std::string tok = header_token(is);
  require(!tok.empty() && std::all_of(tok.begin(), tok.end(), [](char ch) { return ch >= '0' && ch <= '9'; }),
          ErrorCode::MalformedHeader, "bad header field '" + tok + "' in " + path.string());
  return std::stoull(tok);
}

struct Header {
  std::size_t width, height, maxval;
};

Header read_header(std::ifstream& is, const std::filesystem::path& path, const char* magic) {
  const std::string m = header_token(is);
  require(m == magic, ErrorCode::MalformedHeader,
          path.string() + ": expected magic " + magic + ", found '" + m + "'");
  Header h{};
  h.width = header_number(is, path);
  h.height = header_number(is, path);
  h.maxval = header_number(is, path);
  return h;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::MissingFile, "cannot open " + path.string());
  return is;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  std::ifstream is = open_input(path);
  const Header h = read_header(is, path, "P6");
  require(h.maxval == 255, ErrorCode::MalformedHeader, path.string() + ": maxval must be 255");
  Image img(h.height, h.width);
  is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  require(is.gcount() == static_cast<std::streamsize>(img.data.size()), ErrorCode::TruncatedPayload,
          path.string() + ": pixel payload is truncated");
  return img;
}

void save_image(const Image& image, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.data.data()), static_cast<std::streamsize>(image.data.size()));
  require(static_cast<bool>(os), ErrorCode::IoFailure, "write to " + path.string() + " failed");
}

void save_label_map(const LabelMap& map, const std::filesystem::path& path) {
  require(map.n_segments <= 65535, ErrorCode::TooManySegments,
          std::to_string(map.n_segments) + " segments do not fit a 16-bit PGM");
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  os << "P5\n" << map.width << ' ' << map.height << "\n65535\n";
  std::vector<char> payload(map.labels.size() * 2);
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    require(map.labels[i] <= 65535, ErrorCode::TooManySegments, "label exceeds 65535");
    payload[2 * i] = static_cast<char>((map.labels[i] >> 8) & 0xff);
    payload[2 * i + 1] = static_cast<char>(map.labels[i] & 0xff);
  }
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  require(static_cast<bool>(os), ErrorCode::IoFailure, "write to " + path.string() + " failed");
}

LabelMap load_label_map(const std::filesystem::path& path) {
  std::ifstream is = open_input(path);
  const Header h = read_header(is, path, "P5");
  require(h.maxval == 65535, ErrorCode::MalformedHeader, path.string() + ": maxval must be 65535");
  LabelMap map(h.height, h.width);
  std::vector<unsigned char> payload(map.labels.size() * 2);
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  require(is.gcount() == static_cast<std::streamsize>(payload.size()), ErrorCode::TruncatedPayload,
          path.string() + ": label payload is truncated");
  std::uint32_t mx = 0;
  for (std::size_t i = 0; i < map.labels.size(); ++i) {
    map.labels[i] = (static_cast<std::uint32_t>(payload[2 * i]) << 8) | payload[2 * i + 1];
    mx = std::max(mx, map.labels[i]);
  }
  map.n_segments = map.labels.empty() ? 0 : mx + 1;
  return map;
}

std::vector<std::int64_t> compact_labels(LabelMap& map) {
  std::uint32_t mx = 0;
  for (auto l : map.labels) mx = std::max(mx, l);
  std::vector<std::int64_t> mapping(map.labels.empty() ? 0 : mx + 1, -1);
  for (auto l : map.labels) mapping[l] = 0;
  std::int64_t next = 0;
  for (auto& m : mapping)
    if (m == 0) m = next++;
  for (auto& l : map.labels) l = static_cast<std::uint32_t>(mapping[l]);
  map.n_segments = static_cast<std::size_t>(next);
  return mapping;
}

LabelMap upsample_nearest(const LabelMap& cells, std::size_t stride) {
  LabelMap out(cells.height * stride, cells.width * stride, 0, cells.n_segments);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = cells.at(y / stride, x / stride);
  return out;
}

LabelMap remap(const LabelMap& map, std::span<const std::uint32_t> mapping, std::size_t n_out) {
  LabelMap out = map;
  out.n_segments = n_out;
  for (auto& l : out.labels) {
    require(l < mapping.size(), ErrorCode::ShapeMismatch, "remap: label outside mapping");
    l = mapping[l];
  }
  return out;
}

std::vector<std::uint32_t> parent_table(const LabelMap& fine, const LabelMap& coarse) {
  require(fine.height == coarse.height && fine.width == coarse.width, ErrorCode::NonNestedLevels,
          "levels have different dimensions");
  constexpr std::uint32_t kUnset = ~std::uint32_t{0};
  std::uint32_t mx = 0;
  for (auto l : fine.labels) mx = std::max(mx, l);
  std::vector<std::uint32_t> parent(std::max<std::size_t>(fine.n_segments, fine.labels.empty() ? 0 : mx + 1), kUnset);
  for (std::size_t i = 0; i < fine.labels.size(); ++i) {
    auto& p = parent[fine.labels[i]];
    if (p == kUnset)
      p = coarse.labels[i];
    else
      require(p == coarse.labels[i], ErrorCode::NonNestedLevels,
              "fine segment " + std::to_string(fine.labels[i]) + " spans coarse segments " + std::to_string(p) +
                  " and " + std::to_string(coarse.labels[i]));
  }
  return parent;
}

Rgb hsv_to_rgb(double hue_deg, double sat, double val) {
  const double h = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
  const double c = val * sat;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = val - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  auto q = [m](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v + m, 0.0, 1.0) * 255.0)); };
  return {q(r), q(g), q(b)};
}

void rgb_to_hsv(Rgb c, double& hue_deg, double& sat, double& val) {
  const double r = c.r / 255.0, g = c.g / 255.0, b = c.b / 255.0;
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  val = mx;
  sat = mx > 0.0 ? d / mx : 0.0;
  if (d == 0.0)
    hue_deg = 0.0;
  else if (mx == r)
    hue_deg = 60.0 * std::fmod((g - b) / d + 6.0, 6.0);
  else if (mx == g)
    hue_deg = 60.0 * ((b - r) / d + 2.0);
  else
    hue_deg = 60.0 * ((r - g) / d + 4.0);
}

Image render_hierarchy_overlay(const Image& image, std::span<const LabelMap> levels, const OverlayOptions& opts) {
  require(!levels.empty(), ErrorCode::NonNestedLevels, "no levels to render");
  for (const LabelMap& l : levels)
    require(l.height == image.height && l.width == image.width, ErrorCode::NonNestedLevels,
            "level dimensions differ from the image");

  constexpr double kSat[] = {1.0, 0.55};
  constexpr double kVal[] = {1.0, 0.7};
  const LabelMap& coarsest = levels.front();
  std::uint32_t n_coarse = 0;
  for (auto l : coarsest.labels) n_coarse = std::max(n_coarse, l + 1);

  // Per-level colour of each segment as (hue, sat, val).
  struct Hsv {
    double h = 0, s = 1, v = 1;
  };
  std::vector<Hsv> colors(n_coarse);
  for (std::uint32_t c = 0; c < n_coarse; ++c) colors[c].h = 360.0 * c / n_coarse;

  for (std::size_t li = 1; li < levels.size(); ++li) {
    const auto parent = parent_table(levels[li], levels[li - 1]);
    // Ordinal of each child among its siblings, by ascending id.
    std::map<std::uint32_t, std::uint32_t> seen;
    std::vector<Hsv> next(parent.size());
    for (std::size_t f = 0; f < parent.size(); ++f) {
      if (parent[f] == ~std::uint32_t{0}) continue;
      const std::uint32_t ord = seen[parent[f]]++;
      next[f] = colors[parent[f]];
      if (li == 1) next[f].s = kSat[ord % 2];
      if (li == 2) next[f].v = kVal[ord % 2];
    }
    colors = std::move(next);
  }

  const LabelMap& finest = levels.back();
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const Hsv& c = colors[finest.at(y, x)];
      const Rgb rgb = hsv_to_rgb(c.h, c.s, c.v);
      const std::uint8_t* src = image.pixel(y, x);
      const double grey = (src[0] + src[1] + src[2]) / 3.0;
      std::uint8_t* dst = out.pixel(y, x);
      const std::uint8_t ch[3] = {rgb.r, rgb.g, rgb.b};
      for (int k = 0; k < 3; ++k)
        dst[k] = static_cast<std::uint8_t>(std::lround(opts.alpha * ch[k] + (1.0 - opts.alpha) * grey));
      if (!opts.contours) continue;
      const bool edge = (x + 1 < image.width && finest.at(y, x + 1) != finest.at(y, x)) ||
                        (y + 1 < image.height && finest.at(y + 1, x) != finest.at(y, x));
      if (edge) dst[0] = dst[1] = dst[2] = 255;
    }
  return out;
}

}  // namespace cast
