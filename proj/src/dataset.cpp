#include "cast/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cast/error.hpp"
#include "cast/rng.hpp"

namespace cast {

namespace {

constexpr double kPi = std::numbers::pi;

struct Pose {
  double cx, cy, angle, scale;
};

// Local (unrotated, unscaled) coordinates of a pixel centre.
void to_local(const Pose& p, double x, double y, double& u, double& v) {
  const double dx = x - p.cx, dy = y - p.cy;
  const double c = std::cos(p.angle), s = std::sin(p.angle);
  u = (c * dx + s * dy) / p.scale;
  v = (-s * dx + c * dy) / p.scale;
}

// Returns the 1-based part index at local coordinates, 0 for background.
int disk_part(double u, double v, const std::vector<double>& limb_angles) {
  const double r = std::hypot(u, v);
  if (r <= 11.0) return 1;
  for (double a : limb_angles) {
    const double along = u * std::cos(a) + v * std::sin(a);
    const double across = -u * std::sin(a) + v * std::cos(a);
    if (along >= 5.0 && along <= 20.0 && std::abs(across) <= 2.75) return 2;
  }
  return 0;
}

int tee_part(double u, double v) {
  if (std::abs(u) <= 13.0 && v >= -11.5 && v <= -4.5) return 1;
  if (std::abs(u) <= 3.5 && v > -4.5 && v <= 15.5) return 2;
  return 0;
}

int ring_part(double u, double v) {
  const double r = std::hypot(u, v);
  if (r < 8.0 || r > 14.5) return 0;
  double a = std::atan2(v, u);
  if (a < 0) a += 2 * kPi;
  return 1 + std::min(2, static_cast<int>(a / (2 * kPi / 3)));
}

struct Colour {
  double r, g, b;
};

double colour_distance(const Colour& a, const Colour& b) {
  return std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b);
}

// Hue band per global part class; parts of the same shape sit >= 100 degrees apart.
constexpr double kPartHue[kSynthPartClasses] = {0.0, 51.4, 205.7, 154.3, 308.6, 0.0, 102.9, 257.1};

Colour part_colour(Rng& rng, std::uint32_t part_class, const std::vector<Colour>& avoid) {
  for (int attempt = 0;; ++attempt) {
    const double hue = std::fmod(kPartHue[part_class] + rng.uniform(-15.0, 15.0) + 360.0, 360.0);
    const Rgb c = hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.55, 1.0));
    Colour col{double(c.r), double(c.g), double(c.b)};
    bool ok = true;
    for (const Colour& o : avoid) ok = ok && colour_distance(col, o) >= 140.0;
    if (ok || attempt > 200) return col;
  }
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace

std::vector<std::uint32_t> part_class_ids(std::size_t class_label) {
  switch (class_label) {
    case 0:
      return {1, 2};
    case 1:
      return {3, 4};
    default:
      return {5, 6, 7};
  }
}

SynthSample synth_sample(std::uint64_t seed, std::size_t index, std::size_t class_label, std::size_t size) {
  require(size >= 32, ErrorCode::InvalidParameter, "synthetic images need size >= 32");
  require(class_label < kSynthClasses, ErrorCode::InvalidParameter, "unknown synthetic class");
  Rng rng = Rng::stream(seed * 0x9e3779b97f4a7c15ULL + index, "synth-sample");
  const double unit = static_cast<double>(size) / 64.0;

  Pose pose{};
  pose.scale = unit * rng.uniform(1.15, 1.4);
  const double margin = 21.0 * pose.scale + 1.0;
  pose.cx = rng.uniform(margin, size - margin);
  pose.cy = rng.uniform(margin, size - margin);
  pose.angle = class_label == 1 ? rng.uniform(-0.6, 0.6) : rng.uniform(0.0, 2 * kPi);
  std::vector<double> limbs;
  for (int k = 0; k < 3; ++k) limbs.push_back(k * 2 * kPi / 3 + rng.uniform(-0.3, 0.3));

  // Near-grey background, saturated parts.
  const Rgb bg_rgb = hsv_to_rgb(rng.uniform(0.0, 360.0), rng.uniform(0.0, 0.08), rng.uniform(0.3, 0.8));
  const Colour bg{double(bg_rgb.r), double(bg_rgb.g), double(bg_rgb.b)};
  std::vector<Colour> colours{bg};
  const std::vector<std::uint32_t> ids = part_class_ids(class_label);
  for (std::size_t p = 0; p < ids.size(); ++p) colours.push_back(part_colour(rng, ids[p], colours));
  const double fx = rng.uniform(0.2, 0.6), fy = rng.uniform(0.2, 0.6), phase = rng.uniform(0, 2 * kPi);

  SynthSample s;
  s.class_label = class_label;
  s.image = Image(size, size);
  s.parts = LabelMap(size, size, 0, kSynthPartClasses);
  s.object = LabelMap(size, size, 0, kSynthClasses + 1);
  s.figure = LabelMap(size, size, 0, 2);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      double u, v;
      to_local(pose, x + 0.5, y + 0.5, u, v);
      const int part = class_label == 0 ? disk_part(u, v, limbs) : class_label == 1 ? tee_part(u, v) : ring_part(u, v);
      Colour c = colours[part];
      double noise_amp = 4.0;
      if (part == 0) {
        const double t = 7.0 * std::sin(fx * x + fy * y + phase);
        c = {c.r + t, c.g + t, c.b + t};
        noise_amp = 4.0;
      } else {
        s.parts.at(y, x) = ids[part - 1];
        s.object.at(y, x) = static_cast<std::uint32_t>(class_label + 1);
        s.figure.at(y, x) = 1;
      }
      std::uint8_t* px = s.image.pixel(y, x);
      px[0] = clamp_byte(c.r + rng.uniform(-noise_amp, noise_amp));
      px[1] = clamp_byte(c.g + rng.uniform(-noise_amp, noise_amp));
      px[2] = clamp_byte(c.b + rng.uniform(-noise_amp, noise_amp));
    }
  return s;
}

std::vector<SynthSample> synth_dataset(std::uint64_t seed, std::size_t n, std::size_t size) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % kSynthClasses;
  Rng rng = Rng::stream(seed, "synth-labels");
  for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
  std::vector<SynthSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample(seed, i, labels[i], size));
  return out;
}

}  // namespace cast
