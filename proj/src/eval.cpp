#include "cast/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cast/error.hpp"

namespace cast {

namespace {

void require_same_dims(const LabelMap& a, const LabelMap& b) {
  require(a.height == b.height && a.width == b.width, ErrorCode::DimMismatch,
          "maps differ in size: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
              std::to_string(b.height) + "x" + std::to_string(b.width));
}

double finish_mean(MetricReport& r) {
  if (r.per_class.empty()) return r.mean = 1.0;
  double s = 0.0;
  for (const auto& c : r.per_class) s += c.value;
  return r.mean = s / static_cast<double>(r.per_class.size());
}

// 1-D squared distance transform (Felzenszwalb & Huttenlocher) in place.
void edt_1d(std::vector<double>& f, std::size_t n, std::vector<double>& d, std::vector<std::size_t>& v,
            std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q] < inf) {
      first = q;
      break;
    }
  if (first == n) return;
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] == inf) continue;
    double s;
    while (true) {
      const double p = static_cast<double>(v[k]);
      const double qd = static_cast<double>(q);
      s = ((f[q] + qd * qd) - (f[v[k]] + p * p)) / (2 * qd - 2 * p);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
    d[q] = diff * diff + f[v[k]];
  }
  std::copy(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n), f.begin());
}

}  // namespace

MetricReport region_miou(const LabelMap& pred, const LabelMap& gt, std::size_t n_classes) {
  require_same_dims(pred, gt);
  std::vector<std::size_t> inter(n_classes, 0), in_pred(n_classes, 0), in_gt(n_classes, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::uint32_t p = pred.labels[i], g = gt.labels[i];
    if (p < n_classes) ++in_pred[p];
    if (g < n_classes) ++in_gt[g];
    if (p == g && p < n_classes) ++inter[p];
  }
  MetricReport r;
  r.name = "region_miou";
  for (std::uint32_t c = 0; c < n_classes; ++c) {
    if (in_pred[c] == 0 && in_gt[c] == 0) continue;
    const double uni = static_cast<double>(in_pred[c] + in_gt[c] - inter[c]);
    r.per_class.push_back({c, static_cast<double>(inter[c]) / uni, in_gt[c]});
  }
  finish_mean(r);
  return r;
}

std::vector<bool> boundary_map(const LabelMap& map) {
  std::vector<bool> b(map.size(), false);
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const std::uint32_t l = map.at(y, x);
      if ((x + 1 < map.width && map.at(y, x + 1) != l) || (y + 1 < map.height && map.at(y + 1, x) != l))
        b[y * map.width + x] = true;
    }
  return b;
}

std::vector<double> distance_transform(const std::vector<bool>& sites, std::size_t height, std::size_t width) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(height * width);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
  const std::size_t n = std::max(height, width);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<std::size_t> v(n);
  for (std::size_t x = 0; x < width; ++x) {
    for (std::size_t y = 0; y < height; ++y) f[y] = g[y * width + x];
    edt_1d(f, height, d, v, z);
    for (std::size_t y = 0; y < height; ++y) g[y * width + x] = f[y];
  }
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) f[x] = g[y * width + x];
    edt_1d(f, width, d, v, z);
    for (std::size_t x = 0; x < width; ++x) g[y * width + x] = std::sqrt(f[x]);
  }
  return g;
}

double default_boundary_tolerance(std::size_t height, std::size_t width) {
  return 0.0075 * std::hypot(static_cast<double>(height), static_cast<double>(width));
}

MetricReport boundary_fscore(const LabelMap& pred, const LabelMap& gt, double tol) {
  require_same_dims(pred, gt);
  const std::vector<bool> bp = boundary_map(pred), bg = boundary_map(gt);
  const std::vector<double> to_gt = distance_transform(bg, gt.height, gt.width);
  const std::vector<double> to_pred = distance_transform(bp, gt.height, gt.width);
  std::size_t n_pred = 0, hit_pred = 0, n_gt = 0, hit_gt = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) {
      ++n_pred;
      hit_pred += to_gt[i] <= tol;
    }
    if (bg[i]) {
      ++n_gt;
      hit_gt += to_pred[i] <= tol;
    }
  }
  const double precision = n_pred == 0 ? 1.0 : static_cast<double>(hit_pred) / n_pred;
  const double recall = n_gt == 0 ? 1.0 : static_cast<double>(hit_gt) / n_gt;
  const double f = precision + recall == 0.0 ? 0.0 : 2 * precision * recall / (precision + recall);
  MetricReport r;
  r.name = "boundary_f";
  r.per_class.push_back({0, f, n_gt});
  r.mean = f;
  r.extra["precision"] = precision;
  r.extra["recall"] = recall;
  r.extra["tolerance"] = tol;
  return r;
}

std::vector<std::uint32_t> majority_labels(const LabelMap& segments, const LabelMap& classes, std::size_t n_classes) {
  require_same_dims(segments, classes);
  std::size_t n_seg = segments.n_segments;
  for (std::uint32_t l : segments.labels) n_seg = std::max<std::size_t>(n_seg, l + 1);
  std::vector<std::size_t> counts(n_seg * n_classes, 0);
  for (std::size_t i = 0; i < segments.size(); ++i)
    if (classes.labels[i] < n_classes) ++counts[segments.labels[i] * n_classes + classes.labels[i]];
  std::vector<std::uint32_t> out(n_seg, 0);
  for (std::size_t s = 0; s < n_seg; ++s) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < n_classes; ++c)
      if (counts[s * n_classes + c] > counts[s * n_classes + best]) best = c;
    out[s] = static_cast<std::uint32_t>(best);
  }
  return out;
}

std::vector<MetricReport> hierarchical_prf(const std::vector<LabelMap>& pred_levels,
                                           const std::vector<LabelMap>& gt_levels, std::size_t n_classes) {
  require(pred_levels.size() == gt_levels.size(), ErrorCode::DimMismatch, "level counts differ");
  std::vector<MetricReport> out;
  for (std::size_t l = 0; l < pred_levels.size(); ++l) {
    const LabelMap& seg = pred_levels[l];
    const LabelMap& gt = gt_levels[l];
    require_same_dims(seg, gt);
    const std::vector<std::uint32_t> cls = majority_labels(seg, gt, n_classes);
    std::vector<std::size_t> tp(n_classes, 0), np(n_classes, 0), ng(n_classes, 0);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const std::uint32_t p = cls[seg.labels[i]], g = gt.labels[i];
      ++np[p];
      if (g < n_classes) ++ng[g];
      if (p == g) ++tp[p];
    }
    MetricReport r;
    r.name = "hierarchical_prf_level" + std::to_string(l);
    double sp = 0.0, sr = 0.0;
    for (std::uint32_t c = 1; c < n_classes; ++c) {
      if (np[c] == 0 && ng[c] == 0) continue;
      const double p = np[c] == 0 ? 0.0 : static_cast<double>(tp[c]) / np[c];
      const double rc = ng[c] == 0 ? 0.0 : static_cast<double>(tp[c]) / ng[c];
      const double f = p + rc == 0.0 ? 0.0 : 2 * p * rc / (p + rc);
      r.per_class.push_back({c, f, ng[c]});
      sp += p;
      sr += rc;
    }
    const double k = static_cast<double>(r.per_class.size());
    r.extra["precision"] = k == 0 ? 1.0 : sp / k;
    r.extra["recall"] = k == 0 ? 1.0 : sr / k;
    finish_mean(r);
    out.push_back(std::move(r));
  }
  return out;
}

double foreground_miou(const LabelMap& segments, const LabelMap& figure) {
  const std::vector<std::uint32_t> cls = majority_labels(segments, figure, 2);
  LabelMap pred(segments.height, segments.width, 0, 2);
  for (std::size_t i = 0; i < segments.size(); ++i) pred.labels[i] = cls[segments.labels[i]];
  return region_miou(pred, figure, 2).mean;
}

double segment_retrieval(const LabelledFeatures& query, const LabelledFeatures& gallery, std::size_t k) {
  require(gallery.features.rows() > 0 && !gallery.labels.empty(), ErrorCode::EmptyGallery, "gallery is empty");
  require(query.features.cols() == gallery.features.cols(), ErrorCode::DimMismatch, "feature widths differ");
  require(query.labels.size() == query.features.rows() && gallery.labels.size() == gallery.features.rows(),
          ErrorCode::DimMismatch, "labels and features disagree in length");
  const std::size_t m = gallery.features.rows(), d = gallery.features.cols();
  k = std::min(std::max<std::size_t>(k, 1), m);
  std::size_t correct = 0;
  std::vector<std::pair<double, std::size_t>> sims(m);
  for (std::size_t q = 0; q < query.features.rows(); ++q) {
    for (std::size_t g = 0; g < m; ++g) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += query.features(q, c) * gallery.features(g, c);
      sims[g] = {-s, g};
    }
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end());
    std::map<std::uint32_t, std::pair<std::size_t, std::size_t>> votes;  // label -> (count, first rank)
    for (std::size_t r = 0; r < k; ++r) {
      auto [it, inserted] = votes.try_emplace(gallery.labels[sims[r].second], 0, r);
      ++it->second.first;
    }
    std::uint32_t best = 0;
    std::size_t best_count = 0, best_rank = k;
    for (const auto& [label, cr] : votes)
      if (cr.first > best_count || (cr.first == best_count && cr.second < best_rank)) {
        best = label;
        best_count = cr.first;
        best_rank = cr.second;
      }
    correct += best == query.labels[q];
  }
  return query.features.rows() == 0 ? 1.0 : static_cast<double>(correct) / query.features.rows();
}

FigureGround attention_figure_ground(const std::vector<std::vector<double>>& attention, const LabelMap& partition,
                                     double mass) {
  require(mass > 0.0 && mass < 1.0, ErrorCode::InvalidParameter, "mass must lie in (0, 1)");
  FigureGround out;
  out.combined = LabelMap(partition.height, partition.width, 0, 2);
  for (const auto& row : attention) {
    require(row.size() == partition.n_segments, ErrorCode::ShapeMismatch,
            "attention row has " + std::to_string(row.size()) + " entries for " +
                std::to_string(partition.n_segments) + " segments");
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::vector<bool> keep(row.size(), false);
    std::vector<std::uint32_t> kept;
    double acc = 0.0;
    for (std::size_t idx : order) {
      keep[idx] = true;
      kept.push_back(static_cast<std::uint32_t>(idx));
      acc += row[idx] / total;
      if (acc >= mass - 1e-12) break;
    }
    LabelMap mask(partition.height, partition.width, 0, 2);
    for (std::size_t i = 0; i < partition.size(); ++i)
      if (keep[partition.labels[i]]) {
        mask.labels[i] = 1;
        out.combined.labels[i] = 1;
      }
    out.per_head.push_back(std::move(mask));
    out.kept.push_back(std::move(kept));
  }
  return out;
}

void write_report_csv(const std::vector<MetricReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot write " + path.string());
  out << "metric,class,value\n" << std::setprecision(17);
  for (const auto& r : reports) {
    for (const auto& c : r.per_class) out << r.name << "," << c.cls << "," << c.value << "\n";
    out << r.name << ",mean," << r.mean << "\n";
    for (const auto& [k, v] : r.extra) out << r.name << "," << k << "," << v << "\n";
  }
}

void write_report_json(const std::vector<MetricReport>& reports, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& r : reports) {
    nlohmann::ordered_json e;
    e["mean"] = r.mean;
    for (const auto& [k, v] : r.extra) e[k] = v;
    nlohmann::ordered_json pc = nlohmann::ordered_json::object();
    for (const auto& c : r.per_class) pc[std::to_string(c.cls)] = {{"value", c.value}, {"support", c.support}};
    e["per_class"] = pc;
    j[r.name] = e;
  }
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace cast
