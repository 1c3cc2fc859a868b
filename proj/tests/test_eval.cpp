#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "cast/error.hpp"
#include "cast/eval.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

#include "json.hpp"

using namespace cast;

namespace {

LabelMap vertical_edge(std::size_t h, std::size_t w, std::size_t col) {
  LabelMap m(h, w, 0, 2);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = col; x < w; ++x) m.at(y, x) = 1;
  return m;
}

}  // namespace

TEST(RegionMiou, Fixtures) {
  Rng rng(1);
  LabelMap gt = fixture::voronoi_map(16, 16, 4, rng);
  EXPECT_EQ(region_miou(gt, gt, 4).mean, 1.0);

  LabelMap a(8, 8, 0, 2), b(8, 8, 1, 2);
  EXPECT_EQ(region_miou(a, b, 2).mean, 0.0);

  // one class; the prediction covers the left half only
  LabelMap full(8, 8, 0, 1), left(8, 8, 1, 1);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 4; ++x) left.at(y, x) = 0;
  EXPECT_EQ(region_miou(left, full, 1).mean, 0.5);
}

TEST(RegionMiou, SymmetricAndBounded) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    LabelMap a = fixture::voronoi_map(12, 12, 5, rng), b = fixture::voronoi_map(12, 12, 5, rng);
    const double ab = region_miou(a, b, 5).mean, ba = region_miou(b, a, 5).mean;
    EXPECT_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
  EXPECT_THROW(region_miou(LabelMap(4, 4), LabelMap(4, 5), 1), Error);
}

TEST(DistanceTransform, MatchesBruteForce) {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const std::size_t h = 5 + rng.below(20), w = 5 + rng.below(20);
    std::vector<bool> sites(h * w);
    for (std::size_t i = 0; i < h * w; ++i) sites[i] = rng.uniform() < 0.05;
    sites[rng.below(h * w)] = true;
    const auto dt = distance_transform(sites, h, w);
    const std::vector<bool> all(h * w, true);
    const auto brute = oracle::brute_force_min_distance(all, sites, h, w);
    for (std::size_t i = 0; i < h * w; ++i) EXPECT_NEAR(dt[i], brute[i], 1e-12);
  }
  const auto none = distance_transform(std::vector<bool>(9, false), 3, 3);
  EXPECT_TRUE(std::isinf(none[4]));
}

TEST(BoundaryF, Fixtures) {
  Rng rng(4);
  LabelMap m = fixture::voronoi_map(20, 20, 6, rng);
  EXPECT_EQ(boundary_fscore(m, m, 1.0).mean, 1.0);

  MetricReport r = boundary_fscore(LabelMap(20, 20, 0, 1), m, 1.0);
  EXPECT_EQ(r.extra.at("recall"), 0.0);
  EXPECT_EQ(r.mean, 0.0);
  EXPECT_THROW(boundary_fscore(LabelMap(4, 4), LabelMap(5, 4), 1.0), Error);
}

TEST(BoundaryF, ToleranceEdges) {
  for (double tol : {1.0, 2.0, 3.0, 5.0}) {
    const std::size_t shift = static_cast<std::size_t>(tol);
    LabelMap gt = vertical_edge(32, 32, 10);
    EXPECT_EQ(boundary_fscore(vertical_edge(32, 32, 10 + shift + 1), gt, tol).mean, 0.0) << tol;
    EXPECT_EQ(boundary_fscore(vertical_edge(32, 32, 10 + shift - 1), gt, tol).mean, 1.0) << tol;
  }
}

TEST(BoundaryF, SwapAndPermutationInvariance) {
  Rng rng(5);
  LabelMap a = fixture::voronoi_map(24, 24, 7, rng), b = fixture::voronoi_map(24, 24, 9, rng);
  MetricReport ab = boundary_fscore(a, b, 1.5), ba = boundary_fscore(b, a, 1.5);
  EXPECT_EQ(ab.extra.at("precision"), ba.extra.at("recall"));
  EXPECT_EQ(ab.extra.at("recall"), ba.extra.at("precision"));
  const std::vector<std::uint32_t> perm{6, 2, 0, 5, 1, 3, 4};
  EXPECT_EQ(boundary_fscore(remap(a, perm, 7), b, 1.5).mean, ab.mean);
  EXPECT_NEAR(default_boundary_tolerance(64, 64), 0.0075 * std::sqrt(2.0) * 64, 1e-12);
}

TEST(HierarchicalPrf, IdenticalLevels) {
  Rng rng(6);
  std::vector<LabelMap> gt{fixture::voronoi_map(16, 16, 6, rng), fixture::voronoi_map(16, 16, 3, rng)};
  auto reports = hierarchical_prf(gt, gt, 6);
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& r : reports) {
    EXPECT_EQ(r.mean, 1.0);
    EXPECT_EQ(r.extra.at("precision"), 1.0);
    EXPECT_EQ(r.extra.at("recall"), 1.0);
  }
}

TEST(HierarchicalPrf, HalfAreaInside) {
  // gt foreground: columns 4..11; prediction: a segment over columns 4..7 and one over the rest
  LabelMap gt(16, 16, 0, 2), pred(16, 16, 0, 2);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      gt.at(y, x) = (x >= 4 && x < 12) ? 1 : 0;
      pred.at(y, x) = (x >= 4 && x < 8) ? 1 : 0;
    }
  auto r = hierarchical_prf({pred}, {gt}, 2)[0];
  EXPECT_DOUBLE_EQ(r.extra.at("precision"), 1.0);
  EXPECT_DOUBLE_EQ(r.extra.at("recall"), 0.5);
  EXPECT_DOUBLE_EQ(r.mean, 2.0 / 3.0);
}

TEST(HierarchicalPrf, MatchesConfusionMatrixOracle) {
  Rng rng(7);
  const std::size_t n_classes = 4;
  std::vector<LabelMap> preds, gts;
  for (std::size_t n : {12, 6, 3}) {
    preds.push_back(fixture::voronoi_map(20, 20, n, rng));
    LabelMap g = fixture::voronoi_map(20, 20, 5, rng);
    for (auto& l : g.labels) l %= n_classes;
    g.n_segments = n_classes;
    gts.push_back(g);
  }
  auto reports = hierarchical_prf(preds, gts, n_classes);
  for (std::size_t l = 0; l < 3; ++l) {
    // majority class per predicted segment via a full segment x class table
    std::vector<std::vector<std::size_t>> table(preds[l].n_segments, std::vector<std::size_t>(n_classes, 0));
    for (std::size_t i = 0; i < 400; ++i) ++table[preds[l].labels[i]][gts[l].labels[i]];
    std::vector<std::uint32_t> cls(preds[l].n_segments);
    for (std::size_t s = 0; s < cls.size(); ++s)
      cls[s] = static_cast<std::uint32_t>(std::max_element(table[s].begin(), table[s].end()) - table[s].begin());
    std::vector<std::vector<double>> confusion(n_classes, std::vector<double>(n_classes, 0.0));  // [pred][gt]
    for (std::size_t i = 0; i < 400; ++i) confusion[cls[preds[l].labels[i]]][gts[l].labels[i]] += 1.0;
    double sp = 0, sr = 0, sf = 0, k = 0;
    for (std::size_t c = 1; c < n_classes; ++c) {
      double row = 0, col = 0;
      for (std::size_t o = 0; o < n_classes; ++o) row += confusion[c][o], col += confusion[o][c];
      if (row == 0 && col == 0) continue;
      const double p = row ? confusion[c][c] / row : 0, r = col ? confusion[c][c] / col : 0;
      sp += p, sr += r, sf += (p + r) ? 2 * p * r / (p + r) : 0, k += 1;
    }
    EXPECT_NEAR(reports[l].extra.at("precision"), sp / k, 1e-12);
    EXPECT_NEAR(reports[l].extra.at("recall"), sr / k, 1e-12);
    EXPECT_NEAR(reports[l].mean, sf / k, 1e-12);
  }
}

TEST(ForegroundMiou, MajorityLabelledSegments) {
  LabelMap fig(8, 8, 0, 2), seg(8, 8, 0, 2);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      fig.at(y, x) = x < 4 ? 1 : 0;
      seg.at(y, x) = x < 5 ? 0 : 1;  // segment 0 is mostly figure
    }
  // figure IoU 32/40, ground IoU 24/32
  EXPECT_DOUBLE_EQ(foreground_miou(seg, fig), (32.0 / 40.0 + 24.0 / 32.0) / 2.0);
}

TEST(Retrieval, Fixtures) {
  Rng rng(8);
  LabelledFeatures g;
  g.features = oracle::random_matrix(10, 3, rng);
  for (std::size_t r = 0; r < 10; ++r) {
    double n = 0;
    for (double v : g.features.row(r)) n += v * v;
    for (double& v : g.features.row(r)) v /= std::sqrt(n);
    g.labels.push_back(static_cast<std::uint32_t>(r));
  }
  EXPECT_EQ(segment_retrieval(g, g, 1), 1.0);

  LabelledFeatures two;
  two.features = Tensor::matrix(40, 2);
  for (std::size_t r = 0; r < 40; ++r) {
    const double a = (r < 20 ? 0.0 : 3.0) + rng.uniform(-0.2, 0.2);
    two.features(r, 0) = std::cos(a);
    two.features(r, 1) = std::sin(a);
    two.labels.push_back(r < 20 ? 0 : 1);
  }
  EXPECT_EQ(segment_retrieval(two, two, 20), 1.0);
  EXPECT_THROW(segment_retrieval(two, LabelledFeatures{}, 20), Error);
}

TEST(Retrieval, MatchesExhaustiveOracle) {
  Rng rng(9);
  for (int t = 0; t < 5; ++t) {
    LabelledFeatures q, g;
    q.features = oracle::random_matrix(30, 4, rng);
    g.features = oracle::random_matrix(30, 4, rng);
    for (Tensor* f : {&q.features, &g.features})
      for (std::size_t r = 0; r < 30; ++r) {
        double n = 0;
        for (double v : f->row(r)) n += v * v;
        for (double& v : f->row(r)) v /= std::sqrt(n);
      }
    for (int i = 0; i < 30; ++i) {
      q.labels.push_back(static_cast<std::uint32_t>(rng.below(3)));
      g.labels.push_back(static_cast<std::uint32_t>(rng.below(3)));
    }
    const std::size_t k = 5;
    std::size_t correct = 0;
    for (std::size_t a = 0; a < 30; ++a) {
      std::vector<std::size_t> order(30);
      std::iota(order.begin(), order.end(), 0);
      std::vector<double> dist(30);
      for (std::size_t b = 0; b < 30; ++b) {
        double s = 0;
        for (std::size_t c = 0; c < 4; ++c) s += (q.features(a, c) - g.features(b, c)) * (q.features(a, c) - g.features(b, c));
        dist[b] = s;
      }
      std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return dist[x] < dist[y]; });
      std::map<std::uint32_t, int> votes;
      for (std::size_t r = 0; r < k; ++r) ++votes[g.labels[order[r]]];
      int best = 0;
      for (auto [l, v] : votes) best = std::max(best, v);
      std::uint32_t pick = 0;
      for (std::size_t r = 0; r < k; ++r)
        if (votes[g.labels[order[r]]] == best) {
          pick = g.labels[order[r]];
          break;
        }
      correct += pick == q.labels[a];
    }
    EXPECT_NEAR(segment_retrieval(q, g, k), correct / 30.0, 1e-12);
  }
}

TEST(FigureGround, Fixtures) {
  LabelMap part = fixture::block_map(8, 8, 4);  // 4 segments
  FigureGround fg = attention_figure_ground({{0.25, 0.25, 0.25, 0.25}}, part, 0.6);
  EXPECT_EQ(fg.kept[0].size(), 3u);
  for (double mass : {0.1, 0.5, 0.99}) {
    FigureGround one = attention_figure_ground({{0.0, 0.0, 1.0, 0.0}}, part, mass);
    EXPECT_EQ(one.kept[0], std::vector<std::uint32_t>{2});
    EXPECT_EQ(one.combined.at(0, 0), 0u);
    EXPECT_EQ(one.combined.at(7, 0), 1u);
  }
  EXPECT_THROW(attention_figure_ground({{0.5, 0.5}}, part, 0.6), Error);
  EXPECT_THROW(attention_figure_ground({{0.25, 0.25, 0.25, 0.25}}, part, 1.0), Error);
}

TEST(FigureGround, MatchesSortScanOracle) {
  Rng rng(10);
  LabelMap part = fixture::voronoi_map(16, 16, 12, rng);
  std::vector<std::vector<double>> rows;
  for (int h = 0; h < 4; ++h) {
    std::vector<double> r(12);
    double s = 0;
    for (double& v : r) s += (v = std::exp(2.0 * rng.normal()));
    for (double& v : r) v /= s;
    rows.push_back(r);
  }
  FigureGround fg = attention_figure_ground(rows, part, 0.6);
  LabelMap uni(16, 16, 0, 2);
  for (std::size_t h = 0; h < 4; ++h) {
    std::vector<double> sorted = rows[h];
    std::sort(sorted.rbegin(), sorted.rend());
    double acc = 0;
    std::size_t keep = 0;
    while (acc < 0.6) acc += sorted[keep++];
    ASSERT_EQ(fg.kept[h].size(), keep);
    const double threshold = sorted[keep - 1];
    for (std::size_t i = 0; i < part.size(); ++i) {
      const bool on = rows[h][part.labels[i]] >= threshold;
      EXPECT_EQ(fg.per_head[h].labels[i], on ? 1u : 0u);
      if (on) uni.labels[i] = 1;
    }
  }
  EXPECT_EQ(fg.combined, uni);
}

TEST(Reports, CsvAndJson) {
  const auto dir = fixture::scratch_dir("eval_reports");
  LabelMap m(8, 8, 0, 1);
  std::vector<MetricReport> reports{region_miou(m, m, 1), boundary_fscore(m, m, 1.0)};
  write_report_csv(reports, dir / "r.csv");
  write_report_json(reports, dir / "r.json");
  std::ifstream csv(dir / "r.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "metric,class,value");
  std::ifstream js(dir / "r.json");
  auto j = nlohmann::json::parse(js);
  EXPECT_EQ(j["region_miou"]["mean"], 1.0);
  EXPECT_EQ(j["boundary_f"]["precision"], 1.0);
}
