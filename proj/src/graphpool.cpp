#include "cast/graphpool.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cast/error.hpp"
#include "cast/kmeans.hpp"
#include "cast/nn.hpp"

namespace cast {

SoftSegmentation binary_segmentation(const LabelMap& map) {
  SoftSegmentation s{Tensor::matrix(map.size(), map.n_segments), map.height, map.width};
  for (std::size_t i = 0; i < map.size(); ++i) {
    require(map.labels[i] < map.n_segments, ErrorCode::ShapeMismatch, "label outside [0, n_segments)");
    s.data(i, map.labels[i]) = 1.0;
  }
  return s;
}

std::vector<std::size_t> fps(const Tensor& points, std::size_t k, std::size_t start) {
  const std::size_t n = points.rows(), d = points.cols();
  require(k >= 1 && k <= n, ErrorCode::KOutOfRange,
          "fps needs 1 <= k <= n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  require(start < n, ErrorCode::KOutOfRange, "fps start index out of range");
  std::vector<std::size_t> chosen{start};
  chosen.reserve(k);
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  taken[start] = true;
  std::size_t last = start;
  while (chosen.size() < k) {
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      mind[i] = std::min(mind[i], squared_distance(points.data() + i * d, points.data() + last * d, d));
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    taken[best] = true;
    chosen.push_back(best);
    last = best;
  }
  return chosen;
}

namespace {

std::vector<std::size_t> nearest_unique(const Tensor& points, const Tensor& centers) {
  const std::size_t n = points.rows(), d = points.cols();
  std::vector<bool> taken(n, false);
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < centers.rows(); ++c) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double dist = squared_distance(points.data() + i * d, centers.data() + c * d, d);
      if (dist < best_d) {
        best_d = dist;
        best = i;
      }
    }
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

std::vector<std::size_t> kmedoids(const Tensor& points, std::size_t k) {
  const std::size_t n = points.rows(), d = points.cols();
  std::vector<std::size_t> medoids = fps(points, k, 0);
  std::vector<std::size_t> assign(n);
  for (int it = 0; it < 20; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = squared_distance(points.data() + i * d, points.data() + medoids[c] * d, d);
        if (dist < best) {
          best = dist;
          assign[i] = c;
        }
      }
    }
    bool changed = false;
    for (std::size_t c = 0; c < k; ++c) {
      std::size_t best = medoids[c];
      double best_cost = std::numeric_limits<double>::infinity();
      for (std::size_t cand = 0; cand < n; ++cand) {
        if (assign[cand] != c) continue;
        double cost = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          if (assign[i] == c) cost += std::sqrt(squared_distance(points.data() + i * d, points.data() + cand * d, d));
        if (cost < best_cost) {
          best_cost = cost;
          best = cand;
        }
      }
      changed = changed || best != medoids[c];
      medoids[c] = best;
    }
    if (!changed) break;
  }
  return medoids;
}

}  // namespace

std::vector<std::size_t> select_centroids(const Tensor& points, std::size_t k, CentroidSelector selector,
                                          std::uint64_t seed) {
  const std::size_t n = points.rows();
  require(k >= 1 && k <= n, ErrorCode::KOutOfRange, "centroid count must lie in [1, n]");
  switch (selector) {
    case CentroidSelector::Fps:
      return fps(points, k, 0);
    case CentroidSelector::Random: {
      Rng rng = Rng::stream(seed, "centroids.random");
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(k);
      return idx;
    }
    case CentroidSelector::KMeans:
      try {
        return nearest_unique(points, kmeans(points, k, seed).centroids);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::EmptyCluster) throw;
        return fps(points, k, 0);
      }
    case CentroidSelector::KMedoids:
      return kmedoids(points, k);
    case CentroidSelector::Significance: {
      std::vector<double> norm(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (double v : points.row(i)) norm[i] += v * v;
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return norm[a] > norm[b]; });
      idx.resize(k);
      return idx;
    }
  }
  return fps(points, k, 0);
}

void init_graph_pool(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t mlp_hidden, Rng& rng,
                     double kappa, double attn_out_gain) {
  nn::init_msa(store, prefix + ".attn", d, rng, attn_out_gain);
  store.add(prefix + ".bias", Tensor::matrix(1, d));
  nn::init_mlp(store, prefix + ".mlp", d, mlp_hidden, d, rng);
  store.add(prefix + ".kappa", Tensor::matrix(1, 1, kappa));
}

GraphPoolResult graph_pool(Tape& tape, const TokenSet& z, std::size_t m, const ParamStore& store,
                           const std::string& prefix, const GraphPoolOptions& opts) {
  const std::size_t n = z.segment_count();
  require(m >= 1 && m <= n, ErrorCode::MNotSmaller,
          "cannot pool " + std::to_string(n) + " segments into " + std::to_string(m));
  Var cls = ad::slice_rows(z.tokens, 0, 1);
  Var seg = ad::slice_rows(z.tokens, 1, n + 1);

  std::vector<std::size_t> centroids = select_centroids(seg.value(), m, opts.selector, opts.seed);

  Var u = ad::add(nn::msa(tape, store, prefix + ".attn", seg, opts.heads), seg);
  u = ad::sub(u, ad::gather_rows(ad::mean_rows(u), std::vector<std::size_t>(n, 0)));
  u = ad::add_rowvec(u, tape.param(store, prefix + ".bias"));
  Var v = ad::gather_rows(u, centroids);
  Var sim = ad::matmul_nt(ad::normalize_rows(u), ad::normalize_rows(v));
  Var kappa;
  if (opts.kappa_override) {
    kappa = tape.constant(Tensor::matrix(1, 1, *opts.kappa_override));
  } else {
    kappa = tape.param(store, prefix + ".kappa");
    require(kappa.value()[0] > 0.0, ErrorCode::InvalidParameter, prefix + ".kappa must be positive");
  }
  Var p = ad::softmax_rows(ad::scale_by(sim, kappa));

  Var projected = nn::mlp(tape, store, prefix + ".mlp", seg);
  Var pt = ad::transpose(p);
  Var pooled = ad::div_rows(ad::matmul(pt, projected), ad::transpose(ad::sum_rows(p)));
  Var y = ad::add(ad::gather_rows(seg, centroids), pooled);
  const Var parts[] = {cls, y};
  return GraphPoolResult{TokenSet{ad::concat_rows(parts), z.level + 1, z.partition_ref}, p, std::move(centroids)};
}

SoftSegmentation compose(const SoftSegmentation& prev, const AssignmentMatrix& p) {
  require(prev.cols() == p.rows(), ErrorCode::ShapeMismatch,
          "compose: " + std::to_string(prev.cols()) + " segments vs " + std::to_string(p.rows()) + " assignment rows");
  return SoftSegmentation{matmul(prev.data, p.data), prev.height, prev.width};
}

std::vector<std::size_t> argmax_rows(const Tensor& m) {
  std::vector<std::size_t> out(m.rows(), 0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

Hardened harden(const SoftSegmentation& s) {
  const auto arg = argmax_rows(s.data);
  const bool spatial = s.height * s.width == s.units() && s.units() > 0;
  Hardened h;
  h.labels = LabelMap(spatial ? s.height : s.units(), spatial ? s.width : 1, 0, s.cols());
  for (std::size_t u = 0; u < arg.size(); ++u) h.labels.labels[u] = static_cast<std::uint32_t>(arg[u]);
  h.old_to_new.assign(s.cols(), -1);
  for (auto a : arg) h.old_to_new[a] = 0;
  std::int64_t next = 0;
  for (auto& v : h.old_to_new)
    if (v == 0) v = next++;
  for (auto& l : h.labels.labels) l = static_cast<std::uint32_t>(h.old_to_new[l]);
  h.labels.n_segments = static_cast<std::size_t>(next);
  return h;
}

Tensor unpool(const Tensor& coarse, const AssignmentMatrix& p) {
  require(p.cols() == coarse.rows(), ErrorCode::ShapeMismatch, "unpool: assignment columns != coarse rows");
  const auto arg = argmax_rows(p.data);
  const std::size_t d = coarse.cols();
  Tensor out = Tensor::matrix(p.rows(), d);
  for (std::size_t a = 0; a < arg.size(); ++a) std::copy_n(coarse.data() + arg[a] * d, d, out.data() + a * d);
  return out;
}

Var unpool(Var coarse, const AssignmentMatrix& p) {
  require(p.cols() == coarse.rows(), ErrorCode::ShapeMismatch, "unpool: assignment columns != coarse rows");
  return ad::gather_rows(coarse, argmax_rows(p.data));
}

NestednessReport check_nestedness(const SoftSegmentation& fine, const AssignmentMatrix& p, double margin) {
  const SoftSegmentation coarse = compose(fine, p);
  const auto fine_arg = argmax_rows(fine.data);
  const auto coarse_arg = argmax_rows(coarse.data);
  const auto p_arg = argmax_rows(p.data);
  NestednessReport r;
  r.units = fine.units();
  for (std::size_t u = 0; u < r.units; ++u) {
    auto row = fine.data.row(u);
    double second = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < row.size(); ++c)
      if (c != fine_arg[u]) second = std::max(second, row[c]);
    if (row.size() > 1 && row[fine_arg[u]] - second <= margin) {
      ++r.degenerate;
      continue;
    }
    if (coarse_arg[u] == p_arg[fine_arg[u]]) ++r.consistent;
  }
  return r;
}

}  // namespace cast
