#include "cast/model.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>

#include "cast/error.hpp"
#include "cast/kmeans.hpp"
#include "cast/nn.hpp"
#include "cast/superpixel.hpp"

namespace cast {

void init_encoder_block(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t mlp_hidden,
                        Rng& rng) {
  nn::init_layer_norm(store, prefix + ".ln1", d);
  nn::init_msa(store, prefix + ".attn", d, rng);
  nn::init_layer_norm(store, prefix + ".ln2", d);
  nn::init_mlp(store, prefix + ".mlp", d, mlp_hidden, d, rng);
}

Var encoder_block(Tape& tape, const ParamStore& store, const std::string& prefix, Var x, std::size_t heads,
                  std::vector<Tensor>* attention) {
  Var h = nn::msa(tape, store, prefix + ".attn", nn::layer_norm(tape, store, prefix + ".ln1", x), heads, attention);
  x = ad::add(x, h);
  h = nn::mlp(tape, store, prefix + ".mlp", nn::layer_norm(tape, store, prefix + ".ln2", x));
  return ad::add(x, h);
}

TokenSet encoder_block(Tape& tape, const ParamStore& store, const std::string& prefix, const TokenSet& z,
                       std::size_t heads, std::vector<Tensor>* attention) {
  return TokenSet{encoder_block(tape, store, prefix, z.tokens, heads, attention), z.level, z.partition_ref};
}

namespace {

Tensor row_block(const Tensor& t, std::size_t begin, std::size_t end) {
  Tensor out = Tensor::matrix(end - begin, t.cols());
  std::copy_n(t.data() + begin * t.cols(), out.size(), out.data());
  return out;
}

std::string block_name(std::size_t stage, std::size_t block) {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

// Compacts labels in order of first use of the (sorted) columns and returns
// compact -> column.
std::vector<std::size_t> compact_columns(std::vector<std::uint32_t>& labels, std::size_t n_columns) {
  std::vector<char> used(n_columns, 0);
  for (std::uint32_t l : labels) used[l] = 1;
  std::vector<std::uint32_t> to_new(n_columns, 0);
  std::vector<std::size_t> columns;
  for (std::size_t c = 0; c < n_columns; ++c)
    if (used[c]) {
      to_new[c] = static_cast<std::uint32_t>(columns.size());
      columns.push_back(c);
    }
  for (std::uint32_t& l : labels) l = to_new[l];
  return columns;
}

struct LevelBuilder {
  const LabelMap& s0_cells;
  const LabelMap& s0_pixels;

  HierarchyLevel level0(const Tensor& segment_tokens) const {
    const std::size_t n = s0_cells.n_segments;
    HierarchyLevel lv;
    lv.tokens = n;
    lv.composed = Tensor::matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) lv.composed(i, i) = 1.0;
    lv.cells = binary_segmentation(s0_cells);
    lv.segment_tokens = segment_tokens;
    lv.cell_map = lv.nested_cells = s0_cells;
    lv.pixel_map = lv.nested_pixels = s0_pixels;
    for (std::size_t i = 0; i < n; ++i) lv.nested_columns.push_back(i);
    return lv;
  }

  HierarchyLevel pooled(const HierarchyLevel& parent, std::size_t parent_index, const GraphPoolResult& r,
                        std::size_t requested) const {
    HierarchyLevel lv;
    lv.tokens = requested;
    lv.parent = parent_index;
    lv.assignment = r.assignment_matrix();
    lv.centroids = r.centroids;
    const Tensor& p = lv.assignment.data;
    const std::size_t m = p.cols();
    lv.composed = matmul(parent.composed, p);
    const Tensor seg_rows = row_block(r.coarse.tokens.value(), 1, r.coarse.tokens.rows());
    lv.segment_tokens = seg_rows;

    const std::size_t n_cells = s0_cells.size();
    lv.cells.height = s0_cells.height;
    lv.cells.width = s0_cells.width;
    lv.cells.data = Tensor::matrix(n_cells, m);
    for (std::size_t u = 0; u < n_cells; ++u)
      for (std::size_t c = 0; c < m; ++c) lv.cells.data(u, c) = lv.composed(s0_cells.labels[u], c);

    // Hard map from the composed soft segmentation. Every level-0 segment
    // owns at least one cell, so hardening per segment equals hardening per cell.
    const std::vector<std::size_t> win = argmax_rows(lv.composed);
    std::vector<std::uint32_t> hard(win.begin(), win.end());
    const std::size_t n_hard = compact_columns(hard, m).size();
    lv.cell_map = remap(s0_cells, hard, n_hard);
    lv.pixel_map = remap(s0_pixels, hard, n_hard);

    // Chained argmax through the parent's nested columns.
    const std::vector<std::size_t> up = argmax_rows(p);
    const std::vector<std::uint32_t> parent_seg0_label = segment_labels(parent);
    std::vector<std::uint32_t> nested(s0_cells.n_segments);
    for (std::size_t a = 0; a < nested.size(); ++a)
      nested[a] = static_cast<std::uint32_t>(up[parent.nested_columns[parent_seg0_label[a]]]);
    lv.nested_columns = compact_columns(nested, m);
    const std::size_t n_nested = lv.nested_columns.size();
    lv.nested_cells = remap(s0_cells, nested, n_nested);
    lv.nested_pixels = remap(s0_pixels, nested, n_nested);
    std::vector<std::uint32_t> col_to_compact(m, 0);
    for (std::size_t k = 0; k < n_nested; ++k) col_to_compact[lv.nested_columns[k]] = static_cast<std::uint32_t>(k);
    lv.nested_parent.resize(parent.nested_columns.size());
    for (std::size_t k = 0; k < parent.nested_columns.size(); ++k)
      lv.nested_parent[k] = col_to_compact[up[parent.nested_columns[k]]];
    return lv;
  }

  // Compact nested label of every level-0 segment at `lv`.
  std::vector<std::uint32_t> segment_labels(const HierarchyLevel& lv) const {
    std::vector<std::uint32_t> out(s0_cells.n_segments, 0);
    for (std::size_t u = 0; u < s0_cells.size(); ++u) out[s0_cells.labels[u]] = lv.nested_cells.labels[u];
    return out;
  }
};

}  // namespace

ParamStore init_cast_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ParamStore store;
  Rng rng = Rng::stream(seed, "cast-init");
  const std::size_t d = cfg.channels, hidden = cfg.mlp_hidden();
  StemConfig stem = cfg.stem;
  stem.out_channels = d;
  init_conv_stem(store, "stem", stem, rng);
  init_class_token(store, "cls_token", d, rng);
  for (std::size_t s = 0; s < cfg.depth_schedule.size(); ++s) {
    if (s > 0) init_graph_pool(store, "pool" + std::to_string(s), d, hidden, rng, cfg.kappa_init);
    for (std::size_t b = 0; b < cfg.depth_schedule[s].blocks; ++b) init_encoder_block(store, block_name(s, b), d, hidden, rng);
  }
  nn::init_layer_norm(store, "norm_final", d);
  nn::init_linear(store, "head", d, cfg.n_classes, rng);
  nn::init_linear(store, "fuse", cfg.depth_schedule.size() * d, d, rng);
  // Never trained; a zero output projection makes its grouping depend on
  // the token geometry alone.
  init_graph_pool(store, "extra_pool", d, hidden, rng, cfg.kappa_init, 0.0);
  return store;
}

CastOutput forward_cast(Tape& tape, const Image& image, const ModelConfig& cfg, const ParamStore& store,
                        const ForwardOptions& opts) {
  CastOutput out;
  Hierarchy& h = out.hierarchy;
  if (opts.superpixels) {
    require(opts.superpixels->height == image.height && opts.superpixels->width == image.width,
            ErrorCode::ShapeMismatch, "superpixel map does not match the image");
    h.superpixels = *opts.superpixels;
  } else {
    SuperpixelConfig sp = cfg.superpixel;
    sp.target_count = cfg.level0_count;
    h.superpixels = compute_superpixels(image, sp);
  }
  const FeatureGrid grid = conv_stem(tape, image, store, "stem");
  DownsampledPartition part = downsample_partition(h.superpixels, grid.stride);
  h.s0_cells = std::move(part.cells);
  h.s0_pixels = std::move(part.pixels);
  const LevelBuilder builder{h.s0_cells, h.s0_pixels};

  GraphPoolOptions pool_opts;
  pool_opts.heads = cfg.heads;
  pool_opts.selector = opts.selector;
  pool_opts.seed = opts.selector_seed;
  pool_opts.kappa_override = opts.kappa_override;

  TokenSet z = aggregate_tokens(tape, grid, h.s0_cells, store, "cls_token");
  std::vector<Var> level_tokens;
  std::vector<Var> assignments;
  for (std::size_t s = 0; s < cfg.depth_schedule.size(); ++s) {
    GraphPoolResult pooled;
    if (s > 0) {
      pooled = graph_pool(tape, z, cfg.depth_schedule[s].tokens, store, "pool" + std::to_string(s), pool_opts);
      z = pooled.coarse;
      z.level = s;
    }
    if (opts.record_attention) out.attention.emplace_back();
    for (std::size_t b = 0; b < cfg.depth_schedule[s].blocks; ++b) {
      std::vector<Tensor>* att = nullptr;
      if (opts.record_attention) att = &out.attention.back().emplace_back();
      z = encoder_block(tape, store, block_name(s, b), z, cfg.heads, att);
    }
    level_tokens.push_back(z.tokens);
    const Tensor seg = row_block(z.tokens.value(), 1, z.tokens.rows());
    if (s == 0) {
      h.levels.push_back(builder.level0(seg));
    } else {
      h.levels.push_back(builder.pooled(h.levels.back(), s - 1, pooled, cfg.depth_schedule[s].tokens));
      h.levels.back().segment_tokens = seg;
    }
  }

  const std::size_t n_levels = h.levels.size();
  std::vector<Var> fused;
  for (std::size_t l = 0; l < n_levels; ++l) {
    Var u = ad::slice_rows(level_tokens[l], 1, level_tokens[l].rows());
    for (std::size_t k = l; k >= 1; --k) u = unpool(u, h.levels[k].assignment);
    fused.push_back(u);
  }
  out.f_seg = nn::linear(tape, store, "fuse", ad::concat_cols(fused));
  out.tokens = z.tokens;
  out.f_class = nn::layer_norm(tape, store, "norm_final", ad::slice_rows(z.tokens, 0, 1));
  out.logits = nn::linear(tape, store, "head", out.f_class);

  // Inference-time pooling: each request pools the coarsest level that
  // still has more tokens.
  std::size_t last = 0;
  for (std::size_t i = 0; i < opts.extra_pool.size(); ++i) {
    const std::size_t m = opts.extra_pool[i];
    require(i == 0 || m < last, ErrorCode::InvalidParameter, "extra_pool counts must strictly decrease");
    last = m;
    std::size_t src = h.depth();
    for (std::size_t k = 0; k < h.depth(); ++k) {
      const std::size_t n = h.level(k).segment_tokens.rows();
      if (n > m && (src == h.depth() || n <= h.level(src).segment_tokens.rows())) src = k;
    }
    require(src < h.depth() && m >= 1, ErrorCode::MNotSmaller,
            "extra_pool count " + std::to_string(m) + " is not below any level");
    TokenSet from{level_tokens[src], src, 0};
    GraphPoolResult r = graph_pool(tape, from, m, store, "extra_pool", pool_opts);
    HierarchyLevel lv = builder.pooled(h.level(src), src, r, m);
    level_tokens.push_back(r.coarse.tokens);
    h.extra.push_back(std::move(lv));
  }
  return out;
}

ParamStore init_vit_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ParamStore store;
  Rng rng = Rng::stream(seed, "vit-init");
  const std::size_t d = cfg.channels, p = cfg.vit.patch;
  nn::init_linear(store, "patch_embed", 3 * p * p, d, rng);
  init_class_token(store, "cls_token", d, rng);
  for (std::size_t b = 0; b < cfg.vit.depth; ++b)
    init_encoder_block(store, "block" + std::to_string(b), d, cfg.mlp_hidden(), rng);
  nn::init_layer_norm(store, "norm_final", d);
  nn::init_linear(store, "head", d, cfg.n_classes, rng);
  return store;
}

Tensor patchify(const Image& image, std::size_t patch) {
  require(patch > 0 && image.height % patch == 0 && image.width % patch == 0, ErrorCode::ShapeMismatch,
          "image dimensions must be divisible by the patch size " + std::to_string(patch));
  const std::size_t gh = image.height / patch, gw = image.width / patch;
  Tensor t = Tensor::matrix(gh * gw, 3 * patch * patch);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      double* row = &t(py * gw + px, 0);
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx) {
          const std::uint8_t* c = image.pixel(py * patch + dy, px * patch + dx);
          for (std::size_t k = 0; k < 3; ++k) *row++ = c[k] / 255.0;
        }
    }
  return t;
}

VitOutput forward_vit(Tape& tape, const Image& image, const ModelConfig& cfg, const ParamStore& store,
                      bool record_attention) {
  const std::size_t p = cfg.vit.patch, d = cfg.channels;
  VitOutput out;
  Tensor patches = patchify(image, p);
  out.grid_h = image.height / p;
  out.grid_w = image.width / p;
  Var e = nn::linear(tape, store, "patch_embed", tape.constant(std::move(patches)));
  e = ad::add(e, tape.constant(sinusoidal_encoding_2d(out.grid_h, out.grid_w, d)));
  const Var parts[] = {tape.param(store, "cls_token"), e};
  Var x = ad::concat_rows(parts);
  for (std::size_t b = 0;; ++b) {
    const std::string name = "block" + std::to_string(b);
    if (!store.contains(name + ".ln1.gamma")) break;
    std::vector<Tensor>* att = nullptr;
    if (record_attention) att = &out.attention.emplace_back();
    x = encoder_block(tape, store, name, x, cfg.heads, att);
  }
  x = nn::layer_norm(tape, store, "norm_final", x);
  out.f_class = ad::slice_rows(x, 0, 1);
  out.tokens = ad::slice_rows(x, 1, x.rows());
  out.logits = nn::linear(tape, store, "head", out.f_class);
  return out;
}

std::vector<LabelMap> kmeans_fine_to_coarse(const Tensor& tokens, const std::vector<std::size_t>& counts,
                                            std::uint64_t seed, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t n = tokens.rows();
  if (grid_h == 0 && grid_w == 0) {
    grid_h = 1;
    grid_w = n;
  }
  require(grid_h * grid_w == n, ErrorCode::ShapeMismatch, "grid does not match the token count");
  require(!counts.empty() && counts[0] >= 1 && counts[0] <= n, ErrorCode::KOutOfRange,
          "first count must lie in [1, n]");
  for (std::size_t i = 1; i < counts.size(); ++i)
    require(counts[i] >= 1 && counts[i] < counts[i - 1], ErrorCode::KOutOfRange, "counts must strictly decrease");

  std::vector<LabelMap> out;
  std::vector<std::size_t> label(n);
  for (std::size_t i = 0; i < n; ++i) label[i] = i;
  Tensor points = tokens;
  for (std::size_t l = 0; l < counts.size(); ++l) {
    const KMeansResult r = kmeans(points, counts[l], SplitMix64(seed + l).next());
    LabelMap map(grid_h, grid_w, 0, counts[l]);
    for (std::size_t i = 0; i < n; ++i) {
      label[i] = r.assignment[label[i]];
      map.labels[i] = static_cast<std::uint32_t>(label[i]);
    }
    out.push_back(std::move(map));
    points = r.centroids;
  }
  return out;
}

void export_hierarchy(const Hierarchy& h, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < h.depth(); ++l)
    save_label_map(h.level(l).nested_pixels, dir / ("level" + std::to_string(l) + ".pgm"));
  std::ofstream csv(dir / "hierarchy.csv");
  require(static_cast<bool>(csv), ErrorCode::IoFailure, "cannot write " + (dir / "hierarchy.csv").string());
  csv << "level,child_id,parent_id,assignment_prob\n" << std::setprecision(17);
  for (std::size_t l = 1; l < h.depth(); ++l) {
    const HierarchyLevel& lv = h.level(l);
    const HierarchyLevel& parent = h.level(lv.parent);
    for (std::size_t c = 0; c < lv.nested_parent.size(); ++c) {
      const std::uint32_t q = lv.nested_parent[c];
      csv << l << ',' << c << ',' << q << ','
          << lv.assignment.data(parent.nested_columns[c], lv.nested_columns[q]) << '\n';
    }
  }
  require(static_cast<bool>(csv), ErrorCode::IoFailure, "write failed for hierarchy.csv");
}

std::vector<LabelMap> overlay_levels(const Hierarchy& h, std::size_t max_levels) {
  // Follow the parent chain from the deepest level so the result stays nested.
  std::vector<LabelMap> out;
  std::size_t l = h.depth() - 1;
  while (out.size() < max_levels) {
    out.push_back(h.level(l).nested_pixels);
    if (l == 0) break;
    l = h.level(l).parent;
  }
  return out;
}

}  // namespace cast
