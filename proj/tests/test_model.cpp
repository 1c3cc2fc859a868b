#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cast/config.hpp"
#include "cast/dataset.hpp"
#include "cast/error.hpp"
#include "cast/gradcheck.hpp"
#include "cast/model.hpp"
#include "cast/nn.hpp"
#include "cast/superpixel.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace cast;

namespace {

ModelConfig small_cfg(std::size_t d = 16) {
  ModelConfig cfg;
  cfg.channels = d;
  cfg.heads = 2;
  cfg.stem.out_channels = d;
  return cfg;
}

Tensor block_oracle(const Tensor& x, const ParamStore& s, const std::string& p, std::size_t heads) {
  auto v = [&](const std::string& n) { return s.value(p + "." + n); };
  Tensor h = oracle::naive_msa(oracle::naive_layer_norm(x, v("ln1.gamma"), v("ln1.beta")), v("attn.qkv.w"),
                               v("attn.qkv.b"), v("attn.proj.w"), v("attn.proj.b"), heads);
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += h[i];
  Tensor a = oracle::naive_matmul(oracle::naive_layer_norm(y, v("ln2.gamma"), v("ln2.beta")), v("mlp.fc1.w"));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) a(r, c) = oracle::naive_gelu(a(r, c) + v("mlp.fc1.b")[c]);
  Tensor m = oracle::naive_matmul(a, v("mlp.fc2.w"));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) y(r, c) += m(r, c) + v("mlp.fc2.b")[c];
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void expect_row_stochastic(const Tensor& t, double tol) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0.0;
    for (double v : t.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, tol) << "row " << r;
  }
}

std::size_t distinct(const LabelMap& m) { return std::set<std::uint32_t>(m.labels.begin(), m.labels.end()).size(); }

// Same partition up to relabelling.
bool same_partition(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
  std::map<std::uint32_t, std::uint32_t> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (ab.count(a[i]) && ab[a[i]] != b[i]) return false;
    if (ba.count(b[i]) && ba[b[i]] != a[i]) return false;
    ab[a[i]] = b[i];
    ba[b[i]] = a[i];
  }
  return true;
}

// Minimum-SSE partition of the rows into k groups, by enumeration.
std::vector<std::uint32_t> exhaustive_kmeans(const Tensor& pts, std::size_t k) {
  const std::size_t n = pts.rows(), d = pts.cols();
  std::vector<std::uint32_t> lab(n, 0), best;
  double best_sse = 1e300;
  std::size_t total = 1;
  for (std::size_t i = 0; i < n; ++i) total *= k;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < n; ++i, c /= k) lab[i] = static_cast<std::uint32_t>(c % k);
    std::vector<double> sum(k * d, 0.0), cnt(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      cnt[lab[i]] += 1;
      for (std::size_t j = 0; j < d; ++j) sum[lab[i] * d + j] += pts(i, j);
    }
    bool empty = false;
    for (double v : cnt) empty = empty || v == 0;
    if (empty) continue;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double e = pts(i, j) - sum[lab[i] * d + j] / cnt[lab[i]];
        sse += e * e;
      }
    if (sse < best_sse - 1e-12) {
      best_sse = sse;
      best = lab;
    }
  }
  return best;
}

}  // namespace

TEST(Config, DefaultsValidateAndRoundTrip) {
  Config c;
  EXPECT_NO_THROW(validate(c));
  Config back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, PaperScheduleAccepted) {
  nlohmann::json j = {{"model",
                       {{"depth_schedule", {{3, 196}, {3, 64}, {3, 32}, {2, 16}}},
                        {"level0_count", 196},
                        {"image_size", 224},
                        {"channels", 384},
                        {"heads", 6}}}};
  Config c = config_from_json(j);
  EXPECT_EQ(c.model.depth_schedule.size(), 4u);
  EXPECT_EQ(c.model.depth_schedule[1].tokens, 64u);
  EXPECT_EQ(c.model.levels(), 3u);
}

TEST(Config, RejectsBrokenInvariants) {
  auto expect_invalid = [](const nlohmann::json& j) {
    try {
      config_from_json(j);
      ADD_FAILURE() << j.dump();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::InvalidConfig) << j.dump();
    }
  };
  expect_invalid({{"model", {{"depth_schedule", {{3, 49}, {3, 49}}}}}});
  expect_invalid({{"model", {{"depth_schedule", {{3, 49}, {3, 60}}}}}});
  expect_invalid({{"model", {{"level0_count", 50}}}});
  expect_invalid({{"model", {{"heads", 5}}}});
  expect_invalid({{"model", {{"image_size", 62}}}});
  expect_invalid({{"model", {{"superpixel", {{"algorithm", "watershed"}}}}}});
  expect_invalid({{"model", {{"chanels", 8}}}});
  expect_invalid({{"train", {{"batch_size", "large"}}}});
}

TEST(Config, Overrides) {
  nlohmann::json j = to_json(Config{});
  j = apply_overrides(j, {"model.channels=16", "model.heads=2", "model.superpixel.algorithm=slic", "train.lr=0.5"});
  Config c = config_from_json(j);
  EXPECT_EQ(c.model.channels, 16u);
  EXPECT_EQ(c.model.stem.out_channels, 16u);
  EXPECT_EQ(c.model.superpixel.algorithm, SuperpixelAlgorithm::Slic);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.5);
  EXPECT_NE(config_hash(c), config_hash(Config{}));
  EXPECT_THROW(apply_overrides(j, {"model.width=3"}), Error);
  EXPECT_THROW(apply_overrides(j, {"model.channels"}), Error);
}

TEST(EncoderBlock, ZeroParamsIsIdentity) {
  ParamStore s;
  Rng rng(1);
  init_encoder_block(s, "b", 8, 16, rng);
  for (auto& [name, p] : s) std::fill(p.value.values().begin(), p.value.values().end(), 0.0);
  Tensor x = oracle::random_matrix(5, 8, rng);
  Tape tape;
  EXPECT_EQ(encoder_block(tape, s, "b", tape.constant(x), 2).value(), x);
}

TEST(EncoderBlock, SingleTokenValuePath) {
  ParamStore s;
  Rng rng(2);
  init_encoder_block(s, "b", 8, 16, rng);
  Tensor x = oracle::random_matrix(1, 8, rng);
  Tape tape;
  std::vector<Tensor> att;
  Tensor y = encoder_block(tape, s, "b", tape.constant(x), 2, &att).value();
  for (const Tensor& a : att) EXPECT_DOUBLE_EQ(a[0], 1.0);
  // With one token attention returns the value row: ln -> v -> proj.
  auto v = [&](const std::string& n) { return s.value("b." + n); };
  Tensor ln = oracle::naive_layer_norm(x, v("ln1.gamma"), v("ln1.beta"));
  Tensor qkv = oracle::naive_matmul(ln, v("attn.qkv.w"));
  Tensor val = Tensor::matrix(1, 8);
  for (std::size_t c = 0; c < 8; ++c) val[c] = qkv[16 + c] + v("attn.qkv.b")[16 + c];
  Tensor h = oracle::naive_matmul(val, v("attn.proj.w"));
  Tensor mid = x;
  for (std::size_t c = 0; c < 8; ++c) mid[c] += h[c] + v("attn.proj.b")[c];
  Tensor a = oracle::naive_matmul(oracle::naive_layer_norm(mid, v("ln2.gamma"), v("ln2.beta")), v("mlp.fc1.w"));
  for (std::size_t c = 0; c < a.cols(); ++c) a[c] = oracle::naive_gelu(a[c] + v("mlp.fc1.b")[c]);
  Tensor m = oracle::naive_matmul(a, v("mlp.fc2.w"));
  for (std::size_t c = 0; c < 8; ++c) mid[c] += m[c] + v("mlp.fc2.b")[c];
  EXPECT_LT(max_abs_diff(y, mid), 1e-12);
}

TEST(EncoderBlock, MatchesOpOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore s;
    Rng rng(100 + seed);
    init_encoder_block(s, "b", 8, 32, rng);
    for (auto& [name, p] : s)
      if (name.find("gamma") != std::string::npos || name.find("beta") != std::string::npos || name.ends_with(".b"))
        for (double& x : p.value.values()) x = rng.uniform(-0.5, 1.5);
    Tensor x = oracle::random_matrix(5, 8, rng);
    Tape tape;
    Tensor y = encoder_block(tape, s, "b", tape.constant(x), 4).value();
    EXPECT_LT(max_abs_diff(y, block_oracle(x, s, "b", 4)), 1e-12);
  }
}

TEST(ForwardCast, DeskScheduleShapesAndInvariants) {
  const ModelConfig cfg = small_cfg(32);
  ParamStore store = init_cast_model(cfg, 3);
  const std::vector<SynthSample> data = synth_dataset(5, 3);
  for (const SynthSample& sample : data) {
    Tape tape;
    CastOutput out = forward_cast(tape, sample.image, cfg, store);
    const Hierarchy& h = out.hierarchy;
    ASSERT_EQ(h.levels.size(), 4u);
    const std::size_t n0 = h.s0_cells.n_segments;
    EXPECT_EQ(out.f_class.shape(), (Shape{1, 32}));
    EXPECT_EQ(out.logits.shape(), (Shape{1, 3}));
    EXPECT_EQ(out.f_seg.shape(), (Shape{n0, 32}));
    EXPECT_EQ(out.tokens.rows(), 5u);
    EXPECT_EQ(h.s0_cells.height, 16u);
    const std::size_t expected[] = {n0, 16, 8, 4};
    for (std::size_t l = 0; l < 4; ++l) {
      const HierarchyLevel& lv = h.levels[l];
      EXPECT_EQ(lv.nested_cells.n_segments, expected[l]) << "level " << l;
      EXPECT_EQ(distinct(lv.nested_cells), expected[l]);
      EXPECT_EQ(distinct(lv.nested_pixels), expected[l]);
      EXPECT_LE(lv.cell_map.n_segments, expected[l]);
      EXPECT_EQ(lv.segment_tokens.rows(), expected[l]);
      EXPECT_EQ(lv.composed.shape(), (Shape{n0, expected[l]}));
      expect_row_stochastic(lv.composed, 1e-9);
      expect_row_stochastic(lv.cells.data, 1e-9);
      if (l == 0) continue;
      EXPECT_EQ(lv.assignment.rows(), expected[l - 1]);
      expect_row_stochastic(lv.assignment.data, 1e-9);
      EXPECT_NO_THROW(parent_table(h.levels[l - 1].nested_pixels, lv.nested_pixels));
      EXPECT_NO_THROW(parent_table(h.levels[l - 1].nested_cells, lv.nested_cells));
      const NestednessReport rep = check_nestedness(h.levels[l - 1].cells, lv.assignment);
      EXPECT_LT(rep.degenerate * 100, rep.units);
    }
  }
}

TEST(ForwardCast, SingleStageFusesLevelZero) {
  ModelConfig cfg = small_cfg();
  cfg.depth_schedule = {{2, 49}};
  ParamStore store = init_cast_model(cfg, 4);
  const SynthSample sample = synth_sample(1, 0, 1);
  Tape tape;
  CastOutput out = forward_cast(tape, sample.image, cfg, store);
  ASSERT_EQ(out.hierarchy.levels.size(), 1u);
  Tensor z0 = out.hierarchy.levels[0].segment_tokens;
  Tensor expect = oracle::naive_matmul(z0, store.value("fuse.w"));
  for (std::size_t r = 0; r < expect.rows(); ++r)
    for (std::size_t c = 0; c < expect.cols(); ++c) expect(r, c) += store.value("fuse.b")[c];
  EXPECT_LT(max_abs_diff(out.f_seg.value(), expect), 1e-12);
}

TEST(ForwardCast, FusedFeatureIsUnpooledConcatenation) {
  const ModelConfig cfg = small_cfg();
  ParamStore store = init_cast_model(cfg, 5);
  const SynthSample sample = synth_sample(2, 1, 2);
  Tape tape;
  CastOutput out = forward_cast(tape, sample.image, cfg, store);
  const Hierarchy& h = out.hierarchy;
  const std::size_t n0 = h.s0_cells.n_segments, d = 16, L = h.levels.size();
  Tensor cat = Tensor::matrix(n0, L * d);
  for (std::size_t a = 0; a < n0; ++a) {
    std::size_t row = a;
    for (std::size_t l = 0; l < L; ++l) {
      if (l > 0) row = oracle::scan_argmax(h.levels[l].assignment.data)[row];
      for (std::size_t c = 0; c < d; ++c) cat(a, l * d + c) = h.levels[l].segment_tokens(row, c);
    }
  }
  Tensor expect = oracle::naive_matmul(cat, store.value("fuse.w"));
  for (std::size_t r = 0; r < n0; ++r)
    for (std::size_t c = 0; c < d; ++c) expect(r, c) += store.value("fuse.b")[c];
  EXPECT_LT(max_abs_diff(out.f_seg.value(), expect), 1e-12);
}

TEST(ForwardCast, PrecomputedSuperpixelsAndDeterminism) {
  const ModelConfig cfg = small_cfg();
  ParamStore store = init_cast_model(cfg, 6);
  const SynthSample sample = synth_sample(3, 4, 0);
  const LabelMap sp = fixture::block_map(64, 64, 8);
  Tape t1, t2;
  ForwardOptions opts;
  opts.superpixels = &sp;
  CastOutput a = forward_cast(t1, sample.image, cfg, store, opts);
  CastOutput b = forward_cast(t2, sample.image, cfg, store, opts);
  EXPECT_EQ(a.hierarchy.superpixels, sp);
  EXPECT_EQ(a.hierarchy.s0_cells.n_segments, 64u);
  EXPECT_EQ(a.logits.value(), b.logits.value());
  EXPECT_EQ(a.hierarchy.levels.back().nested_pixels, b.hierarchy.levels.back().nested_pixels);
  const LabelMap wrong = fixture::block_map(32, 32, 8);
  opts.superpixels = &wrong;
  Tape t3;
  EXPECT_THROW(forward_cast(t3, sample.image, cfg, store, opts), Error);
}

TEST(ForwardCast, ExtraPoolingLevels) {
  const ModelConfig cfg = small_cfg();
  ParamStore store = init_cast_model(cfg, 7);
  const SynthSample sample = synth_sample(4, 2, 1);
  Tape tape;
  ForwardOptions opts;
  opts.extra_pool = {12, 2};
  CastOutput out = forward_cast(tape, sample.image, cfg, store, opts);
  const Hierarchy& h = out.hierarchy;
  ASSERT_EQ(h.extra.size(), 2u);
  EXPECT_EQ(h.extra[0].parent, 1u);  // 16 tokens: the coarsest level with more than 12
  EXPECT_EQ(h.extra[1].parent, 3u);
  EXPECT_EQ(h.extra[0].nested_cells.n_segments, 12u);
  EXPECT_EQ(h.extra[1].nested_cells.n_segments, 2u);
  EXPECT_NO_THROW(parent_table(h.levels[3].nested_pixels, h.extra[1].nested_pixels));
  expect_row_stochastic(h.extra[0].composed, 1e-9);
  EXPECT_EQ(h.depth(), 6u);

  Tape t2;
  opts.extra_pool = {8, 8};
  EXPECT_THROW(forward_cast(t2, sample.image, cfg, store, opts), Error);
  Tape t3;
  opts.extra_pool = {500};
  EXPECT_THROW(forward_cast(t3, sample.image, cfg, store, opts), Error);
}

TEST(ForwardCast, AttentionRecording) {
  const ModelConfig cfg = small_cfg();
  ParamStore store = init_cast_model(cfg, 8);
  const SynthSample sample = synth_sample(5, 0, 0);
  Tape tape;
  ForwardOptions opts;
  opts.record_attention = true;
  CastOutput out = forward_cast(tape, sample.image, cfg, store, opts);
  ASSERT_EQ(out.attention.size(), 4u);
  EXPECT_EQ(out.attention[0].size(), 3u);
  EXPECT_EQ(out.attention[3].size(), 2u);
  const std::size_t n0 = out.hierarchy.s0_cells.n_segments;
  EXPECT_EQ(out.attention[0][2].size(), 2u);
  EXPECT_EQ(out.attention[0][2][0].shape(), (Shape{n0 + 1, n0 + 1}));
  expect_row_stochastic(out.attention[1][0][1], 1e-12);
}

TEST(ForwardCast, FullModelGradCheck) {
  const ModelConfig cfg = small_cfg(16);
  ParamStore store = init_cast_model(cfg, 9);
  store.set_all_trainable(true);
  for (auto& [name, p] : store)
    if (name.starts_with("extra_pool")) p.trainable = false;
  const SynthSample sample = synth_sample(6, 3, 1);
  const LabelMap sp = compute_superpixels(sample.image, cfg.superpixel);
  Rng rng(9);
  const Tensor w = oracle::random_matrix(downsample_partition(sp, kStemStride).cells.n_segments, 16, rng);
  auto build = [&](Tape& t, const ParamStore& s) {
    ForwardOptions opts;
    opts.superpixels = &sp;
    CastOutput out = forward_cast(t, sample.image, cfg, s, opts);
    const std::size_t label[] = {sample.class_label};
    Var ce = ad::cross_entropy(out.logits, label);
    return ad::add(ce, ad::mean(ad::mul(out.f_seg, t.constant(w))));
  };
  GradCheckOptions gopts;
  gopts.tolerance = 1e-3;
  gopts.max_entries_per_param = 2;
  const GradCheckReport r = grad_check(store, build, gopts);
  EXPECT_TRUE(r.passed) << r.worst.name << "[" << r.worst.index << "] " << r.max_rel_error << " analytic "
                        << r.worst.analytic << " numeric " << r.worst.numeric;
  EXPECT_GT(r.checked, 100u);
}

TEST(Vit, ShapesAndZeroImage) {
  ModelConfig cfg = small_cfg();
  ParamStore store = init_vit_model(cfg, 1);
  const SynthSample sample = synth_sample(1, 1, 0);
  Tape tape;
  VitOutput out = forward_vit(tape, sample.image, cfg, store);
  EXPECT_EQ(out.tokens.shape(), (Shape{64, 16}));
  EXPECT_EQ(out.f_class.shape(), (Shape{1, 16}));
  EXPECT_EQ(out.grid_h, 8u);

  Tape t2;
  Tensor patches = patchify(Image(64, 64, 0), 8);
  EXPECT_EQ(patches.shape(), (Shape{64, 192}));
  Var e = nn::linear(t2, store, "patch_embed", t2.constant(patches));
  for (double v : e.value().values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(patchify(Image(60, 64), 8), Error);
}

TEST(Vit, PatchLayout) {
  Image img(16, 16, 0);
  img.pixel(9, 2)[1] = 255;  // patch (1, 0), dy 1, dx 2, green
  Tensor p = patchify(img, 8);
  EXPECT_EQ(p(2, (1 * 8 + 2) * 3 + 1), 1.0);
  double total = 0.0;
  for (double v : p.values()) total += v;
  EXPECT_EQ(total, 1.0);
}

TEST(Vit, OneBlockMatchesEncoderBlock) {
  ModelConfig cfg = small_cfg();
  cfg.vit.depth = 1;
  ParamStore store = init_vit_model(cfg, 2);
  const SynthSample sample = synth_sample(2, 2, 2);
  Tape tape;
  VitOutput out = forward_vit(tape, sample.image, cfg, store);

  Tensor e = oracle::naive_matmul(patchify(sample.image, 8), store.value("patch_embed.w"));
  const Tensor pe = sinusoidal_encoding_2d(8, 8, 16);
  Tensor x = Tensor::matrix(65, 16);
  for (std::size_t c = 0; c < 16; ++c) x(0, c) = store.value("cls_token")[c];
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 16; ++c) x(r + 1, c) = e(r, c) + store.value("patch_embed.b")[c] + pe(r, c);
  Tensor y = oracle::naive_layer_norm(block_oracle(x, store, "block0", 2), store.value("norm_final.gamma"),
                                      store.value("norm_final.beta"));
  Tensor tokens = Tensor::matrix(64, 16);
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 16; ++c) tokens(r, c) = y(r + 1, c);
  EXPECT_LT(max_abs_diff(out.tokens.value(), tokens), 1e-12);
}

TEST(KMeansHierarchy, IdenticalPointsExhaustRestarts) {
  Tensor pts = Tensor::matrix(6, 2, 0.5);
  try {
    kmeans_fine_to_coarse(pts, {2, 1}, 0);
    FAIL() << "expected EmptyCluster";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyCluster);
  }
}

TEST(KMeansHierarchy, SeparatedBlobsMatchExhaustiveOracle) {
  Rng rng(5);
  const double centers[4][2] = {{0, 0}, {1, 0}, {20, 0}, {21, 0}};
  Tensor pts = Tensor::matrix(8, 2);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 2; ++j) pts(i, j) = centers[i % 4][j] + rng.uniform(-0.05, 0.05);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto maps = kmeans_fine_to_coarse(pts, {4, 2}, seed);
    ASSERT_EQ(maps.size(), 2u);
    EXPECT_TRUE(same_partition(maps[0].labels, exhaustive_kmeans(pts, 4)));
    EXPECT_TRUE(same_partition(maps[1].labels, {0, 0, 1, 1, 0, 0, 1, 1}));
  }
  // the second level equals the optimal 2-way grouping of the level-0 means
  Tensor means = Tensor::matrix(4, 2);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t j = 0; j < 2; ++j) means(b, j) = 0.5 * (pts(b, j) + pts(b + 4, j));
  EXPECT_TRUE(same_partition(exhaustive_kmeans(means, 2), {0, 0, 1, 1}));
}

TEST(KMeansHierarchy, NestedOnRandomTokens) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor pts = oracle::random_matrix(64, 16, rng);
    auto maps = kmeans_fine_to_coarse(pts, {8, 4, 2}, seed, 8, 8);
    ASSERT_EQ(maps.size(), 3u);
    EXPECT_EQ(maps[0].height, 8u);
    for (std::size_t l = 1; l < 3; ++l) EXPECT_NO_THROW(parent_table(maps[l - 1], maps[l]));
    EXPECT_EQ(distinct(maps[2]), 2u);
  }
  Tensor pts = Tensor::matrix(4, 2);
  EXPECT_THROW(kmeans_fine_to_coarse(pts, {5}, 0), Error);
  EXPECT_THROW(kmeans_fine_to_coarse(pts, {2, 2}, 0), Error);
}

TEST(Export, HierarchyFiles) {
  const ModelConfig cfg = small_cfg();
  ParamStore store = init_cast_model(cfg, 10);
  const SynthSample sample = synth_sample(7, 0, 2);
  Tape tape;
  CastOutput out = forward_cast(tape, sample.image, cfg, store);
  const auto dir = fixture::scratch_dir("export_hierarchy");
  export_hierarchy(out.hierarchy, dir);
  for (std::size_t l = 0; l < 4; ++l) {
    LabelMap m = load_label_map(dir / ("level" + std::to_string(l) + ".pgm"));
    EXPECT_EQ(m.labels, out.hierarchy.levels[l].nested_pixels.labels);
  }
  std::ifstream csv(dir / "hierarchy.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "level,child_id,parent_id,assignment_prob");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string level, child, parent, prob;
    std::getline(ss, level, ',');
    std::getline(ss, child, ',');
    std::getline(ss, parent, ',');
    std::getline(ss, prob, ',');
    const std::size_t l = std::stoul(level);
    const HierarchyLevel& lv = out.hierarchy.levels[l];
    EXPECT_EQ(lv.nested_parent[std::stoul(child)], std::stoul(parent));
    const double pv = std::stod(prob);
    EXPECT_GT(pv, 0.0);
    EXPECT_LE(pv, 1.0);
    ++rows;
  }
  std::size_t expected = 0;
  for (std::size_t l = 0; l < 3; ++l) expected += out.hierarchy.levels[l].nested_cells.n_segments;
  EXPECT_EQ(rows, expected);

  const auto overlay = overlay_levels(out.hierarchy);
  ASSERT_EQ(overlay.size(), 3u);
  EXPECT_EQ(overlay[0].n_segments, 4u);
  EXPECT_NO_THROW(render_hierarchy_overlay(sample.image, overlay));
}
