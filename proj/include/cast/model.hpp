#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cast/autodiff.hpp"
#include "cast/config.hpp"
#include "cast/graphpool.hpp"
#include "cast/pixelio.hpp"
#include "cast/tokenizer.hpp"

namespace cast {

/// Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.)).
/// Parameters prefix.ln1, prefix.attn, prefix.ln2, prefix.mlp.
void init_encoder_block(ParamStore& store, const std::string& prefix, std::size_t d, std::size_t mlp_hidden, Rng& rng);
Var encoder_block(Tape& tape, const ParamStore& store, const std::string& prefix, Var x, std::size_t heads,
                  std::vector<Tensor>* attention = nullptr);
TokenSet encoder_block(Tape& tape, const ParamStore& store, const std::string& prefix, const TokenSet& z,
                       std::size_t heads, std::vector<Tensor>* attention = nullptr);

/// Registers stem, cls_token, stage{s}.block{b}, pool{s}, norm_final, head,
/// fuse and extra_pool.
ParamStore init_cast_model(const ModelConfig& cfg, std::uint64_t seed);

struct HierarchyLevel {
  std::size_t tokens = 0;  // configured (or requested) segment count
  AssignmentMatrix assignment;  // P_l, rows: segments of `parent`; empty at level 0
  std::size_t parent = 0;       // index of the level this one pools
  std::vector<std::size_t> centroids;
  /// Level-0 segments -> segments of this level (product of the P chain).
  Tensor composed;
  SoftSegmentation cells;  // S_l over stem cells
  Tensor segment_tokens;   // Z_l without the class token
  /// harden(S_l), painted at cell and pixel resolution.
  LabelMap cell_map;
  LabelMap pixel_map;
  /// Chained argmax: every segment of the parent goes to its argmax parent.
  /// Nested across levels by construction.
  LabelMap nested_cells;
  LabelMap nested_pixels;
  /// Compact nested id at the parent level -> compact nested id here.
  std::vector<std::uint32_t> nested_parent;
  /// Compact nested id -> column of P (token row) it stands for.
  std::vector<std::size_t> nested_columns;
};

struct Hierarchy {
  LabelMap superpixels;  // raw superpixels at pixel resolution
  LabelMap s0_cells;     // after majority downsampling
  LabelMap s0_pixels;    // pixel map consistent with s0_cells
  std::vector<HierarchyLevel> levels;  // levels[0] is the superpixel level
  /// Levels added by extra pooling (their `parent` indexes into levels, or
  /// into extra when >= levels.size()).
  std::vector<HierarchyLevel> extra;

  const HierarchyLevel& level(std::size_t i) const {
    return i < levels.size() ? levels[i] : extra.at(i - levels.size());
  }
  std::size_t depth() const { return levels.size() + extra.size(); }
};

struct ForwardOptions {
  /// Precomputed superpixels; computed from the config otherwise.
  const LabelMap* superpixels = nullptr;
  /// Token counts of inference-time pooling levels, strictly decreasing.
  std::vector<std::size_t> extra_pool;
  bool record_attention = false;
  CentroidSelector selector = CentroidSelector::Fps;
  std::uint64_t selector_seed = 0;
  std::optional<double> kappa_override;
};

struct CastOutput {
  Var f_class;  // [1 x d]
  Var logits;   // [1 x n_classes]
  Var f_seg;    // [n0 x d], one row per level-0 segment
  Var tokens;   // final tokens, class token first
  Hierarchy hierarchy;
  /// attention[stage][block][head], only with record_attention.
  std::vector<std::vector<std::vector<Tensor>>> attention;
};

CastOutput forward_cast(Tape& tape, const Image& image, const ModelConfig& cfg, const ParamStore& store,
                        const ForwardOptions& opts = {});

/// Flat patch-token baseline: patch_embed, cls_token, block{b}, norm_final, head.
ParamStore init_vit_model(const ModelConfig& cfg, std::uint64_t seed);

struct VitOutput {
  Var f_class;
  Var logits;
  Var tokens;  // patch tokens after the final norm, [n x d], raster order
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<std::vector<Tensor>> attention;  // [block][head]
};

/// Patch rows are laid out (dy, dx, channel).
Tensor patchify(const Image& image, std::size_t patch);
VitOutput forward_vit(Tape& tape, const Image& image, const ModelConfig& cfg, const ParamStore& store,
                      bool record_attention = false);

/// K-means on the rows at counts[0], then on the previous level's centroids
/// for each following count. Returned maps are grid_h x grid_w (default 1 x n),
/// finest first, nested by construction.
std::vector<LabelMap> kmeans_fine_to_coarse(const Tensor& tokens, const std::vector<std::size_t>& counts,
                                            std::uint64_t seed, std::size_t grid_h = 0, std::size_t grid_w = 0);

/// level{l}.pgm for the nested pixel maps and hierarchy.csv with
/// level,child_id,parent_id,assignment_prob rows (child at level l-1).
void export_hierarchy(const Hierarchy& h, const std::filesystem::path& dir);

/// Nested pixel maps ordered coarse to fine, ready for render_hierarchy_overlay.
std::vector<LabelMap> overlay_levels(const Hierarchy& h, std::size_t max_levels = 3);

}  // namespace cast
