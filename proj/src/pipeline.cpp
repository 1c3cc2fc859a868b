#include "cast/pipeline.hpp"

#include <filesystem>

#include "cast/checkpoint.hpp"
#include "cast/error.hpp"
#include "cast/superpixel.hpp"

namespace cast {

DataSplit make_split(const TrainConfig& cfg) {
  std::vector<SynthSample> all = synth_dataset(cfg.data_seed, cfg.n_train + cfg.n_val);
  DataSplit s;
  s.val.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(cfg.n_train)),
               std::make_move_iterator(all.end()));
  all.resize(cfg.n_train);
  s.train = std::move(all);
  return s;
}

std::vector<SynthSample> eval_set(const Config& cfg) {
  return synth_dataset(cfg.train.data_seed + 1000, cfg.eval.n_images);
}

Model load_model(const ModelConfig& cfg, const std::filesystem::path& checkpoint) {
  require(std::filesystem::exists(checkpoint), ErrorCode::ConfigMismatch,
          "checkpoint " + checkpoint.string() + " does not exist");
  ParamStore loaded = load_checkpoint(checkpoint);
  const Backbone kind = loaded.contains("patch_embed.w") ? Backbone::Vit : Backbone::Cast;
  Model m = make_model(kind, cfg, 0);
  require(loaded.size() == m.params.size(), ErrorCode::ConfigMismatch,
          "checkpoint has " + std::to_string(loaded.size()) + " tensors, the config expects " +
              std::to_string(m.params.size()));
  for (auto& [name, p] : m.params) {
    require(loaded.contains(name), ErrorCode::ConfigMismatch, "checkpoint lacks " + name);
    const Tensor& v = loaded.value(name);
    require(v.shape() == p.value.shape(), ErrorCode::ConfigMismatch, "shape of " + name + " differs from the config");
    p.value = v;
  }
  return m;
}

const LabelMap& cast_segments(const Hierarchy& h, std::size_t tokens) {
  for (std::size_t l = 1; l < h.depth(); ++l)
    if (h.level(l).tokens == tokens) return h.level(l).pixel_map;
  fail(ErrorCode::InvalidParameter, "no level pools to " + std::to_string(tokens) + " segments");
}

LabelMap vit_kmeans_segments(const Model& vit, const Image& image, std::size_t k, std::uint64_t seed) {
  require(vit.kind == Backbone::Vit, ErrorCode::InvalidParameter, "expected a ViT model");
  Tape tape;
  const VitOutput out = forward_vit(tape, image, vit.cfg, vit.params);
  const std::vector<LabelMap> maps =
      kmeans_fine_to_coarse(out.tokens.value(), {2 * k, k}, seed, out.grid_h, out.grid_w);
  return upsample_nearest(maps.back(), vit.cfg.vit.patch);
}

double foreground_miou_at(const Model& model, const SynthSample& sample, std::size_t k, std::uint64_t seed) {
  if (model.kind == Backbone::Vit) return foreground_miou(vit_kmeans_segments(model, sample.image, k, seed), sample.figure);
  Tape tape;
  const CastOutput out = forward_cast(tape, sample.image, model.cfg, model.params);
  return foreground_miou(cast_segments(out.hierarchy, k), sample.figure);
}

NestednessReport hierarchy_nestedness(const Hierarchy& h) {
  NestednessReport total;
  for (std::size_t l = 1; l < h.levels.size(); ++l) {
    const NestednessReport r = check_nestedness(h.levels[l - 1].cells, h.levels[l].assignment);
    total.units += r.units;
    total.consistent += r.consistent;
    total.degenerate += r.degenerate;
  }
  return total;
}

SegmentationSummary evaluate_segmentation(const Model& model, const std::vector<SynthSample>& samples,
                                          std::size_t ways, double boundary_tolerance, std::uint64_t seed) {
  SegmentationSummary s;
  s.images = samples.size();
  if (samples.empty()) return s;
  const double n = static_cast<double>(samples.size());
  for (const SynthSample& sample : samples) {
    if (model.kind == Backbone::Vit) {
      s.foreground_miou += foreground_miou(vit_kmeans_segments(model, sample.image, ways, seed), sample.figure) / n;
      continue;
    }
    Tape tape;
    const CastOutput out = forward_cast(tape, sample.image, model.cfg, model.params);
    const Hierarchy& h = out.hierarchy;
    s.foreground_miou += foreground_miou(cast_segments(h, ways), sample.figure) / n;
    s.boundary_f += boundary_fscore(h.s0_pixels, sample.parts, boundary_tolerance).mean / n;
    const NestednessReport nest = hierarchy_nestedness(h);
    s.nestedness.units += nest.units;
    s.nestedness.consistent += nest.consistent;
    s.nestedness.degenerate += nest.degenerate;

    // the three coarsest levels against parts, object and figure
    std::vector<LabelMap> pred;
    for (std::size_t l = h.levels.size() >= 3 ? h.levels.size() - 3 : 0; l < h.levels.size(); ++l)
      pred.push_back(h.levels[l].pixel_map);
    std::vector<LabelMap> gt{sample.parts, sample.object, sample.figure};
    gt.erase(gt.begin(), gt.begin() + static_cast<std::ptrdiff_t>(gt.size() - pred.size()));
    const std::vector<MetricReport> prf = hierarchical_prf(pred, gt, kSynthPartClasses);
    if (s.hierarchy.empty()) {
      s.hierarchy = prf;
      for (MetricReport& r : s.hierarchy) {
        r.per_class.clear();
        r.mean = 0.0;
        for (auto& [key, v] : r.extra) v = 0.0;
      }
    }
    for (std::size_t l = 0; l < prf.size(); ++l) {
      s.hierarchy[l].mean += prf[l].mean / n;
      for (const auto& [key, v] : prf[l].extra) s.hierarchy[l].extra[key] += v / n;
    }
  }
  return s;
}

}  // namespace cast
