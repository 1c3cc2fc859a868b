#pragma once

// Glue shared by the command-line tool and the acceptance runner: data
// splits, checkpoint loading and the segmentation read-outs of both backbones.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cast/config.hpp"
#include "cast/dataset.hpp"
#include "cast/eval.hpp"
#include "cast/learn.hpp"

namespace cast {

struct DataSplit {
  std::vector<SynthSample> train;
  std::vector<SynthSample> val;
};

/// First n_train samples of synth_dataset(data_seed, n_train + n_val) train, the rest validate.
DataSplit make_split(const TrainConfig& cfg);
/// Held-out images for evaluation, disjoint from the training split's seed.
std::vector<SynthSample> eval_set(const Config& cfg);

/// The backbone is read off the parameter names. Throws ConfigMismatch when
/// the file is missing or its tensors do not match what `cfg` would create.
Model load_model(const ModelConfig& cfg, const std::filesystem::path& checkpoint);

/// Hardened pixel map of the level that pools to exactly `tokens` segments
/// (regular or extra levels).
const LabelMap& cast_segments(const Hierarchy& h, std::size_t tokens);

/// Patch tokens of the ViT clustered fine to coarse (2k, then k centroids);
/// the k-way map upsampled to pixels.
LabelMap vit_kmeans_segments(const Model& vit, const Image& image, std::size_t k, std::uint64_t seed);

/// Foreground mIoU of the k-way segmentation of either backbone.
double foreground_miou_at(const Model& model, const SynthSample& sample, std::size_t k, std::uint64_t seed);

struct SegmentationSummary {
  std::size_t images = 0;
  double foreground_miou = 0.0;       // at `ways` segments
  std::vector<MetricReport> hierarchy;  // parts/object/figure PRF (CAST only)
  double boundary_f = 0.0;            // superpixels vs parts (CAST only)
  NestednessReport nestedness;        // summed over levels and images (CAST only)
};

/// Parent-function check of every pooling step of one hierarchy, summed.
NestednessReport hierarchy_nestedness(const Hierarchy& h);

/// Mean segmentation metrics over `samples`.
SegmentationSummary evaluate_segmentation(const Model& model, const std::vector<SynthSample>& samples,
                                          std::size_t ways, double boundary_tolerance, std::uint64_t seed);

}  // namespace cast
