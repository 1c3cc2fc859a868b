#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cast/pixelio.hpp"
#include "cast/tensor.hpp"

namespace cast {

struct ClassValue {
  std::uint32_t cls = 0;
  double value = 0.0;
  std::size_t support = 0;  // ground-truth pixels (or segments) of the class
};

struct MetricReport {
  std::string name;
  std::vector<ClassValue> per_class;
  /// Plain average of per_class values.
  double mean = 0.0;
  /// Secondary scalars, e.g. precision and recall next to an F-score.
  std::map<std::string, double> extra;
};

/// Class-wise IoU averaged over classes present in either map. Labels >=
/// n_classes mean "no class" and only count towards the union of the other map.
MetricReport region_miou(const LabelMap& pred, const LabelMap& gt, std::size_t n_classes);

/// Pixels whose right or lower neighbour carries a different label.
std::vector<bool> boundary_map(const LabelMap& map);

/// Exact Euclidean distance of every pixel to the nearest site; infinity when
/// there are no sites.
std::vector<double> distance_transform(const std::vector<bool>& sites, std::size_t height, std::size_t width);

/// Boundary tolerance of 0.75% of the image diagonal.
double default_boundary_tolerance(std::size_t height, std::size_t width);

/// Boundary precision/recall/F at a pixel tolerance. An empty boundary set
/// scores precision (or recall) 1 vacuously. per_class holds a single entry
/// with the F-score; extra carries "precision" and "recall".
MetricReport boundary_fscore(const LabelMap& pred, const LabelMap& gt, double tol);

/// Class of majority pixel overlap for every segment, ties to the smallest class.
std::vector<std::uint32_t> majority_labels(const LabelMap& segments, const LabelMap& classes, std::size_t n_classes);

/// For every level pair, each predicted segment takes its majority gt class;
/// pixel precision/recall/F are computed per foreground class (class 0 is
/// background and excluded) and averaged over classes. per_class holds F,
/// extra holds mean "precision" and "recall".
std::vector<MetricReport> hierarchical_prf(const std::vector<LabelMap>& pred_levels,
                                           const std::vector<LabelMap>& gt_levels, std::size_t n_classes);

/// Majority-labels the segments as figure/ground, then averages the IoU of
/// both classes.
double foreground_miou(const LabelMap& segments, const LabelMap& figure);

struct LabelledFeatures {
  Tensor features;  // unit rows
  std::vector<std::uint32_t> labels;
};

/// Cosine k-NN majority vote (ties to the label ranked first). Returns
/// accuracy over query rows.
double segment_retrieval(const LabelledFeatures& query, const LabelledFeatures& gallery, std::size_t k = 20);

struct FigureGround {
  std::vector<LabelMap> per_head;
  LabelMap combined;  // union over heads
  std::vector<std::vector<std::uint32_t>> kept;  // kept segment ids per head
};

/// Per head: rank segments by class-token attention, keep the shortest
/// prefix reaching `mass` of the (renormalised) attention.
FigureGround attention_figure_ground(const std::vector<std::vector<double>>& attention, const LabelMap& partition,
                                     double mass = 0.6);

/// CSV `metric,class,value` (one row per class value plus "mean" and extras).
void write_report_csv(const std::vector<MetricReport>& reports, const std::filesystem::path& path);
void write_report_json(const std::vector<MetricReport>& reports, const std::filesystem::path& path);

}  // namespace cast
