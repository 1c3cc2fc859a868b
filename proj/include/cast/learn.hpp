#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cast/autodiff.hpp"
#include "cast/config.hpp"
#include "cast/dataset.hpp"
#include "cast/model.hpp"

namespace cast {

enum class Backbone { Cast, Vit };

struct Model {
  Backbone kind = Backbone::Cast;
  ModelConfig cfg;
  ParamStore params;
};

Model make_model(Backbone kind, const ModelConfig& cfg, std::uint64_t seed);

struct Embedding {
  Var f_class;  // [1 x d]
  Var logits;   // [1 x n_classes]
};

/// `superpixels` is only used by the CAST backbone (computed when null).
Embedding embed(Tape& tape, const Model& model, const Image& image, const LabelMap* superpixels = nullptr);
/// Inference-only class features, one row per image.
Tensor class_features(const Model& model, const std::vector<Image>& images,
                      const std::vector<LabelMap>* superpixels = nullptr);

/// Regex matching every parameter the training loops update.
inline constexpr const char* kTrainableParams = R"(^(?!extra_pool\.).*)";

/// SGD with heavy-ball momentum; weight decay applies to ".w" matrices only.
struct SgdOptimizer {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::string filter = kTrainableParams;
  std::map<std::string, Tensor> velocity;
  std::size_t steps = 0;

  void step(ParamStore& params, const Gradients& grads, double lr);
};

struct AdamOptimizer {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::string filter = kTrainableParams;
  std::map<std::string, Tensor> m, v;
  std::size_t steps = 0;

  void step(ParamStore& params, const Gradients& grads, double lr);
};

/// Scales all gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_gradients(Gradients& grads, double max_norm);

/// One of the 8 symmetries of the square: bit 2 transposes, then bit 0
/// flips columns and bit 1 flips rows. Transposes need square inputs.
Image dihedral(const Image& image, unsigned k);
LabelMap dihedral(const LabelMap& map, unsigned k);

/// Linear warmup over warmup_fraction of the steps, then cosine decay to 0.
double cosine_lr(double base, std::size_t step, std::size_t total, double warmup_fraction);

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double metric = 0.0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> log_csv;
  /// Where the parameters are written if the loss stops being finite.
  std::optional<std::filesystem::path> divergence_checkpoint;
  /// Called after every epoch with the row just logged.
  std::function<void(const TrainLogRow&)> on_epoch;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::size_t epochs_run = 0;
  double final_metric = 0.0;
};

double classification_accuracy(const Model& model, const std::vector<SynthSample>& data,
                               const std::vector<LabelMap>* superpixels = nullptr);

/// Cross-entropy on the class logits, cosine schedule with warmup, Adam or
/// SGD with momentum per cfg.optimizer. Logs epoch,step,loss,metric where metric is validation accuracy
/// (training accuracy when `val` is empty). Stops early once the metric
/// reaches cfg.target_accuracy (when > 0).
TrainResult train_supervised(Model& model, const std::vector<SynthSample>& train, const std::vector<SynthSample>& val,
                             const TrainConfig& cfg, std::uint64_t seed, const TrainOptions& opts = {});

/// Random resized crop (area 0.5-1, aspect 3/4-4/3), horizontal flip and
/// brightness/contrast/saturation jitter of up to 0.3.
Image augment(const Image& image, Rng& rng);

/// 3-layer projection head proj.fc1..fc3 (d -> hidden -> hidden -> out).
void init_projection(ParamStore& store, std::size_t d, std::size_t hidden, std::size_t out, Rng& rng);
Var projection(Tape& tape, const ParamStore& store, Var x);

/// Symmetric in-batch InfoNCE between two views: row i of `a` is the
/// positive of row i of `b`. Rows are L2-normalised inside.
Var info_nce(Var a, Var b, double temperature);

/// Two augmented views per image, InfoNCE over projected f_class, Adam.
/// The projection head lives in `model.params` under proj.* and is removed
/// at the end. metric is the linear-probe accuracy on `probe_val` (every
/// probe_every epochs; carried over otherwise).
TrainResult train_contrastive(Model& model, const std::vector<SynthSample>& train,
                              const std::vector<SynthSample>& probe_train, const std::vector<SynthSample>& probe_val,
                              const TrainConfig& cfg, std::uint64_t seed, const TrainOptions& opts = {});

struct ProbeResult {
  double train_accuracy = 0.0;
  double accuracy = 0.0;
};

/// Softmax regression on standardised frozen features (full batch, Adam,
/// `iterations` steps). Reports top-1 accuracy on the test split.
ProbeResult linear_probe(const Tensor& train_features, const std::vector<std::size_t>& train_labels,
                         const Tensor& test_features, const std::vector<std::size_t>& test_labels,
                         std::size_t n_classes, std::uint64_t seed, std::size_t iterations = 300);

/// Unit-norm class means of unit-normalised embeddings, [n_classes x d].
Tensor class_prototypes(const Tensor& features, const std::vector<std::size_t>& labels, std::size_t n_classes);

struct TtaSnapshot {
  Hierarchy hierarchy;
  std::vector<double> probabilities;  // softmax(cos / temperature)
  double entropy = 0.0;
};

struct TtaResult {
  ParamStore adapted;
  TtaSnapshot before;
  TtaSnapshot after;
  std::vector<std::string> changed;  // parameters whose values differ
};

/// Entropy of softmax(cos(f_class, prototypes) / temperature) for a CAST model.
Var prototype_entropy(Tape& tape, const Model& model, const Image& image, const Tensor& prototypes,
                      double temperature, const LabelMap* superpixels, CastOutput* out = nullptr);

/// One SGD step on the prototype entropy that updates only layer-norm
/// scales and biases. The input model is not modified.
TtaResult tta_step(const Model& model, const Image& image, const Tensor& prototypes, const TtaConfig& cfg,
                   const LabelMap* superpixels = nullptr, const ForwardOptions& forward = {});

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

}  // namespace cast
