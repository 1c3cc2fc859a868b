#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cast/superpixel.hpp"
#include "cast/tokenizer.hpp"

namespace cast {

/// (encoder blocks, token count) for one stage.
struct Stage {
  std::size_t blocks = 0;
  std::size_t tokens = 0;
};

struct VitConfig {
  std::size_t patch = 8;
  std::size_t depth = 11;
};

struct ModelConfig {
  std::vector<Stage> depth_schedule{{3, 49}, {3, 16}, {3, 8}, {2, 4}};
  std::size_t channels = 32;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t n_classes = 3;
  std::size_t level0_count = 49;
  std::size_t image_size = 64;
  StemConfig stem{};
  double kappa_init = 30.0;
  SuperpixelConfig superpixel{};
  VitConfig vit{};

  std::size_t mlp_hidden() const;
  std::size_t levels() const { return depth_schedule.size() - 1; }
};

struct ContrastiveConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double temperature = 0.2;
  std::size_t proj_hidden = 64;
  std::size_t proj_out = 32;
  double target_probe_accuracy = 0.0;  // early stop once reached (checked every probe_every epochs)
  std::size_t probe_every = 10;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 16;
  /// "adam" or "sgd" (momentum is only used by sgd).
  std::string optimizer = "adam";
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double warmup_fraction = 0.1;
  /// Stop once validation accuracy reaches this (0 disables).
  double target_accuracy = 0.0;
  /// Random flips and transposes of every training image, each epoch.
  bool augment = true;
  /// Global gradient-norm clip (0 disables).
  double grad_clip = 1.0;
  std::size_t n_train = 300;
  std::size_t n_val = 150;
  std::uint64_t data_seed = 7;
  ContrastiveConfig contrastive{};
};

struct TtaConfig {
  double lr = 1.0;
  double temperature = 0.07;
  double momentum = 0.0;
};

struct EvalConfig {
  double boundary_tolerance = 2.0;
  std::size_t retrieval_k = 20;
  double attention_mass = 0.6;
  std::size_t n_images = 100;
};

struct Config {
  ModelConfig model{};
  TrainConfig train{};
  TtaConfig tta{};
  EvalConfig eval{};
};

/// Throws InvalidConfig on broken invariants (decreasing token counts,
/// first count = level0_count, heads dividing channels, ...).
void validate(const ModelConfig& cfg);
void validate(const Config& cfg);

nlohmann::ordered_json to_json(const Config& cfg);
Config config_from_json(const nlohmann::json& j);
/// Reads a JSON config; missing keys keep their defaults.
Config load_config(const std::filesystem::path& path);
/// Applies "a.b.c=value" overrides; the value is parsed as JSON when
/// possible and as a string otherwise. Unknown paths are an InvalidConfig.
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& overrides);
/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const Config& cfg);

}  // namespace cast
