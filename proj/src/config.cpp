#include "cast/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cast/error.hpp"
#include "cast/rng.hpp"

namespace cast {

using nlohmann::json;
using nlohmann::ordered_json;

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(channels)));
}

void validate(const ModelConfig& c) {
  auto need = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidConfig, what); };
  need(!c.depth_schedule.empty(), "depth_schedule is empty");
  need(c.depth_schedule.front().tokens == c.level0_count, "first stage token count must equal level0_count");
  for (std::size_t s = 1; s < c.depth_schedule.size(); ++s)
    need(c.depth_schedule[s].tokens < c.depth_schedule[s - 1].tokens, "token counts must strictly decrease");
  need(c.depth_schedule.back().tokens >= 1, "token counts must be positive");
  need(c.channels > 0 && c.heads > 0 && c.channels % c.heads == 0, "heads must divide channels");
  need(c.mlp_ratio > 0.0, "mlp_ratio must be positive");
  need(c.n_classes >= 2, "need at least two classes");
  need(c.image_size % kStemStride == 0, "image_size must be divisible by the stem stride");
  need(c.vit.patch > 0 && c.image_size % c.vit.patch == 0, "image_size must be divisible by the ViT patch");
  need(c.kappa_init > 0.0, "kappa_init must be positive");
  need(c.level0_count <= c.image_size * c.image_size / 4, "level0_count too large for the image");
  SuperpixelConfig sp = c.superpixel;
  sp.target_count = c.level0_count;
  try {
    validate(sp);
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, e.what());
  }
}

void validate(const Config& c) {
  validate(c.model);
  auto need = [](bool ok, const std::string& what) { require(ok, ErrorCode::InvalidConfig, what); };
  need(c.train.lr >= 0.0 && c.train.contrastive.lr >= 0.0, "learning rates must be non-negative");
  need(c.train.batch_size > 0 && c.train.contrastive.batch_size > 1, "batch sizes too small");
  need(c.train.grad_clip >= 0.0, "grad_clip must be non-negative");
  need(c.train.optimizer == "adam" || c.train.optimizer == "sgd", "optimizer must be adam or sgd");
  need(c.train.warmup_fraction >= 0.0 && c.train.warmup_fraction <= 1.0, "warmup_fraction outside [0, 1]");
  need(c.train.contrastive.temperature > 0.0 && c.tta.temperature > 0.0, "temperatures must be positive");
  need(c.eval.attention_mass > 0.0 && c.eval.attention_mass < 1.0, "attention_mass outside (0, 1)");
}

namespace {

std::string algorithm_name(SuperpixelAlgorithm a) { return a == SuperpixelAlgorithm::Seeds ? "seeds" : "slic"; }

SuperpixelAlgorithm algorithm_from(const std::string& s) {
  if (s == "seeds") return SuperpixelAlgorithm::Seeds;
  if (s == "slic") return SuperpixelAlgorithm::Slic;
  fail(ErrorCode::InvalidConfig, "unknown superpixel algorithm '" + s + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("bad value for '") + key + "': " + e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  require(j.is_object(), ErrorCode::InvalidConfig, where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    require(known, ErrorCode::InvalidConfig, "unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace

ordered_json to_json(const Config& c) {
  const ModelConfig& m = c.model;
  ordered_json schedule = ordered_json::array();
  for (const Stage& s : m.depth_schedule) schedule.push_back({s.blocks, s.tokens});
  ordered_json j;
  j["model"] = {{"depth_schedule", schedule},
                {"channels", m.channels},
                {"heads", m.heads},
                {"mlp_ratio", m.mlp_ratio},
                {"n_classes", m.n_classes},
                {"level0_count", m.level0_count},
                {"image_size", m.image_size},
                {"stem", {{"hidden1", m.stem.hidden1}, {"hidden2", m.stem.hidden2}}},
                {"kappa_init", m.kappa_init},
                {"superpixel",
                 {{"algorithm", algorithm_name(m.superpixel.algorithm)},
                  {"iterations", m.superpixel.iterations},
                  {"bins", m.superpixel.seeds_histogram_bins},
                  {"compactness", m.superpixel.slic_compactness}}},
                {"vit", {{"patch", m.vit.patch}, {"depth", m.vit.depth}}}};
  const TrainConfig& t = c.train;
  const ContrastiveConfig& cc = t.contrastive;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"optimizer", t.optimizer},
                {"lr", t.lr},
                {"momentum", t.momentum},
                {"weight_decay", t.weight_decay},
                {"warmup_fraction", t.warmup_fraction},
                {"target_accuracy", t.target_accuracy},
                {"augment", t.augment},
                {"grad_clip", t.grad_clip},
                {"n_train", t.n_train},
                {"n_val", t.n_val},
                {"data_seed", t.data_seed},
                {"contrastive",
                 {{"epochs", cc.epochs},
                  {"batch_size", cc.batch_size},
                  {"lr", cc.lr},
                  {"temperature", cc.temperature},
                  {"proj_hidden", cc.proj_hidden},
                  {"proj_out", cc.proj_out},
                  {"target_probe_accuracy", cc.target_probe_accuracy},
                  {"probe_every", cc.probe_every}}}};
  j["tta"] = {{"lr", c.tta.lr}, {"temperature", c.tta.temperature}, {"momentum", c.tta.momentum}};
  j["eval"] = {{"boundary_tolerance", c.eval.boundary_tolerance},
               {"retrieval_k", c.eval.retrieval_k},
               {"attention_mass", c.eval.attention_mass},
               {"n_images", c.eval.n_images}};
  return j;
}

Config config_from_json(const json& j) {
  Config c;
  check_keys(j, {"model", "train", "tta", "eval"}, "config");
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, {"depth_schedule", "channels", "heads", "mlp_ratio", "n_classes", "level0_count", "image_size",
                   "stem", "kappa_init", "superpixel", "vit"},
               "model");
    ModelConfig& mc = c.model;
    if (m.contains("depth_schedule")) {
      mc.depth_schedule.clear();
      for (const json& s : m["depth_schedule"]) {
        require(s.is_array() && s.size() == 2, ErrorCode::InvalidConfig, "depth_schedule entries are [blocks, tokens]");
        mc.depth_schedule.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>()});
      }
    }
    read(m, "channels", mc.channels);
    read(m, "heads", mc.heads);
    read(m, "mlp_ratio", mc.mlp_ratio);
    read(m, "n_classes", mc.n_classes);
    read(m, "level0_count", mc.level0_count);
    read(m, "image_size", mc.image_size);
    read(m, "kappa_init", mc.kappa_init);
    if (m.contains("stem")) {
      check_keys(m["stem"], {"hidden1", "hidden2"}, "model.stem");
      read(m["stem"], "hidden1", mc.stem.hidden1);
      read(m["stem"], "hidden2", mc.stem.hidden2);
    }
    if (m.contains("superpixel")) {
      const json& sp = m["superpixel"];
      check_keys(sp, {"algorithm", "iterations", "bins", "compactness"}, "model.superpixel");
      std::string alg = algorithm_name(mc.superpixel.algorithm);
      read(sp, "algorithm", alg);
      mc.superpixel.algorithm = algorithm_from(alg);
      read(sp, "iterations", mc.superpixel.iterations);
      read(sp, "bins", mc.superpixel.seeds_histogram_bins);
      read(sp, "compactness", mc.superpixel.slic_compactness);
    }
    if (m.contains("vit")) {
      check_keys(m["vit"], {"patch", "depth"}, "model.vit");
      read(m["vit"], "patch", mc.vit.patch);
      read(m["vit"], "depth", mc.vit.depth);
    }
  }
  c.model.stem.out_channels = c.model.channels;
  c.model.superpixel.target_count = c.model.level0_count;
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, {"epochs", "batch_size", "optimizer", "lr", "momentum", "weight_decay", "warmup_fraction", "target_accuracy",
                   "augment", "grad_clip", "n_train", "n_val", "data_seed", "contrastive"},
               "train");
    TrainConfig& tc = c.train;
    read(t, "epochs", tc.epochs);
    read(t, "batch_size", tc.batch_size);
    read(t, "optimizer", tc.optimizer);
    read(t, "lr", tc.lr);
    read(t, "momentum", tc.momentum);
    read(t, "weight_decay", tc.weight_decay);
    read(t, "warmup_fraction", tc.warmup_fraction);
    read(t, "target_accuracy", tc.target_accuracy);
    read(t, "augment", tc.augment);
    read(t, "grad_clip", tc.grad_clip);
    read(t, "n_train", tc.n_train);
    read(t, "n_val", tc.n_val);
    read(t, "data_seed", tc.data_seed);
    if (t.contains("contrastive")) {
      const json& cj = t["contrastive"];
      check_keys(cj, {"epochs", "batch_size", "lr", "temperature", "proj_hidden", "proj_out", "target_probe_accuracy",
                      "probe_every"},
                 "train.contrastive");
      ContrastiveConfig& cc = tc.contrastive;
      read(cj, "epochs", cc.epochs);
      read(cj, "batch_size", cc.batch_size);
      read(cj, "lr", cc.lr);
      read(cj, "temperature", cc.temperature);
      read(cj, "proj_hidden", cc.proj_hidden);
      read(cj, "proj_out", cc.proj_out);
      read(cj, "target_probe_accuracy", cc.target_probe_accuracy);
      read(cj, "probe_every", cc.probe_every);
    }
  }
  if (j.contains("tta")) {
    check_keys(j["tta"], {"lr", "temperature", "momentum"}, "tta");
    read(j["tta"], "lr", c.tta.lr);
    read(j["tta"], "temperature", c.tta.temperature);
    read(j["tta"], "momentum", c.tta.momentum);
  }
  if (j.contains("eval")) {
    check_keys(j["eval"], {"boundary_tolerance", "retrieval_k", "attention_mass", "n_images"}, "eval");
    read(j["eval"], "boundary_tolerance", c.eval.boundary_tolerance);
    read(j["eval"], "retrieval_k", c.eval.retrieval_k);
    read(j["eval"], "attention_mass", c.eval.attention_mass);
    read(j["eval"], "n_images", c.eval.n_images);
  }
  validate(c);
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::MissingFile, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json apply_overrides(json j, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    require(eq != std::string::npos && eq > 0, ErrorCode::InvalidConfig, "override '" + o + "' is not key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      require(node->is_object() && node->contains(part), ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  return j;
}

std::string config_hash(const Config& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json(cfg).dump())));
  return buf;
}

}  // namespace cast
