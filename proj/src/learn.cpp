#include "cast/learn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <regex>

#include "cast/checkpoint.hpp"
#include "cast/error.hpp"
#include "cast/nn.hpp"
#include "cast/superpixel.hpp"

namespace cast {

Model make_model(Backbone kind, const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.kind = kind;
  m.cfg = cfg;
  m.params = kind == Backbone::Cast ? init_cast_model(cfg, seed) : init_vit_model(cfg, seed);
  return m;
}

Embedding embed(Tape& tape, const Model& model, const Image& image, const LabelMap* superpixels) {
  if (model.kind == Backbone::Vit) {
    VitOutput out = forward_vit(tape, image, model.cfg, model.params);
    return {out.f_class, out.logits};
  }
  ForwardOptions opts;
  opts.superpixels = superpixels;
  CastOutput out = forward_cast(tape, image, model.cfg, model.params, opts);
  return {out.f_class, out.logits};
}

Tensor class_features(const Model& model, const std::vector<Image>& images, const std::vector<LabelMap>* superpixels) {
  Tensor out = Tensor::matrix(images.size(), model.cfg.channels);
  for (std::size_t i = 0; i < images.size(); ++i) {
    Tape tape;
    const Embedding e = embed(tape, model, images[i], superpixels ? &(*superpixels)[i] : nullptr);
    std::copy_n(e.f_class.value().data(), out.cols(), &out(i, 0));
  }
  return out;
}

namespace {

bool decays(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".w") == 0; }

std::vector<LabelMap> superpixel_cache(const Model& model, const std::vector<SynthSample>& data) {
  std::vector<LabelMap> out;
  if (model.kind != Backbone::Cast) return out;
  SuperpixelConfig sp = model.cfg.superpixel;
  sp.target_count = model.cfg.level0_count;
  out.reserve(data.size());
  for (const SynthSample& s : data) out.push_back(compute_superpixels(s.image, sp));
  return out;
}

void accumulate(Gradients& into, const Gradients& g) {
  for (const auto& [name, t] : g) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, t);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
    }
  }
}

void scale_grads(Gradients& g, double s) {
  for (auto& [name, t] : g)
    for (double& v : t.values()) v *= s;
}

// a step that leaves a parameter non-finite or a pooling temperature at or
// below zero has diverged as surely as a NaN loss
bool params_sane(const ParamStore& params) {
  for (const auto& [name, p] : params) {
    for (double v : p.value.values())
      if (!std::isfinite(v)) return false;
    if (name.ends_with(".kappa") && p.value.values()[0] <= 0.0) return false;
  }
  return true;
}

[[noreturn]] void diverged(const ParamStore& params, const TrainOptions& opts, std::size_t epoch, std::size_t step) {
  std::string where = "training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step);
  if (opts.divergence_checkpoint) {
    save_checkpoint(params, *opts.divergence_checkpoint);
    where += "; parameters saved to " + opts.divergence_checkpoint->string();
  }
  fail(ErrorCode::DivergenceDetected, where);
}

void finish_epoch(TrainResult& result, const TrainLogRow& row, const TrainOptions& opts) {
  result.log.push_back(row);
  result.epochs_run = row.epoch;
  result.final_metric = row.metric;
  if (opts.log_csv) write_train_log(result.log, *opts.log_csv);
  if (opts.on_epoch) opts.on_epoch(row);
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

void SgdOptimizer::step(ParamStore& params, const Gradients& grads, double lr) {
  const std::regex re(filter);
  for (const auto& [name, g] : grads) {
    Parameter& p = params.at(name);
    if (!p.trainable || !std::regex_search(name, re)) continue;
    auto [it, fresh] = velocity.try_emplace(name, Tensor(p.value.shape()));
    Tensor& vel = it->second;
    const double wd = decays(name) ? weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      vel[i] = momentum * vel[i] + g[i] + wd * p.value[i];
      p.value[i] -= lr * vel[i];
    }
  }
  ++steps;
}

void AdamOptimizer::step(ParamStore& params, const Gradients& grads, double lr) {
  const std::regex re(filter);
  ++steps;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (const auto& [name, g] : grads) {
    Parameter& p = params.at(name);
    if (!p.trainable || !std::regex_search(name, re)) continue;
    Tensor& mt = m.try_emplace(name, Tensor(p.value.shape())).first->second;
    Tensor& vt = v.try_emplace(name, Tensor(p.value.shape())).first->second;
    const double wd = decays(name) ? weight_decay : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] + wd * p.value[i];
      mt[i] = beta1 * mt[i] + (1.0 - beta1) * gi;
      vt[i] = beta2 * vt[i] + (1.0 - beta2) * gi * gi;
      p.value[i] -= lr * (mt[i] / c1) / (std::sqrt(vt[i] / c2) + eps);
    }
  }
}

double clip_gradients(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.values()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) scale_grads(grads, max_norm / norm);
  return norm;
}

namespace {

// Source pixel of output (y, x) under symmetry k.
std::pair<std::size_t, std::size_t> dihedral_source(std::size_t y, std::size_t x, std::size_t h, std::size_t w,
                                                    unsigned k) {
  if (k & 2u) y = h - 1 - y;
  if (k & 1u) x = w - 1 - x;
  if (k & 4u) std::swap(y, x);
  return {y, x};
}

}  // namespace

Image dihedral(const Image& image, unsigned k) {
  require(!(k & 4u) || image.height == image.width, ErrorCode::ShapeMismatch, "transpose needs a square image");
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x) {
      const auto [sy, sx] = dihedral_source(y, x, image.height, image.width, k);
      std::copy_n(image.pixel(sy, sx), 3, out.pixel(y, x));
    }
  return out;
}

LabelMap dihedral(const LabelMap& map, unsigned k) {
  require(!(k & 4u) || map.height == map.width, ErrorCode::ShapeMismatch, "transpose needs a square map");
  LabelMap out(map.height, map.width, 0, map.n_segments);
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const auto [sy, sx] = dihedral_source(y, x, map.height, map.width, k);
      out.at(y, x) = map.at(sy, sx);
    }
  return out;
}

double cosine_lr(double base, std::size_t step, std::size_t total, double warmup_fraction) {
  const auto warm = static_cast<std::size_t>(std::round(warmup_fraction * static_cast<double>(total)));
  if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double span = static_cast<double>(std::max<std::size_t>(1, total - warm));
  const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double classification_accuracy(const Model& model, const std::vector<SynthSample>& data,
                               const std::vector<LabelMap>* superpixels) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    Tape tape;
    const Embedding e = embed(tape, model, data[i].image, superpixels ? &(*superpixels)[i] : nullptr);
    correct += argmax(e.logits.value().values()) == data[i].class_label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_supervised(Model& model, const std::vector<SynthSample>& train, const std::vector<SynthSample>& val,
                             const TrainConfig& cfg, std::uint64_t seed, const TrainOptions& opts) {
  require(!train.empty(), ErrorCode::InvalidParameter, "empty training set");
  const std::vector<LabelMap> train_sp = superpixel_cache(model, train);
  const std::vector<LabelMap> val_sp = superpixel_cache(model, val);
  SgdOptimizer sgd;
  sgd.momentum = cfg.momentum;
  sgd.weight_decay = cfg.weight_decay;
  AdamOptimizer adam;
  adam.weight_decay = cfg.weight_decay;
  const bool use_adam = cfg.optimizer == "adam";
  Rng rng = Rng::stream(seed, "train-order");
  const std::size_t batches = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * batches;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(train.size(), lo + cfg.batch_size);
      Gradients grads;
      double batch_loss = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t i = order[k];
        Tape tape;
        try {
          const unsigned sym = cfg.augment ? static_cast<unsigned>(rng.below(8)) : 0u;
          const Image image = dihedral(train[i].image, sym);
          LabelMap sp;
          if (!train_sp.empty()) sp = dihedral(train_sp[i], sym);
          const Embedding e = embed(tape, model, image, train_sp.empty() ? nullptr : &sp);
          const std::size_t label[] = {train[i].class_label};
          Var loss = ad::cross_entropy(e.logits, label);
          batch_loss += loss.value().item();
          if (!std::isfinite(batch_loss)) diverged(model.params, opts, epoch, step);
          accumulate(grads, tape.backward(loss, model.params));
        } catch (const Error& err) {
          if (err.code() != ErrorCode::NonFiniteInput) throw;
          diverged(model.params, opts, epoch, step);
        }
      }
      scale_grads(grads, 1.0 / static_cast<double>(hi - lo));
      clip_gradients(grads, cfg.grad_clip);
      const double lr = cosine_lr(cfg.lr, step, total, cfg.warmup_fraction);
      if (use_adam)
        adam.step(model.params, grads, lr);
      else
        sgd.step(model.params, grads, lr);
      if (!params_sane(model.params)) diverged(model.params, opts, epoch, step);
      loss_sum += batch_loss;
      ++step;
    }
    TrainLogRow row;
    row.epoch = epoch;
    row.step = step;
    row.loss = loss_sum / static_cast<double>(train.size());
    try {
      row.metric = val.empty() ? classification_accuracy(model, train, train_sp.empty() ? nullptr : &train_sp)
                               : classification_accuracy(model, val, val_sp.empty() ? nullptr : &val_sp);
    } catch (const Error& err) {
      if (err.code() != ErrorCode::NonFiniteInput) throw;
      diverged(model.params, opts, epoch, step);
    }
    finish_epoch(result, row, opts);
    if (cfg.target_accuracy > 0.0 && row.metric >= cfg.target_accuracy) break;
  }
  return result;
}

Image augment(const Image& image, Rng& rng) {
  const std::size_t h = image.height, w = image.width;
  const double area = rng.uniform(0.5, 1.0);
  const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
  const double cw = std::min(static_cast<double>(w), std::sqrt(area * aspect) * static_cast<double>(w));
  const double ch = std::min(static_cast<double>(h), std::sqrt(area / aspect) * static_cast<double>(h));
  const double x0 = rng.uniform(0.0, static_cast<double>(w) - cw);
  const double y0 = rng.uniform(0.0, static_cast<double>(h) - ch);
  const bool flip = rng.uniform() < 0.5;
  const double brightness = rng.uniform(0.7, 1.3);
  const double contrast = rng.uniform(0.7, 1.3);
  const double saturation = rng.uniform(0.7, 1.3);

  std::vector<double> px(h * w * 3);
  double mean = 0.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t xo = flip ? w - 1 - x : x;
      // bilinear sample at the crop position of the pixel centre
      const double sx = std::clamp(x0 + (xo + 0.5) * cw / w - 0.5, 0.0, static_cast<double>(w - 1));
      const double sy = std::clamp(y0 + (y + 0.5) * ch / h - 0.5, 0.0, static_cast<double>(h - 1));
      const auto ix = static_cast<std::size_t>(sx), iy = static_cast<std::size_t>(sy);
      const std::size_t jx = std::min(ix + 1, w - 1), jy = std::min(iy + 1, h - 1);
      const double fx = sx - ix, fy = sy - iy;
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * image.pixel(iy, ix)[c] + fx * image.pixel(iy, jx)[c]) +
                         fy * ((1 - fx) * image.pixel(jy, ix)[c] + fx * image.pixel(jy, jx)[c]);
        px[(y * w + x) * 3 + c] = v * brightness;
        mean += v * brightness;
      }
    }
  mean /= static_cast<double>(px.size());
  Image out(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    double* c = &px[i * 3];
    const double grey = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    for (std::size_t k = 0; k < 3; ++k) {
      double v = grey + (c[k] - grey) * saturation;
      v = (v - mean) * contrast + mean;
      out.data[i * 3 + k] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return out;
}

void init_projection(ParamStore& store, std::size_t d, std::size_t hidden, std::size_t out, Rng& rng) {
  nn::init_linear(store, "proj.fc1", d, hidden, rng);
  nn::init_linear(store, "proj.fc2", hidden, hidden, rng);
  nn::init_linear(store, "proj.fc3", hidden, out, rng);
}

Var projection(Tape& tape, const ParamStore& store, Var x) {
  x = ad::gelu(nn::linear(tape, store, "proj.fc1", x));
  x = ad::gelu(nn::linear(tape, store, "proj.fc2", x));
  return nn::linear(tape, store, "proj.fc3", x);
}

Var info_nce(Var a, Var b, double temperature) {
  require(a.shape() == b.shape() && a.rows() >= 2, ErrorCode::ShapeMismatch, "info_nce needs two equal batches of >= 2");
  Var logits = ad::scale(ad::matmul_nt(ad::normalize_rows(a), ad::normalize_rows(b)), 1.0 / temperature);
  std::vector<std::size_t> labels(a.rows());
  std::iota(labels.begin(), labels.end(), 0);
  return ad::scale(ad::add(ad::cross_entropy(logits, labels), ad::cross_entropy(ad::transpose(logits), labels)), 0.5);
}

TrainResult train_contrastive(Model& model, const std::vector<SynthSample>& train,
                              const std::vector<SynthSample>& probe_train, const std::vector<SynthSample>& probe_val,
                              const TrainConfig& cfg, std::uint64_t seed, const TrainOptions& opts) {
  const ContrastiveConfig& cc = cfg.contrastive;
  require(train.size() >= 2, ErrorCode::InvalidParameter, "contrastive training needs at least two images");
  Rng init_rng = Rng::stream(seed, "projection-init");
  init_projection(model.params, model.cfg.channels, cc.proj_hidden, cc.proj_out, init_rng);
  SuperpixelConfig sp = model.cfg.superpixel;
  sp.target_count = model.cfg.level0_count;

  AdamOptimizer opt;
  opt.weight_decay = cfg.weight_decay;
  Rng order_rng = Rng::stream(seed, "contrastive-order");
  Rng aug_rng = Rng::stream(seed, "augment");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  // A trailing batch of one has no negatives; it is folded into the previous one.
  std::vector<std::pair<std::size_t, std::size_t>> batches;
  for (std::size_t lo = 0; lo < train.size(); lo += cc.batch_size)
    batches.emplace_back(lo, std::min(train.size(), lo + cc.batch_size));
  if (batches.size() > 1 && batches.back().second - batches.back().first < 2) {
    batches[batches.size() - 2].second = batches.back().second;
    batches.pop_back();
  }
  const std::size_t total = cc.epochs * batches.size();

  std::vector<LabelMap> probe_train_sp = superpixel_cache(model, probe_train);
  std::vector<LabelMap> probe_val_sp = superpixel_cache(model, probe_val);
  auto probe = [&] {
    std::vector<Image> a, b;
    std::vector<std::size_t> la, lb;
    for (const auto& s : probe_train) a.push_back(s.image), la.push_back(s.class_label);
    for (const auto& s : probe_val) b.push_back(s.image), lb.push_back(s.class_label);
    const Tensor fa = class_features(model, a, probe_train_sp.empty() ? nullptr : &probe_train_sp);
    const Tensor fb = class_features(model, b, probe_val_sp.empty() ? nullptr : &probe_val_sp);
    return linear_probe(fa, la, fb, lb, model.cfg.n_classes, seed).accuracy;
  };

  TrainResult result;
  std::size_t step = 0;
  double metric = 0.0;
  for (std::size_t epoch = 1; epoch <= cc.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    double loss_sum = 0.0;
    for (const auto& [lo, hi] : batches) {
      Tape tape;
      try {
        std::vector<Var> va, vb;
        for (std::size_t k = lo; k < hi; ++k) {
          const Image& img = train[order[k]].image;
          for (int view = 0; view < 2; ++view) {
            const Image aug = augment(img, aug_rng);
            LabelMap sp_map;
            if (model.kind == Backbone::Cast) sp_map = compute_superpixels(aug, sp);
            const Embedding e = embed(tape, model, aug, model.kind == Backbone::Cast ? &sp_map : nullptr);
            (view == 0 ? va : vb).push_back(e.f_class);
          }
        }
        Var za = projection(tape, model.params, ad::concat_rows(va));
        Var zb = projection(tape, model.params, ad::concat_rows(vb));
        Var loss = info_nce(za, zb, cc.temperature);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) diverged(model.params, opts, epoch, step);
        loss_sum += lv * static_cast<double>(hi - lo);
        const Gradients grads = tape.backward(loss, model.params);
        opt.step(model.params, grads, cosine_lr(cc.lr, step, total, cfg.warmup_fraction));
        if (!params_sane(model.params)) diverged(model.params, opts, epoch, step);
      } catch (const Error& err) {
        if (err.code() != ErrorCode::NonFiniteInput) throw;
        diverged(model.params, opts, epoch, step);
      }
      ++step;
    }
    const bool last = epoch == cc.epochs;
    if ((cc.probe_every > 0 && epoch % cc.probe_every == 0) || last) metric = probe();
    TrainLogRow row{epoch, step, loss_sum / static_cast<double>(train.size()), metric};
    finish_epoch(result, row, opts);
    if (cc.target_probe_accuracy > 0.0 && metric >= cc.target_probe_accuracy) break;
  }

  ParamStore kept;
  for (const auto& [name, p] : model.params)
    if (name.rfind("proj.", 0) != 0) kept.add(name, p.value, p.trainable);
  model.params = std::move(kept);
  return result;
}

ProbeResult linear_probe(const Tensor& train_features, const std::vector<std::size_t>& train_labels,
                         const Tensor& test_features, const std::vector<std::size_t>& test_labels,
                         std::size_t n_classes, std::uint64_t seed, std::size_t iterations) {
  const std::size_t n = train_features.rows(), d = train_features.cols();
  require(n == train_labels.size() && test_features.rows() == test_labels.size() && n > 0, ErrorCode::ShapeMismatch,
          "feature and label counts differ");
  require(test_features.rows() == 0 || test_features.cols() == d, ErrorCode::DimMismatch,
          "train and test feature widths differ");
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += train_features(i, j) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(train_features(i, j) - mu[j], 2) / static_cast<double>(n);
  for (double& s : sd) s = std::max(std::sqrt(s), 1e-8);
  auto standardise = [&](const Tensor& f) {
    Tensor out = f;
    for (std::size_t i = 0; i < f.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) out(i, j) = (f(i, j) - mu[j]) / sd[j];
    return out;
  };
  const Tensor xtr = standardise(train_features), xte = standardise(test_features);

  ParamStore head;
  Rng rng = Rng::stream(seed, "linear-probe");
  nn::init_linear(head, "probe", d, n_classes, rng, 0.1);
  AdamOptimizer opt;
  opt.filter = ".*";
  opt.weight_decay = 1e-4;
  for (std::size_t it = 0; it < iterations; ++it) {
    Tape tape;
    Var loss = ad::cross_entropy(nn::linear(tape, head, "probe", tape.constant(xtr)), train_labels);
    opt.step(head, tape.backward(loss, head), 0.05);
  }
  auto accuracy = [&](const Tensor& x, const std::vector<std::size_t>& y) {
    if (y.empty()) return 0.0;
    Tape tape;
    const Tensor logits = nn::linear(tape, head, "probe", tape.constant(x)).value();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y.size(); ++i) correct += argmax(logits.row(i)) == y[i];
    return static_cast<double>(correct) / static_cast<double>(y.size());
  };
  return {accuracy(xtr, train_labels), accuracy(xte, test_labels)};
}

Tensor class_prototypes(const Tensor& features, const std::vector<std::size_t>& labels, std::size_t n_classes) {
  require(features.rows() == labels.size(), ErrorCode::ShapeMismatch, "feature and label counts differ");
  const std::size_t d = features.cols();
  Tensor proto = Tensor::matrix(n_classes, d);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < n_classes, ErrorCode::InvalidParameter, "label out of range");
    double norm = 0.0;
    for (double v : features.row(i)) norm += v * v;
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    for (std::size_t j = 0; j < d; ++j) proto(labels[i], j) += features(i, j) / norm;
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    double norm = 0.0;
    for (double v : proto.row(k)) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& v : proto.row(k)) v /= norm;
  }
  return proto;
}

Var prototype_entropy(Tape& tape, const Model& model, const Image& image, const Tensor& prototypes, double temperature,
                      const LabelMap* superpixels, CastOutput* out) {
  require(model.kind == Backbone::Cast, ErrorCode::InvalidParameter, "prototype entropy needs the CAST backbone");
  ForwardOptions opts;
  opts.superpixels = superpixels;
  CastOutput o = forward_cast(tape, image, model.cfg, model.params, opts);
  Var cos = ad::matmul_nt(ad::normalize_rows(o.f_class), tape.constant(prototypes));
  Var ent = ad::softmax_entropy(ad::scale(cos, 1.0 / temperature));
  if (out) *out = std::move(o);
  return ent;
}

namespace {

TtaSnapshot snapshot(Tape& tape, const Model& model, const Image& image, const Tensor& prototypes, double temperature,
                     const ForwardOptions& forward, Var* loss) {
  TtaSnapshot s;
  CastOutput out = forward_cast(tape, image, model.cfg, model.params, forward);
  Var cos = ad::matmul_nt(ad::normalize_rows(out.f_class), tape.constant(prototypes));
  Var logits = ad::scale(cos, 1.0 / temperature);
  Var ent = ad::softmax_entropy(logits);
  s.entropy = ent.value().item();
  const Tensor p = ad::softmax_rows(logits).value();
  s.probabilities.assign(p.values().begin(), p.values().end());
  s.hierarchy = std::move(out.hierarchy);
  if (loss) *loss = ent;
  return s;
}

}  // namespace

TtaResult tta_step(const Model& model, const Image& image, const Tensor& prototypes, const TtaConfig& cfg,
                   const LabelMap* superpixels, const ForwardOptions& forward) {
  require(model.kind == Backbone::Cast, ErrorCode::InvalidParameter, "test-time adaptation needs the CAST backbone");
  ForwardOptions fwd = forward;
  LabelMap sp_map;
  if (superpixels) {
    fwd.superpixels = superpixels;
  } else if (!fwd.superpixels) {
    SuperpixelConfig sp = model.cfg.superpixel;
    sp.target_count = model.cfg.level0_count;
    sp_map = compute_superpixels(image, sp);
    fwd.superpixels = &sp_map;
  }

  Model adapted = model;
  adapted.params.set_trainable_only(nn::kNormParamPattern);
  TtaResult r;
  {
    Tape tape;
    Var loss;
    r.before = snapshot(tape, adapted, image, prototypes, cfg.temperature, fwd, &loss);
    const Gradients grads = tape.backward(loss, adapted.params);
    SgdOptimizer opt;
    opt.momentum = cfg.momentum;
    opt.filter = nn::kNormParamPattern;
    opt.step(adapted.params, grads, cfg.lr);
  }
  {
    Tape tape;
    r.after = snapshot(tape, adapted, image, prototypes, cfg.temperature, fwd, nullptr);
  }
  for (const auto& [name, p] : model.params) {
    Parameter& q = adapted.params.at(name);
    q.trainable = p.trainable;
    if (!(q.value == p.value)) r.changed.push_back(name);
  }
  r.adapted = std::move(adapted.params);
  return r;
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot write " + path.string());
  out << "epoch,step,loss,metric\n" << std::setprecision(10);
  for (const TrainLogRow& r : log) out << r.epoch << ',' << r.step << ',' << r.loss << ',' << r.metric << '\n';
  require(static_cast<bool>(out), ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace cast
