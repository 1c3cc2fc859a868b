#include "cast/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "cast/checkpoint.hpp"
#include "cast/error.hpp"
#include "cast/eval.hpp"
#include "cast/gradcheck.hpp"
#include "cast/pipeline.hpp"
#include "cast/superpixel.hpp"

namespace cast {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::MissingFile, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorCode::IoFailure, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorCode::IoFailure, "write failed for " + path.string());
}

std::string number(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

Image input_image(const RunConfig& run, const Config& cfg, const SynthSample** sample_out,
                  std::vector<SynthSample>& storage) {
  if (run.image) return load_image(*run.image);
  require(run.sample.has_value(), ErrorCode::InvalidParameter, "give --image or --sample");
  storage = eval_set(cfg);
  require(*run.sample < storage.size(), ErrorCode::InvalidParameter,
          "--sample must be below eval.n_images (" + std::to_string(storage.size()) + ")");
  if (sample_out) *sample_out = &storage[*run.sample];
  return storage[*run.sample].image;
}

Model checkpoint_model(const RunConfig& run, const Config& cfg) {
  require(run.checkpoint.has_value(), ErrorCode::ConfigMismatch, "this command needs --checkpoint");
  return load_model(cfg.model, *run.checkpoint);
}

MetricReport scalar_report(const std::string& name, double value) {
  MetricReport r;
  r.name = name;
  r.mean = value;
  return r;
}

Tensor train_prototypes(const Model& model, const Config& cfg) {
  const DataSplit split = make_split(cfg.train);
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  for (const SynthSample& s : split.train) images.push_back(s.image), labels.push_back(s.class_label);
  return class_prototypes(class_features(model, images), labels, cfg.model.n_classes);
}

}  // namespace

Config resolve_config(RunConfig& run) {
  Config base;
  if (run.config_path) {
    json j = read_json(*run.config_path);
    if (j.is_object() && j.contains("config") && j.contains("config_hash")) {
      if (!run.seed_given && j.contains("seed")) run.seed = j["seed"].get<std::uint64_t>();
      j = j["config"];
    }
    base = config_from_json(j);
  }
  json j = to_json(base);
  j = apply_overrides(j, run.overrides);
  if (run.epochs) {
    if (run.mode == "contrastive")
      j["train"]["contrastive"]["epochs"] = *run.epochs;
    else
      j["train"]["epochs"] = *run.epochs;
  }
  return config_from_json(j);
}

void write_manifest(const RunConfig& run, const Config& cfg) {
  fs::create_directories(run.out);
  nlohmann::ordered_json m;
  m["command"] = run.command;
  m["seed"] = run.seed;
  m["config_hash"] = config_hash(cfg);
  m["version"] = kVersion;
  m["compiler"] = __VERSION__;
  if (run.checkpoint) m["checkpoint"] = run.checkpoint->string();
  if (run.image) m["image"] = run.image->string();
  if (run.sample) m["sample"] = *run.sample;
  if (run.extra_pool) m["extra_pool"] = *run.extra_pool;
  if (run.command == "train") {
    m["backbone"] = run.backbone;
    m["mode"] = run.mode;
  }
  m["config"] = to_json(cfg);
  write_text(run.out / "manifest.json", m.dump(2) + "\n");
}

void cmd_train(const RunConfig& run, const Config& cfg, std::ostream& log) {
  require(run.backbone == "cast" || run.backbone == "vit", ErrorCode::InvalidConfig, "--backbone is cast or vit");
  require(run.mode == "supervised" || run.mode == "contrastive", ErrorCode::InvalidConfig,
          "--mode is supervised or contrastive");
  const DataSplit split = make_split(cfg.train);
  Model model = make_model(run.backbone == "vit" ? Backbone::Vit : Backbone::Cast, cfg.model, run.seed);
  TrainOptions opts;
  opts.log_csv = run.out / "train_log.csv";
  opts.divergence_checkpoint = run.out / "diverged.ckpt";
  opts.on_epoch = [&](const TrainLogRow& r) {
    log << "epoch " << r.epoch << " loss " << number(r.loss) << " metric " << number(r.metric) << "\n" << std::flush;
  };
  const TrainResult result = run.mode == "supervised"
                                 ? train_supervised(model, split.train, split.val, cfg.train, run.seed, opts)
                                 : train_contrastive(model, split.train, split.train, split.val, cfg.train, run.seed, opts);
  write_train_log(result.log, run.out / "train_log.csv");
  save_checkpoint(model.params, run.out / "model.ckpt");
  log << "trained " << result.epochs_run << " epochs, final metric " << number(result.final_metric) << "\n";
}

void cmd_probe(const RunConfig& run, const Config& cfg, std::ostream& log) {
  const Model model = checkpoint_model(run, cfg);
  const DataSplit split = make_split(cfg.train);
  std::vector<Image> a, b;
  std::vector<std::size_t> la, lb;
  for (const SynthSample& s : split.train) a.push_back(s.image), la.push_back(s.class_label);
  for (const SynthSample& s : split.val) b.push_back(s.image), lb.push_back(s.class_label);
  const ProbeResult r =
      linear_probe(class_features(model, a), la, class_features(model, b), lb, cfg.model.n_classes, run.seed);
  write_text(run.out / "probe.csv",
             "split,accuracy\ntrain," + number(r.train_accuracy) + "\nval," + number(r.accuracy) + "\n");
  log << "probe accuracy " << number(r.accuracy) << " (train " << number(r.train_accuracy) << ")\n";
}

void cmd_eval(const RunConfig& run, const Config& cfg, std::ostream& log) {
  std::vector<MetricReport> reports;
  if (run.pred || run.gt) {
    require(run.pred && run.gt, ErrorCode::InvalidParameter, "--pred and --gt go together");
    const LabelMap pred = load_label_map(*run.pred), gt = load_label_map(*run.gt);
    reports.push_back(region_miou(pred, gt, std::max(pred.n_segments, gt.n_segments)));
    reports.push_back(boundary_fscore(pred, gt, cfg.eval.boundary_tolerance));
    for (MetricReport& r : hierarchical_prf({pred}, {gt}, std::max(pred.n_segments, gt.n_segments))) {
      r.name = "prf";
      reports.push_back(r);
    }
  } else {
    const Model model = checkpoint_model(run, cfg);
    const std::vector<SynthSample> samples = eval_set(cfg);
    std::size_t correct = 0;
    for (const SynthSample& s : samples) {
      Tape tape;
      const Tensor logits = embed(tape, model, s.image).logits.value();
      const auto top = std::max_element(logits.values().begin(), logits.values().end()) - logits.values().begin();
      correct += static_cast<std::size_t>(top) == s.class_label;
    }
    reports.push_back(scalar_report("classification_accuracy",
                                    samples.empty() ? 0.0 : static_cast<double>(correct) / samples.size()));
    const SegmentationSummary seg =
        evaluate_segmentation(model, samples, run.ways, cfg.eval.boundary_tolerance, run.seed);
    reports.push_back(scalar_report("foreground_miou_" + std::to_string(run.ways) + "way", seg.foreground_miou));
    if (model.kind == Backbone::Cast) {
      reports.push_back(scalar_report("superpixel_boundary_f", seg.boundary_f));
      MetricReport nest = scalar_report("nestedness", seg.nestedness.fraction());
      nest.extra["units"] = static_cast<double>(seg.nestedness.units);
      nest.extra["degenerate"] = static_cast<double>(seg.nestedness.degenerate);
      reports.push_back(nest);
      const char* names[] = {"prf_parts", "prf_object", "prf_figure"};
      const std::size_t skip = 3 - seg.hierarchy.size();
      for (std::size_t l = 0; l < seg.hierarchy.size(); ++l) {
        MetricReport r = seg.hierarchy[l];
        r.name = names[l + skip];
        reports.push_back(r);
      }
    }
  }
  write_report_csv(reports, run.out / "metrics.csv");
  write_report_json(reports, run.out / "metrics.json");
  for (const MetricReport& r : reports) log << r.name << " " << number(r.mean) << "\n";
}

void cmd_segment(const RunConfig& run, const Config& cfg, std::ostream& log) {
  const Model model = checkpoint_model(run, cfg);
  require(model.kind == Backbone::Cast, ErrorCode::InvalidParameter, "segment needs a CAST checkpoint");
  std::vector<SynthSample> storage;
  const Image image = input_image(run, cfg, nullptr, storage);
  ForwardOptions opts;
  if (run.extra_pool) opts.extra_pool = {*run.extra_pool};
  Tape tape;
  const CastOutput out = forward_cast(tape, image, cfg.model, model.params, opts);
  export_hierarchy(out.hierarchy, run.out);
  save_image(render_hierarchy_overlay(image, overlay_levels(out.hierarchy)), run.out / "overlay.ppm");

  const Tensor p = ad::softmax_rows(tape.constant(out.logits.value())).value();
  const auto top = static_cast<std::size_t>(std::max_element(p.values().begin(), p.values().end()) - p.values().begin());
  write_text(run.out / "prediction.csv", "class,confidence\n" + std::to_string(top) + "," + number(p[top]) + "\n");
  log << "class " << top << " confidence " << number(p[top]) << "\n";
}

void cmd_tta(const RunConfig& run, const Config& cfg, std::ostream& log) {
  const Model model = checkpoint_model(run, cfg);
  std::vector<SynthSample> storage;
  const SynthSample* sample = nullptr;
  const Image image = input_image(run, cfg, &sample, storage);
  const Tensor prototypes = train_prototypes(model, cfg);
  ForwardOptions fwd;
  if (run.extra_pool) fwd.extra_pool = {*run.extra_pool};
  const TtaResult r = tta_step(model, image, prototypes, cfg.tta, nullptr, fwd);
  export_hierarchy(r.before.hierarchy, run.out / "before");
  export_hierarchy(r.after.hierarchy, run.out / "after");
  save_checkpoint(r.adapted, run.out / "adapted.ckpt");

  std::string changed;
  for (const std::string& name : r.changed) changed += name + "\n";
  write_text(run.out / "changed_params.txt", changed);

  std::ostringstream csv;
  csv << "stage,entropy,predicted,confidence";
  if (sample) csv << ",foreground_miou";
  csv << "\n";
  for (const auto* snap : {&r.before, &r.after}) {
    const auto& pr = snap->probabilities;
    const auto top = static_cast<std::size_t>(std::max_element(pr.begin(), pr.end()) - pr.begin());
    csv << (snap == &r.before ? "before" : "after") << ',' << number(snap->entropy) << ',' << top << ','
        << number(pr[top]);
    if (sample) csv << ',' << number(foreground_miou(cast_segments(snap->hierarchy, run.ways), sample->figure));
    csv << "\n";
  }
  write_text(run.out / "tta.csv", csv.str());
  log << "entropy " << number(r.before.entropy) << " -> " << number(r.after.entropy) << ", " << r.changed.size()
      << " tensors changed\n";
}

void cmd_gradcheck(const RunConfig& run, const Config& cfg, std::ostream& log) {
  Model model = make_model(Backbone::Cast, cfg.model, run.seed);
  model.params.set_trainable_only(kTrainableParams);
  const SynthSample sample = synth_sample(run.seed, 0, run.seed % kSynthClasses, cfg.model.image_size);
  const LabelMap sp = compute_superpixels(sample.image, cfg.model.superpixel);
  const ModelConfig mc = cfg.model;
  auto build = [&](Tape& tape, const ParamStore& store) {
    ForwardOptions opts;
    opts.superpixels = &sp;
    const CastOutput out = forward_cast(tape, sample.image, mc, store, opts);
    const std::size_t label[] = {sample.class_label};
    return ad::cross_entropy(out.logits, label);
  };
  GradCheckOptions o;
  o.tolerance = run.tolerance;
  o.max_entries_per_param = run.entries;
  o.seed = run.seed;
  const GradCheckReport r = grad_check(model.params, build, o);
  nlohmann::ordered_json j;
  j["max_rel_error"] = r.max_rel_error;
  j["tolerance"] = run.tolerance;
  j["passed"] = r.passed;
  j["checked"] = r.checked;
  j["worst"] = {{"name", r.worst.name},
                {"index", r.worst.index},
                {"analytic", r.worst.analytic},
                {"numeric", r.worst.numeric}};
  write_text(run.out / "gradcheck.json", j.dump(2) + "\n");
  log << (r.passed ? "PASS" : "FAIL") << " max rel error " << number(r.max_rel_error) << " over " << r.checked
      << " entries\n";
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical segmentation tokens: training, segmentation and evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  RunConfig run;
  std::string config_path;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config or a run manifest");
    sub->add_option("--seed", run.seed, "Run seed (default 42)");
    sub->add_option("--out", run.out, "Output directory")->capture_default_str();
    sub->add_option("--override", run.overrides, "dot.path=value, JSON-parsed when possible");
    sub->add_option("--extra-pool", run.extra_pool, "Pool to N more segments at inference");
  };
  auto with_checkpoint = [&](CLI::App* sub) { sub->add_option("--checkpoint", run.checkpoint, "Model checkpoint"); };
  auto with_image = [&](CLI::App* sub) {
    sub->add_option("--image", run.image, "Binary PPM image");
    sub->add_option("--sample", run.sample, "Index into the synthetic evaluation set");
  };

  CLI::App* train = app.add_subcommand("train", "Train a model on the synthetic set");
  common(train);
  train->add_option("--backbone", run.backbone, "cast or vit")->capture_default_str();
  train->add_option("--mode", run.mode, "supervised or contrastive")->capture_default_str();
  train->add_option("--epochs", run.epochs, "Override the epoch count of the chosen mode");

  CLI::App* probe = app.add_subcommand("probe", "Linear probe on frozen class features");
  common(probe);
  with_checkpoint(probe);

  CLI::App* eval = app.add_subcommand("eval", "Metrics on the evaluation set, or on a pred/gt pair of maps");
  common(eval);
  with_checkpoint(eval);
  eval->add_option("--pred", run.pred, "Predicted label map (PGM)");
  eval->add_option("--gt", run.gt, "Ground-truth label map (PGM)");
  eval->add_option("--ways", run.ways, "Segment count for the foreground mIoU")->capture_default_str();

  CLI::App* segment = app.add_subcommand("segment", "Export the segmentation hierarchy of one image");
  common(segment);
  with_checkpoint(segment);
  with_image(segment);

  CLI::App* tta = app.add_subcommand("tta", "One entropy-minimisation step on one image");
  common(tta);
  with_checkpoint(tta);
  with_image(tta);
  tta->add_option("--ways", run.ways, "Segment count for the foreground mIoU")->capture_default_str();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full model");
  common(gradcheck);
  gradcheck->add_option("--tolerance", run.tolerance)->capture_default_str();
  gradcheck->add_option("--entries", run.entries, "Entries sampled per tensor (0 = all)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    run.command = sub->get_name();
    run.seed_given = sub->count("--seed") > 0;
  }
  if (!config_path.empty()) run.config_path = config_path;

  Config cfg;
  try {
    cfg = resolve_config(run);
    write_manifest(run, cfg);
  } catch (const Error& e) {
    err << "config error: " << e.what() << "\n";
    return e.code() == ErrorCode::IoFailure ? kExitRuntime : kExitConfig;
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (run.command == "train") cmd_train(run, cfg, out);
    else if (run.command == "probe") cmd_probe(run, cfg, out);
    else if (run.command == "eval") cmd_eval(run, cfg, out);
    else if (run.command == "segment") cmd_segment(run, cfg, out);
    else if (run.command == "tta") cmd_tta(run, cfg, out);
    else cmd_gradcheck(run, cfg, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    const bool config = e.code() == ErrorCode::InvalidConfig || e.code() == ErrorCode::ConfigMismatch;
    return config ? kExitConfig : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace cast
