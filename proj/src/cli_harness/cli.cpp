#include "infrayolo/cli.hpp"

#include <Eigen/Core>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "infrayolo/accounting.hpp"
#include "infrayolo/builders.hpp"
#include "infrayolo/error.hpp"
#include "infrayolo/model_io.hpp"
#include "json.hpp"

namespace infrayolo {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kClassNames{"person", "car"};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot write " + path.string());
  f << text;
  if (!f) fail(ErrorKind::Io, "short write to " + path.string());
}

json schedule_json(const LrSchedule& s) {
  return {{"mode", s.mode == LrSchedule::Mode::Cosine ? "cosine" : "step"},
          {"initial", s.initial},
          {"final", s.final_lr},
          {"warmup_epochs", s.warmup_epochs},
          {"warmup_factor", s.warmup_factor},
          {"step_at", s.step_at},
          {"step_gamma", s.step_gamma}};
}

json config_json(const RunConfig& c) {
  const auto& t = c.train;
  return {{"command", c.command},
          {"preset", c.preset},
          {"data", c.data},
          {"model", c.model},
          {"teacher", c.teacher},
          {"out", c.out},
          {"epochs", t.epochs},
          {"batch", t.batch},
          {"lr", schedule_json(t.lr)},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"augment", {{"mosaic", t.augment.mosaic}, {"flip", t.augment.flip}, {"jitter", t.augment.jitter}}},
          {"loss", {{"box", t.loss.box}, {"obj", t.loss.obj}, {"cls", t.loss.cls}}},
          {"seed", t.seed},
          {"lambda", c.lambda},
          {"ratio", c.ratio},
          {"scheme", c.scheme},
          {"policy", c.policy},
          {"distill",
           {{"gamma_kd", t.distill.gamma_kd},
            {"beta_kd", t.distill.beta_kd},
            {"temperature", t.distill.temperature},
            {"margin", t.distill.margin},
            {"pure", t.distill.pure}}},
          {"eval",
           {{"conf", t.eval.conf}, {"nms_iou", t.eval.nms_iou}, {"pr_conf", t.eval.pr_conf}, {"match_iou", t.eval.match_iou}}},
          {"split", c.split},
          {"ratios", c.ratios},
          {"finetune_epochs", c.finetune_epochs},
          {"curve_distill", c.curve_distill},
          {"count", c.count},
          {"scene", c.scene}};
}

void write_metadata(const RunConfig& cfg, const fs::path& dir, double seconds, const json& results) {
  json meta;
  meta["tool_version"] = kToolVersion;
  meta["config"] = config_json(cfg);
  meta["seed"] = cfg.train.seed;
  const char* threads = std::getenv(kThreadsEnv);
  meta["threads"] = threads ? threads : "";
  if (!cfg.data.empty() && fs::exists(cfg.data)) meta["dataset_manifest_sha1"] = file_git_sha1(cfg.data);
  if (!cfg.model.empty() && fs::exists(cfg.model)) meta["input_model_sha1"] = file_git_sha1(cfg.model);
  if (!cfg.teacher.empty() && fs::exists(cfg.teacher)) meta["teacher_model_sha1"] = file_git_sha1(cfg.teacher);
  meta["elapsed_seconds"] = seconds;
  meta["results"] = results;
  write_text(dir / "metadata.json", meta.dump(2) + "\n");
}

ModelGraph require_model(const std::string& path, const char* what) {
  if (path.empty()) fail(ErrorKind::Config, std::string("--") + what + " is required");
  return load_model(path);
}

const std::string& require_data(const RunConfig& cfg) {
  if (cfg.data.empty()) fail(ErrorKind::Config, "--data is required");
  if (!fs::exists(cfg.data)) fail(ErrorKind::Io, "dataset manifest not found: " + cfg.data);
  return cfg.data;
}

ModelConfig preset_config(const std::string& name) {
  if (name == "toy") return ModelConfig::toy();
  if (name == "baseline") return ModelConfig::yolov3_baseline();
  fail(ErrorKind::Config, "unknown preset '" + name + "'");
}

WeightPolicy parse_policy(const std::string& p) {
  if (p == "default") return WeightPolicy::Default;
  if (p == "inherit") return WeightPolicy::Inherit;
  if (p == "reinit") return WeightPolicy::Reinitialize;
  fail(ErrorKind::Config, "unknown weight policy '" + p + "'");
}

json eval_json(const EvalResult& r) {
  json per = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    per.push_back({{"class", c < kClassNames.size() ? kClassNames[c] : std::to_string(c)},
                   {"images", m.images},
                   {"instances", m.instances},
                   {"precision", m.precision ? json(*m.precision) : json()},
                   {"recall", m.recall ? json(*m.recall) : json()},
                   {"map50", m.ap ? json(*m.ap) : json()}});
  }
  return {{"precision", r.all.precision.value_or(0.0)},
          {"recall", r.all.recall.value_or(0.0)},
          {"map50", r.map()},
          {"per_class", per}};
}

// Shared body of train / sparsify / finetune / distill.
json run_training(const RunConfig& cfg, ModelGraph& model, ModelGraph* teacher, const fs::path& dir,
                  std::ostream& out) {
  const auto manifest = require_data(cfg);
  const auto train = load_split(manifest, "train");
  const auto test = load_split(manifest, "test");
  TrainOptions opt = cfg.train;
  if (cfg.command == "sparsify") opt.sparsity_lambda = cfg.lambda;
  json results;
  if (cfg.command == "sparsify") {
    write_text(dir / "gamma_before.csv", gamma_histogram_csv(model));
    const auto before = evaluate_model(model, test, opt.eval);
    results["before"] = {{"map50", before.map()}, {"near_zero_gamma", near_zero_fraction(model)}};
  }
  const auto log = train_model(model, train, &test, opt, teacher, [&](const EpochLog& e) {
    out << cfg.command << " epoch " << e.epoch + 1 << "/" << opt.epochs << " lr " << e.lr << " loss " << e.loss.total;
    if (e.evaluated) out << " P " << e.precision << " R " << e.recall << " mAP@0.5 " << e.map;
    out << " (" << e.seconds << " s)\n";
    out.flush();
  });
  write_text(dir / "train_log.csv", epoch_csv(log));
  if (cfg.command == "sparsify") write_text(dir / "gamma_after.csv", gamma_histogram_csv(model));
  save_model(model, (dir / "model.iym").string());
  const auto r = evaluate_model(model, test, opt.eval);
  write_text(dir / "metrics.txt", format_metrics_table(r, kClassNames));
  out << format_metrics_table(r, kClassNames);
  results["final"] = eval_json(r);
  results["near_zero_gamma"] = near_zero_fraction(model);
  results["params"] = count_params(model);
  return results;
}

}  // namespace

void run_command(const RunConfig& cfg, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = cfg.out;
  fs::create_directories(dir);
  json results;
  const auto& c = cfg.command;
  if (c == "gen-data") {
    SceneSpec spec = cfg.scene == "fidelity" ? SceneSpec::fidelity() : SceneSpec::desk();
    if (cfg.scene != "desk" && cfg.scene != "fidelity") fail(ErrorKind::Config, "unknown scene '" + cfg.scene + "'");
    spec.seed = cfg.train.seed;
    const auto manifest = write_dataset(dir, spec, cfg.count);
    const auto all = load_split(manifest, "all");
    const auto h = size_histogram(all);
    results = {{"manifest", manifest.string()}, {"count", cfg.count}, {"size_fractions", h}};
    out << "wrote " << cfg.count << " images to " << dir.string() << " (small " << h[0] << ", medium " << h[1]
        << ", large " << h[2] << ")\n";
    RunConfig with_data = cfg;
    with_data.data = manifest.string();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_metadata(with_data, dir, s, results);
    return;
  } else if (c == "train") {
    auto mc = preset_config(cfg.preset);
    auto model = build_infra_yolo(mc, cfg.train.seed);
    results = run_training(cfg, model, nullptr, dir, out);
  } else if (c == "sparsify" || c == "finetune") {
    auto model = require_model(cfg.model, "model");
    if (c == "sparsify" && !(cfg.lambda > 0)) fail(ErrorKind::Config, "sparsify needs --lambda > 0");
    results = run_training(cfg, model, nullptr, dir, out);
  } else if (c == "distill") {
    auto model = require_model(cfg.model, "model");
    auto teacher = require_model(cfg.teacher, "teacher");
    results = run_training(cfg, model, &teacher, dir, out);
  } else if (c == "prune") {
    auto model = require_model(cfg.model, "model");
    const auto plan = make_plan(model, cfg.ratio, cfg.scheme);
    auto pruned = apply_prune(model, plan, parse_policy(cfg.policy), cfg.train.seed);
    const auto report = format_plan_report(plan);
    write_text(dir / "prune_report.txt", report);
    save_model(pruned, (dir / "model.iym").string());
    const auto prunable = select_layers(model, cfg.scheme).prunable();
    const double before = static_cast<double>(count_params(model)), after = static_cast<double>(count_params(pruned));
    const double pb = static_cast<double>(count_layer_params(model, prunable));
    const double pa = static_cast<double>(count_layer_params(pruned, prunable));
    const auto& det = model.detector();
    results = {{"threshold", plan.threshold},
               {"params_before", before},
               {"params_after", after},
               {"params_reduction", 1.0 - after / before},
               {"prunable_params_reduction", 1.0 - pa / pb},
               {"flops_before", count_flops(model, det.input_height, det.input_width)},
               {"flops_after", count_flops(pruned, det.input_height, det.input_width)}};
    out << report;
    out << "params " << before << " -> " << after << " (" << 100.0 * (1.0 - after / before) << "% fewer)\n";
  } else if (c == "eval") {
    auto model = require_model(cfg.model, "model");
    const auto samples = load_split(require_data(cfg), cfg.split);
    const auto r = evaluate_model(model, samples, cfg.train.eval);
    const auto table = format_metrics_table(r, kClassNames);
    write_text(dir / "metrics.txt", table);
    out << table;
    results = eval_json(r);
  } else if (c == "flops") {
    auto model = require_model(cfg.model, "model");
    const auto& det = model.detector();
    const int h = cfg.height > 0 ? cfg.height : det.input_height;
    const int w = cfg.width > 0 ? cfg.width : det.input_width;
    const auto table = flops_table(model, h, w);
    write_text(dir / "flops.txt", table);
    out << table;
    results = {{"params", count_params(model)}, {"flops", count_flops(model, h, w)}, {"height", h}, {"width", w}};
  } else if (c == "curve") {
    auto model = require_model(cfg.model, "model");
    const auto manifest = require_data(cfg);
    const auto train = load_split(manifest, "train");
    const auto test = load_split(manifest, "test");
    CurveOptions co;
    co.scheme = cfg.scheme;
    co.ratios = cfg.ratios.empty() ? default_ratio_grid(cfg.scheme) : cfg.ratios;
    co.policy = parse_policy(cfg.policy);
    co.finetune = cfg.train;
    co.finetune.epochs = cfg.finetune_epochs;
    co.finetune.eval_every = 0;
    co.distill = cfg.curve_distill;
    const auto points = prune_curve(model, train, test, co, [&](const CurvePoint& p) {
      out << "g " << p.ratio << " params " << p.params << " flops " << p.flops << " mAP@0.5 " << p.map << "\n";
      out.flush();
    });
    write_text(dir / "curve.csv", curve_csv(points));
    results["points"] = static_cast<int>(points.size());
  } else {
    fail(ErrorKind::Config, "unknown command '" + c + "'");
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_metadata(cfg, dir, s, results);
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  if (const char* t = std::getenv(kThreadsEnv)) {
    const int n = std::atoi(t);
    if (n > 0) Eigen::setNbThreads(n);
  }
  CLI::App app{"infrayolo desk-scale pipeline"};
  app.require_subcommand(1);
  RunConfig cfg;
  auto& t = cfg.train;

  auto common = [&](CLI::App* s) {
    s->add_option("--out", cfg.out, "Output directory");
    s->add_option("--seed", t.seed, "Random seed");
  };
  auto data_opt = [&](CLI::App* s) { s->add_option("--data", cfg.data, "Dataset manifest"); };
  auto model_opt = [&](CLI::App* s) { s->add_option("--model", cfg.model, "Input model file"); };
  auto eval_opts = [&](CLI::App* s) {
    s->add_option("--conf", t.eval.conf, "Detection confidence floor for mAP");
    s->add_option("--nms-iou", t.eval.nms_iou, "NMS IoU threshold");
    s->add_option("--pr-conf", t.eval.pr_conf, "Confidence for precision/recall");
  };
  auto train_opts = [&](CLI::App* s) {
    s->add_option("--epochs", t.epochs, "Epochs");
    s->add_option("--batch", t.batch, "Batch size");
    s->add_option("--lr0", t.lr.initial, "Initial learning rate");
    s->add_option("--lrf", t.lr.final_lr, "Final learning rate (cosine)");
    s->add_option("--warmup", t.lr.warmup_epochs, "Warmup epochs");
    s->add_option("--momentum", t.momentum, "SGD momentum");
    s->add_option("--weight-decay", t.weight_decay, "Weight decay");
    s->add_option("--mosaic", t.augment.mosaic, "Mosaic probability");
    s->add_option("--flip", t.augment.flip, "Horizontal flip probability");
    s->add_flag("!--no-jitter", t.augment.jitter, "Disable photometric jitter");
    s->add_option("--eval-every", t.eval_every, "Evaluate every N epochs (0: last only)");
    s->add_option("--box-weight", t.loss.box, "Box loss weight");
    s->add_option("--obj-weight", t.loss.obj, "Objectness loss weight");
    s->add_option("--cls-weight", t.loss.cls, "Class loss weight");
    eval_opts(s);
  };
  auto distill_opts = [&](CLI::App* s) {
    s->add_option("--gamma-kd", t.distill.gamma_kd, "Classification distillation weight");
    s->add_option("--beta-kd", t.distill.beta_kd, "Box distillation weight");
    s->add_option("--temperature", t.distill.temperature, "Softmax temperature");
    s->add_option("--margin", t.distill.margin, "Teacher-bounded regression margin");
    s->add_flag("--pure", t.distill.pure, "Drop the ground-truth detection loss");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  common(gen);
  gen->add_option("--count", cfg.count, "Number of images");
  gen->add_option("--scene", cfg.scene, "desk | fidelity");

  auto* train = app.add_subcommand("train", "Train from scratch");
  common(train);
  data_opt(train);
  train_opts(train);
  train->add_option("--preset", cfg.preset, "toy | baseline");

  auto* sparsify = app.add_subcommand("sparsify", "Sparsity training on BN scale factors");
  common(sparsify);
  data_opt(sparsify);
  model_opt(sparsify);
  train_opts(sparsify);
  sparsify->add_option("--lambda", cfg.lambda, "Scale penalty factor");

  auto* prune = app.add_subcommand("prune", "Channel pruning");
  common(prune);
  model_opt(prune);
  prune->add_option("--ratio", cfg.ratio, "Global pruning ratio g");
  prune->add_option("--scheme", cfg.scheme, "1 or 2");
  prune->add_option("--policy", cfg.policy, "default | inherit | reinit");
  prune->add_flag("--report", "Print the per-layer report (always written to prune_report.txt)");

  auto* finetune = app.add_subcommand("finetune", "Fine-tune a model");
  common(finetune);
  data_opt(finetune);
  model_opt(finetune);
  train_opts(finetune);

  auto* distill = app.add_subcommand("distill", "Distillation fine-tuning against a teacher");
  common(distill);
  data_opt(distill);
  model_opt(distill);
  train_opts(distill);
  distill_opts(distill);
  distill->add_option("--teacher", cfg.teacher, "Teacher model file");

  auto* eval = app.add_subcommand("eval", "Evaluate a model");
  common(eval);
  data_opt(eval);
  model_opt(eval);
  eval_opts(eval);
  eval->add_option("--split", cfg.split, "train | test | all");

  auto* flops = app.add_subcommand("flops", "Params and FLOPs table");
  common(flops);
  model_opt(flops);
  flops->add_option("--height", cfg.height, "Input height");
  flops->add_option("--width", cfg.width, "Input width");

  auto* curve = app.add_subcommand("curve", "Sweep the pruning ratio");
  common(curve);
  data_opt(curve);
  model_opt(curve);
  train_opts(curve);
  distill_opts(curve);
  curve->add_option("--scheme", cfg.scheme, "1 or 2");
  curve->add_option("--ratios", cfg.ratios, "Ratios to visit")->delimiter(',');
  curve->add_option("--policy", cfg.policy, "default | inherit | reinit");
  curve->add_option("--finetune-epochs", cfg.finetune_epochs, "Fine-tune epochs per ratio");
  curve->add_flag("--distill", cfg.curve_distill, "Distill from the unpruned model while fine-tuning");

  // Phase-specific schedule defaults, applied before parsing overrides them.
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "sparsify") {
      t.lr = LrSchedule::sparsify_default();
      break;
    }
    if (args[i] == "finetune" || args[i] == "distill" || args[i] == "curve" || args[i] == "train") break;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    // Subcommand help arrives as a parse error with exit code 0.
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return 0;
    }
    err << json{{"error", {{"kind", "usage"}, {"message", e.what()}}}}.dump() << "\n";
    return 2;
  }
  cfg.command = app.get_subcommands().front()->get_name();
  try {
    run_command(cfg, out);
  } catch (const Error& e) {
    err << json{{"error", {{"command", cfg.command}, {"kind", to_string(e.kind())}, {"message", e.what()}}}}.dump()
        << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << json{{"error", {{"command", cfg.command}, {"kind", "internal"}, {"message", e.what()}}}}.dump() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace infrayolo
