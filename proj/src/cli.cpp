#include "mem4d/cli.hpp"

#include <cstdio>
#include <fstream>
#include <optional>

#include <CLI11.hpp>

namespace mem4d::cli {

namespace fs = std::filesystem;

namespace {

fs::path required_path(const RunConfig& config, const std::string& key, const std::string& flag) {
  const std::string& v = config.str(key);
  if (v.empty()) throw ConfigError(key + " is required (" + flag + ")");
  return v;
}

std::vector<scene::Sequence> load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  std::vector<scene::Sequence> out;
  for (const auto& dir : scene::list_sequences(root)) out.push_back(scene::read_sequence(dir));
  if (out.empty()) throw IoError("no sequences under " + root.string());
  return out;
}

std::vector<pipeline::SequenceTensors> tensors_of(const std::vector<scene::Sequence>& seqs,
                                                  const pipeline::ModelConfig& model) {
  std::vector<pipeline::SequenceTensors> out;
  for (const auto& s : seqs) {
    if (s.height != model.image_height || s.width != model.image_width) {
      throw InputError("sequence " + s.name + " is " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                       ", model expects " + std::to_string(model.image_height) + "x" +
                       std::to_string(model.image_width));
    }
    out.push_back(pipeline::to_tensors(s));
  }
  return out;
}

}  // namespace

std::vector<fs::path> cmd_generate(const RunConfig& config) {
  const fs::path out = required_path(config, "paths.out", "--out");
  const auto seqs = scene::generate_dataset(out, config.uns("data.sequences"), config.uns("seed"), config.scene());
  config.echo_to(out);
  return seqs;
}

fs::path cmd_train(const RunConfig& config, std::ostream* progress) {
  const fs::path out = required_path(config, "paths.out", "--out");
  const fs::path data_dir = required_path(config, "paths.data", "--data");
  const pipeline::TrainConfig tc = config.train();
  const std::string init_from = config.str("paths.init_from");
  if (tc.stage == 2 && init_from.empty()) {
    throw ConfigError("stage 2 resumes from a stage-1 checkpoint: pass --init-from <checkpoint.m4ck>");
  }
  std::unique_ptr<pipeline::Model> model;
  if (!init_from.empty()) {
    model = pipeline::model_from_checkpoint(read_checkpoint(init_from));
  } else {
    model = std::make_unique<pipeline::Model>(config.model(), config.wiring());
  }
  const auto data = tensors_of(load_dataset(data_dir), model->config());

  fs::create_directories(out);
  config.echo_to(out);
  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (out / "train_log.jsonl").string());
  auto result = pipeline::train_stage(*model, tc, data, &log);
  if (!init_from.empty()) result.checkpoint.meta["init_from"] = init_from;
  const fs::path ckpt = out / "checkpoint.m4ck";
  write_checkpoint(ckpt, result.checkpoint);
  if (progress != nullptr) {
    *progress << "trained " << result.log.size() << " steps (" << result.skipped << " skipped)";
    if (!result.log.empty()) *progress << ", final loss " << result.log.back().total;
    *progress << "\ncheckpoint: " << ckpt.string() << '\n';
  }
  return ckpt;
}

fs::path cmd_stream(const RunConfig& config, bool per_frame) {
  const fs::path out = required_path(config, "paths.out", "--out");
  const fs::path ckpt = required_path(config, "paths.checkpoint", "--checkpoint");
  const fs::path seq_dir = required_path(config, "paths.sequence", "--sequence");
  const auto model = pipeline::model_from_checkpoint(read_checkpoint(ckpt));
  const scene::Sequence seq = scene::read_sequence(seq_dir);
  const auto tensors = tensors_of({seq}, model->config());
  const eval::PredictedSequence pred = pipeline::stream_sequence(*model, tensors.front());

  fs::create_directories(out);
  config.echo_to(out);
  eval::write_predictions(out, pred);
  std::vector<double> points, confidence;
  std::vector<float> rgb;
  for (std::size_t i = 0; i < pred.x_global.size(); ++i) {
    const auto& colours = seq.frames[i].rgb;
    if (per_frame) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%04zu.ply", i);
      pipeline::write_ply(out / name, pred.x_global[i], pred.confidence[i], colours);
    }
    points.insert(points.end(), pred.x_global[i].begin(), pred.x_global[i].end());
    confidence.insert(confidence.end(), pred.confidence[i].begin(), pred.confidence[i].end());
    rgb.insert(rgb.end(), colours.begin(), colours.end());
  }
  pipeline::write_ply(out / "fused.ply", points, confidence, rgb);
  return out;
}

fs::path cmd_eval(const RunConfig& config) {
  const fs::path out = required_path(config, "paths.out", "--out");
  const fs::path pred_root = required_path(config, "paths.predictions", "--predictions");
  const fs::path gt_root = required_path(config, "paths.gt", "--gt");
  const eval::EvalOptions options = config.evaluation();

  std::vector<fs::path> pred_dirs;
  if (fs::exists(pred_root / "predictions.json")) {
    pred_dirs.push_back(pred_root);
  } else if (fs::is_directory(pred_root)) {
    for (const auto& e : fs::directory_iterator(pred_root))
      if (fs::exists(e.path() / "predictions.json")) pred_dirs.push_back(e.path());
    std::sort(pred_dirs.begin(), pred_dirs.end());
  }
  if (pred_dirs.empty()) throw IoError("no predictions found at " + pred_root.string());

  std::vector<eval::SequenceMetrics> metrics;
  for (const auto& dir : pred_dirs) {
    const eval::PredictedSequence pred = eval::read_predictions(dir);
    // Ground truth is either the sequence directory itself or a dataset containing it by name.
    fs::path gt = gt_root;
    if (!fs::exists(gt / "sequence.json")) gt = gt_root / pred.name;
    if (!fs::exists(gt / "sequence.json")) {
      throw IoError("ground truth for '" + pred.name + "' not found: " + (gt / "sequence.json").string());
    }
    metrics.push_back(eval::evaluate_sequence(pred, scene::read_sequence(gt), options));
  }
  fs::create_directories(out);
  config.echo_to(out);
  const fs::path report = out / "metrics.json";
  std::ofstream f(report, std::ios::trunc);
  if (!f) throw IoError("cannot write " + report.string());
  f << eval::metrics_report(metrics).dump(2) << '\n';
  return report;
}

fs::path cmd_ablate(const RunConfig& config, std::ostream* progress) {
  const fs::path out = required_path(config, "paths.out", "--out");
  const fs::path data_dir = required_path(config, "paths.data", "--data");
  pipeline::AblationConfig ac;
  ac.model = config.model();
  ac.stage1 = config.train();
  ac.stage1.stage = 1;
  ac.stage2 = ac.stage1;
  ac.stage2.stage = 2;
  ac.stage2.steps = config.uns("ablate.stage2_steps");
  ac.eval = config.evaluation();
  ac.variants = config.variants();

  auto train = load_dataset(data_dir);
  std::vector<scene::Sequence> evaluation;
  if (!config.str("paths.eval_data").empty()) {
    evaluation = load_dataset(config.str("paths.eval_data"));
  } else {
    const std::size_t holdout = config.uns("ablate.holdout");
    if (holdout == 0 || holdout >= train.size()) {
      throw ConfigError("ablate.holdout must leave at least one training sequence (have " +
                        std::to_string(train.size()) + ")");
    }
    evaluation.assign(train.end() - static_cast<long>(holdout), train.end());
    train.resize(train.size() - holdout);
  }
  const auto report = pipeline::run_ablation(ac, tensors_of(train, ac.model), evaluation, progress);
  fs::create_directories(out);
  config.echo_to(out);
  std::ofstream(out / "ablation.json", std::ios::trunc) << report.to_json().dump(2) << '\n';
  std::ofstream(out / "ablation.txt", std::ios::trunc) << report.to_text();
  if (progress != nullptr) *progress << report.to_text();
  return out;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const std::map<std::string, std::string>& env) {
  CLI::App app{"Dual-memory streaming 4D reconstruction: generate, train, stream, eval, ablate"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_file;
  std::vector<std::string> assignments;
  // Flag values in the order CLI11 saw them; applied last so they take precedence.
  std::vector<std::pair<std::string, std::string>> flags;
  bool per_frame = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", assignments, "override one key, e.g. --set train.steps=100")->take_all();
    sub->add_option_function<std::string>("--seed", [&](const std::string& v) { flags.emplace_back("seed", v); }, "seed");
    sub->add_option_function<std::string>("--out", [&](const std::string& v) { flags.emplace_back("paths.out", v); },
                                          "output directory");
  };
  auto mapped = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(flag, [&flags, key](const std::string& v) { flags.emplace_back(key, v); }, help);
  };

  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset");
  common(gen);
  mapped(gen, "--seqs", "data.sequences", "number of sequences");
  mapped(gen, "--frames", "data.frames", "frames per sequence");

  auto* train = app.add_subcommand("train", "Train one curriculum stage");
  common(train);
  mapped(train, "--data", "paths.data", "dataset root");
  mapped(train, "--stage", "train.stage", "1 or 2");
  mapped(train, "--steps", "train.steps", "optimizer steps");
  mapped(train, "--init-from", "paths.init_from", "checkpoint to start from (required for stage 2)");
  mapped(train, "--variant", "model.variant", "wiring variant");

  auto* stream = app.add_subcommand("stream", "Stream a sequence and export predictions");
  common(stream);
  mapped(stream, "--checkpoint", "paths.checkpoint", "model checkpoint");
  mapped(stream, "--sequence", "paths.sequence", "sequence directory");
  stream->add_flag("--export-per-frame", per_frame, "also write one PLY per frame");

  auto* ev = app.add_subcommand("eval", "Score predictions against ground truth");
  common(ev);
  mapped(ev, "--predictions", "paths.predictions", "prediction directory");
  mapped(ev, "--gt", "paths.gt", "ground-truth sequence or dataset directory");

  auto* ablate = app.add_subcommand("ablate", "Train and compare ablation variants");
  common(ablate);
  mapped(ablate, "--data", "paths.data", "dataset root");
  mapped(ablate, "--eval-data", "paths.eval_data", "held-out dataset root");
  mapped(ablate, "--variants", "ablate.variants", "comma-separated variant list");
  mapped(ablate, "--steps", "train.steps", "stage-1 steps per variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig config;
    if (!config_file.empty()) config.load_file(config_file);
    config.apply_environment(env);
    for (const auto& a : assignments) config.set_assignment(a);
    for (const auto& [k, v] : flags) config.set(k, v);

    if (gen->parsed()) {
      const auto seqs = cmd_generate(config);
      out << "wrote " << seqs.size() << " sequences to " << config.str("paths.out") << '\n';
    } else if (train->parsed()) {
      cmd_train(config, &out);
    } else if (stream->parsed()) {
      const auto dir = cmd_stream(config, per_frame);
      out << "predictions: " << dir.string() << '\n';
    } else if (ev->parsed()) {
      const auto report = cmd_eval(config);
      out << "metrics: " << report.string() << '\n';
    } else if (ablate->parsed()) {
      cmd_ablate(config, &out);
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mem4d::cli
