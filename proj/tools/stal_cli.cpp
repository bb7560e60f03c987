#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "stal/adm.hpp"
#include "stal/config.hpp"
#include "stal/error.hpp"
#include "stal/evaluation.hpp"
#include "stal/parallel.hpp"
#include "stal/runtime.hpp"
#include "stal/synth.hpp"
#include "stal/trainer.hpp"

namespace fs = std::filesystem;
using namespace stal;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Registers `flag` so that its value is applied to config `keys` after the file.
void bind(CLI::App* cmd, Overrides& out, const std::string& flag, std::vector<std::string> keys,
          const std::string& help) {
  cmd->add_option_function<std::string>(
      flag,
      [&out, keys](const std::string& v) {
        for (const auto& k : keys) out.emplace_back(k, v);
      },
      help);
}

void bind_flag(CLI::App* cmd, Overrides& out, const std::string& flag, const std::string& key,
               const std::string& help) {
  cmd->add_flag_callback(flag, [&out, key] { out.emplace_back(key, "true"); }, help);
}

void echo(const RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& paths) {
  std::cout << "# effective configuration\n" << cfg.echo();
  for (const auto& [name, value] : paths) std::cout << "# " << name << " = " << value << "\n";
  std::cout << std::endl;
}

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

SkeletonGraph cli_skeleton(std::size_t joints) {
  if (joints != kMpiiJoints) {
    throw config_error("model.joints must be 16: the command line tool uses the MPII skeleton");
  }
  return build_mpii_skeleton();
}

LoadOptions load_options(const RunConfig& cfg) {
  LoadOptions o;
  o.num_joints = cfg.model.num_joints;
  o.fps = cfg.data_fps;
  return o;
}

std::vector<PoseSequence> load_dir(const fs::path& dir, const RunConfig& cfg) {
  if (!fs::is_directory(dir)) throw data_error("not a directory: " + dir.string());
  auto clips = load_pose_directory(dir, cfg.data_format, load_options(cfg));
  if (clips.empty()) throw data_error("no pose files in " + dir.string());
  return clips;
}

struct TrainArgs {
  std::string data, out, telemetry;
};

int cmd_train(RunConfig& cfg, const TrainArgs& a) {
  cfg.validate();
  const std::string telemetry = a.telemetry.empty() ? a.out + ".telemetry.csv" : a.telemetry;
  echo(cfg, {{"data", a.data}, {"out", a.out}, {"telemetry", telemetry}});
  const SkeletonGraph graph = cli_skeleton(cfg.model.num_joints);
  const auto clips = load_dir(a.data, cfg);

  TrainOptions opt;
  opt.checkpoint = a.out;
  opt.telemetry = telemetry;
  const std::size_t epochs = cfg.train.epochs;
  opt.on_epoch = [epochs](const EpochStats& e) {
    std::cout << "epoch " << e.epoch << "/" << epochs << "  train_mse " << fmt(e.train_mse) << "  val_mse "
              << (e.val_mse ? fmt(*e.val_mse) : std::string("-")) << "  " << fmt(e.seconds, "%.2f") << " s"
              << std::endl;
  };
  const auto report = train(clips, graph, cfg.model, cfg.train, opt).second;
  for (const auto& s : report.skipped_clips) std::cout << "skipped (shorter than the window): " << s << "\n";
  if (report.initial_val_mse) std::cout << "initial val_mse " << fmt(*report.initial_val_mse) << "\n";
  std::cout << "checkpoint written to " << a.out << "\n";
  return 0;
}

struct InferArgs {
  std::string checkpoint, clip, out;
};

int cmd_infer(RunConfig& cfg, const InferArgs& a) {
  const ModelParams params = load_params(a.checkpoint);
  cfg.model = params.config;
  cfg.validate();
  echo(cfg, {{"checkpoint", a.checkpoint}, {"clip", a.clip}, {"out", a.out}});
  const SkeletonGraph graph = cli_skeleton(cfg.model.num_joints);
  const PoseSequence seq = load_pose_file(a.clip, cfg.data_format, load_options(cfg));
  const AdmSeries adm = compute_adm(embed_sequence(params, seq, graph, cfg.embed));
  const auto transitions = detect_transitions(adm, cfg.detect);
  export_adm_curve(adm, transitions, a.out);

  std::printf("%10s  %-10s  %12s\n", "frame", "kind", "strength");
  for (const auto& t : transitions) {
    std::printf("%10.2f  %-10s  %12.6g\n", t.frame, std::string(transition_kind_name(t.kind)).c_str(), t.strength);
  }
  std::cout << transitions.size() << " transitions over " << adm.size() << " windows; curve written to " << a.out
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, train, test, out;
};

int cmd_eval(RunConfig& cfg, const EvalArgs& a) {
  const ModelParams params = load_params(a.checkpoint);
  cfg.model = params.config;
  cfg.validate();
  const bool split = !a.train.empty() || !a.test.empty();
  if (split && !a.data.empty()) throw config_error("eval: use either --data or --train/--test");
  if (split && (a.train.empty() || a.test.empty())) throw config_error("eval: --train and --test go together");
  if (!split && a.data.empty()) throw config_error("eval: --data or --train/--test is required");
  echo(cfg, {{"checkpoint", a.checkpoint}, {"data", a.data}, {"train", a.train}, {"test", a.test}, {"out", a.out}});

  const SkeletonGraph graph = cli_skeleton(cfg.model.num_joints);
  std::vector<EvalPartition> parts;
  if (split) {
    parts.push_back({"Train", load_dir(a.train, cfg)});
    parts.push_back({"Test", load_dir(a.test, cfg)});
  } else {
    parts.push_back({"all", load_dir(a.data, cfg)});
  }
  EvalOptions opt;
  opt.eval = cfg.eval;
  opt.detector = cfg.detect;
  opt.embed = cfg.embed;
  const EvalReport report = run_eval(parts, params, graph, opt);
  for (const auto& s : report.skipped) std::cout << "skipped: " << s << "\n";
  if (report.matchings.empty()) throw data_error("eval: no annotated clip could be scored");
  write_eval_report(report, a.out);
  std::cout << eval_report_table(report) << "report written to " << a.out << "\n";
  return 0;
}

int cmd_synth(RunConfig& cfg, const std::string& out) {
  cfg.validate();
  echo(cfg, {{"out", out}});
  const auto corpus = generate_corpus(cfg.synth_clips, cfg.synth, cfg.synth_seed);
  write_corpus(corpus, out);
  std::size_t planted = 0;
  for (const auto& c : corpus) planted += c.planted_transitions.size();
  std::cout << corpus.size() << " clips, " << planted << " planted transitions written to " << out << "\n";
  return 0;
}

int cmd_gradcheck(RunConfig& cfg) {
  cfg.validate();
  echo(cfg, {});
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckResult r = model_gradcheck(cfg.model, cfg.gradcheck_batch, cfg.model.seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "checked " << r.checked << " parameter elements in " << fmt(secs, "%.2f") << " s\n"
            << "max relative error " << fmt(r.max_rel_error, "%.3e") << " (" << r.worst_parameter << ")\n";
  if (!(r.max_rel_error < cfg.gradcheck_threshold)) {
    std::cerr << "gradcheck failed: threshold " << fmt(cfg.gradcheck_threshold, "%.1e") << "\n";
    return kExitNumeric;
  }
  std::cout << "gradcheck passed (threshold " << fmt(cfg.gradcheck_threshold, "%.1e") << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Skeleton-based action transition localization: train, infer, eval, synth, gradcheck"};
  app.set_version_flag("--version", std::string("stal ") + kVersion + ", checkpoint format " +
                                        std::to_string(ModelParams::kFormatVersion));
  app.require_subcommand(1);

  std::size_t threads = 0;
  std::string config_path;
  Overrides overrides;
  app.add_option("--threads", threads, "Worker thread cap (default: all cores)");
  app.add_option("--config", config_path, "Config file of `section.key = value` lines");
  app.add_option_function<std::vector<std::string>>(
      "--set",
      [&overrides](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value");
          overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        }
      },
      "Override any config key (key=value)");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Denoising pre-training on a directory of pose files");
  train_cmd->add_option("--data", ta.data, "Pose directory")->required();
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--telemetry", ta.telemetry, "Per-epoch CSV (default: <out>.telemetry.csv)");
  bind(train_cmd, overrides, "--epochs", {"train.epochs"}, "Epochs");
  bind(train_cmd, overrides, "--lr", {"train.lr"}, "Adam learning rate");
  bind(train_cmd, overrides, "--batch-size", {"train.batch_size"}, "Mini-batch size");
  bind(train_cmd, overrides, "--sigma", {"train.sigma"}, "Noise standard deviation");
  bind(train_cmd, overrides, "--seed", {"train.seed", "model.seed"}, "Seed for init, shuffling and noise");
  bind(train_cmd, overrides, "--checkpoint-every", {"train.checkpoint_every"}, "Periodic checkpoint interval");
  bind(train_cmd, overrides, "--val-fraction", {"train.val_fraction"}, "Held-out clip fraction");
  bind(train_cmd, overrides, "--blocks", {"model.blocks"}, "Number of blocks");
  bind(train_cmd, overrides, "--embed-dim", {"model.embed_dim"}, "Embedding width");
  bind(train_cmd, overrides, "--cheb-k", {"model.cheb_k"}, "Chebyshev terms");
  bind(train_cmd, overrides, "--window", {"model.window"}, "Window size");
  bind(train_cmd, overrides, "--format", {"data.format"}, "dsv-annotation | generic-keypoints");
  bind(train_cmd, overrides, "--fps", {"data.fps"}, "Frame rate of the pose files");

  InferArgs ia;
  auto* infer_cmd = app.add_subcommand("infer", "ADM curve and transitions for one clip");
  infer_cmd->add_option("--checkpoint", ia.checkpoint, "Checkpoint")->required();
  infer_cmd->add_option("--clip", ia.clip, "Pose file")->required();
  infer_cmd->add_option("--out", ia.out, "ADM curve CSV")->required();
  bind(infer_cmd, overrides, "--smoothing", {"detect.smoothing"}, "Odd moving-average length (1: off)");
  bind(infer_cmd, overrides, "--min-strength", {"detect.min_strength"}, "Drop weaker transitions");
  bind_flag(infer_cmd, overrides, "--post-head", "detect.use_head", "Embed after the reconstruction head");
  bind(infer_cmd, overrides, "--format", {"data.format"}, "dsv-annotation | generic-keypoints");
  bind(infer_cmd, overrides, "--fps", {"data.fps"}, "Frame rate of the pose file");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "mAP and localization latency against annotations");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint")->required();
  eval_cmd->add_option("--data", ea.data, "Annotated pose directory (single partition)");
  eval_cmd->add_option("--train", ea.train, "Train partition directory");
  eval_cmd->add_option("--test", ea.test, "Test partition directory");
  eval_cmd->add_option("--out", ea.out, "Report CSV")->required();
  bind(eval_cmd, overrides, "--tolerance", {"eval.tolerance"}, "Match tolerance in frames");
  bind_flag(eval_cmd, overrides, "--per-label", "eval.per_label", "Score each demarcation name separately");
  bind(eval_cmd, overrides, "--fps-override", {"eval.fps_override"}, "Frame rate used for latency");
  bind(eval_cmd, overrides, "--smoothing", {"detect.smoothing"}, "Odd moving-average length (1: off)");
  bind(eval_cmd, overrides, "--min-strength", {"detect.min_strength"}, "Drop weaker transitions");
  bind(eval_cmd, overrides, "--format", {"data.format"}, "dsv-annotation | generic-keypoints");
  bind(eval_cmd, overrides, "--fps", {"data.fps"}, "Frame rate of the pose files");

  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic corpus with planted transitions");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  bind(synth_cmd, overrides, "--clips", {"synth.clips"}, "Number of clips");
  bind(synth_cmd, overrides, "--seed", {"synth.seed"}, "Corpus seed");
  bind(synth_cmd, overrides, "--jitter", {"synth.jitter"}, "Gaussian jitter sd");
  bind(synth_cmd, overrides, "--min-regimes", {"synth.min_regimes"}, "Fewest regimes per clip");
  bind(synth_cmd, overrides, "--max-regimes", {"synth.max_regimes"}, "Most regimes per clip");
  bind(synth_cmd, overrides, "--min-duration", {"synth.min_duration"}, "Shortest regime in frames");
  bind(synth_cmd, overrides, "--max-duration", {"synth.max_duration"}, "Longest regime in frames");
  bind(synth_cmd, overrides, "--speed-contrast", {"synth.speed_contrast"}, "Min adjacent speed gap / jitter");
  bind(synth_cmd, overrides, "--fps", {"synth.fps"}, "Frame rate");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every model gradient");
  bind(grad_cmd, overrides, "--blocks", {"model.blocks"}, "Number of blocks");
  bind(grad_cmd, overrides, "--embed-dim", {"model.embed_dim"}, "Embedding width");
  bind(grad_cmd, overrides, "--cheb-k", {"model.cheb_k"}, "Chebyshev terms");
  bind(grad_cmd, overrides, "--window", {"model.window"}, "Window size");
  bind(grad_cmd, overrides, "--joints", {"model.joints"}, "Joints of the path graph");
  bind(grad_cmd, overrides, "--batch", {"gradcheck.batch"}, "Windows per check");
  bind(grad_cmd, overrides, "--seed", {"model.seed"}, "Initialisation seed");
  bind(grad_cmd, overrides, "--threshold", {"gradcheck.threshold"}, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    set_max_threads(threads);
    RunConfig cfg;
    if (grad_cmd->parsed()) {
      cfg.model.num_blocks = 2;
      cfg.model.embed_dim = 4;
      cfg.model.cheb_k = 2;
      cfg.model.window_size = 3;
      cfg.model.num_joints = 4;
    }
    if (!config_path.empty()) cfg.merge_file(config_path);
    for (const auto& [k, v] : overrides) cfg.set(k, v);

    if (train_cmd->parsed()) return cmd_train(cfg, ta);
    if (infer_cmd->parsed()) return cmd_infer(cfg, ia);
    if (eval_cmd->parsed()) return cmd_eval(cfg, ea);
    if (synth_cmd->parsed()) return cmd_synth(cfg, synth_out);
    return cmd_gradcheck(cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::config: return kExitConfig;
      case ErrorKind::data: return kExitData;
      case ErrorKind::numeric: return kExitNumeric;
    }
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
