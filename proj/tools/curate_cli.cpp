// curate: command-line front end for the curation pipeline.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "curate/embedding_store.hpp"
#include "curate/errors.hpp"
#include "curate/metrics.hpp"
#include "curate/pipeline.hpp"
#include "curate/probe.hpp"
#include "curate/synthetic.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace curate;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Globals {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> out;
};

// "30", "30/1" or "30000/1001"
Fps parse_fps_arg(const std::string& text) {
  const auto slash = text.find('/');
  try {
    if (slash == std::string::npos) return Fps{std::stoll(text), 1};
    return Fps{std::stoll(text.substr(0, slash)), std::stoll(text.substr(slash + 1))};
  } catch (const std::exception&) {
    throw InvalidArgument("bad frame rate '" + text + "'");
  }
}

PipelineConfig base_config(const Globals& g, bool for_single_stage) {
  PipelineConfig c;
  if (g.config) {
    c = read_config(*g.config);
  } else if (for_single_stage) {
    c.resume = false;
  }
  if (g.seed) c.seed = *g.seed;
  if (g.workers) c.workers = *g.workers;
  if (g.out) c.out = *g.out;
  return c;
}

int report_manifest(const CurationManifest& m, const PipelineConfig& c) {
  for (const auto& s : m.stages) {
    std::cout << s.name << ": " << s.status << "  " << s.count_in << " -> " << s.count_out;
    if (!s.error.empty()) std::cout << "  error: " << s.error;
    std::cout << "\n";
  }
  std::cout << "manifest: " << (c.out / "manifest.json").string() << "\n";
  if (!m.failed) return 0;
  return m.stages.back().error_kind == "validation" ? kExitValidation : kExitRuntime;
}

int run_single(PipelineConfig c, const std::string& stage) {
  c.stages = {stage};
  return report_manifest(run_pipeline(c), c);
}

std::vector<std::uint8_t> read_mask_labels(const fs::path& source) {
  std::ifstream in(source);
  if (!in) throw StorageError("cannot open patch labels: " + source.string());
  std::vector<std::uint8_t> out;
  std::string tok;
  while (in >> tok) {
    if (tok != "0" && tok != "1") throw FormatError(source.string() + ": patch labels must be 0 or 1");
    out.push_back(tok == "1" ? 1 : 0);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Embedding curation pipeline: downsample, dedup, cluster, sample, split, probe, evaluate"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Pipeline config (JSON)");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output directory");

  std::string input, labels, tree, split_file, model_dir, frames_file;
  auto* downsample = app.add_subcommand("downsample", "Temporal downsampling of an EMB1 file or frame list");
  std::string source_fps = "30", target_fps = "5";
  downsample->add_option("--input", input, "EMB1 input");
  downsample->add_option("--frames", frames_file, "Frame list (video_id,frame_number,timestamp_ms)");
  downsample->add_option("--source-fps", source_fps, "Source rate, N or N/D");
  downsample->add_option("--target-fps", target_fps, "Target rate, N or N/D");

  auto* dedup = app.add_subcommand("dedup", "Collapse near-duplicate rows");
  std::optional<double> threshold;
  bool global_blocking = false;
  dedup->add_option("--input", input, "EMB1 input");
  dedup->add_option("--threshold", threshold, "Cosine threshold in (0, 1]");
  dedup->add_flag("--global", global_blocking, "Compare across videos");

  auto* cluster = app.add_subcommand("cluster", "Hierarchical k-means");
  std::vector<std::size_t> level_ks;
  std::optional<int> max_iters;
  bool no_polish = false, normalize = false;
  cluster->add_option("--input", input, "EMB1 input");
  cluster->add_option("--level-ks", level_ks, "Cluster counts, finest first")->delimiter(',');
  cluster->add_option("--max-iters", max_iters, "Lloyd iterations per level");
  cluster->add_flag("--no-polish", no_polish, "Skip single-point transfer sweeps");
  cluster->add_flag("--normalize", normalize, "L2-normalize rows before clustering");

  auto* sample = app.add_subcommand("sample", "Balanced sampling from a cluster tree");
  std::vector<std::size_t> targets;
  sample->add_option("--input", input, "EMB1 the tree was built on");
  sample->add_option("--tree", tree, "Cluster tree directory");
  sample->add_option("--target", targets, "Sample sizes")->delimiter(',');

  auto* split = app.add_subcommand("split", "Stratified or holdout + k-fold split");
  std::optional<std::string> protocol;
  std::vector<double> fractions;
  std::optional<double> holdout, few_shot;
  std::optional<std::size_t> folds, cap;
  bool group_by_video = false;
  split->add_option("--input", input, "EMB1 whose rows are split");
  split->add_option("--labels", labels, "video_id,frame_number,label");
  split->add_option("--protocol", protocol, "fractions | holdout_kfold");
  split->add_option("--fractions", fractions, "Part fractions")->delimiter(',');
  split->add_option("--holdout", holdout, "Holdout test fraction");
  split->add_option("--folds", folds, "Fold count");
  split->add_option("--few-shot", few_shot, "Keep this fraction of train");
  split->add_option("--cap", cap, "Per-class cap for the few-shot subset");
  split->add_option("--file", split_file, "Ingest an existing split file");
  split->add_flag("--group-by-video", group_by_video, "Keep each video in one part");

  auto* probe = app.add_subcommand("probe", "Train linear probe(s) on a split");
  std::vector<double> l2;
  std::optional<int> epochs;
  std::optional<double> lr;
  bool balanced = false;
  probe->add_option("--input", input, "Feature EMB1");
  probe->add_option("--split", split_file, "Split file");
  probe->add_option("--l2", l2, "L2 values (swept on val when several)")->delimiter(',');
  probe->add_option("--epochs", epochs, "Gradient steps");
  probe->add_option("--lr", lr, "Initial learning rate");
  probe->add_flag("--class-balanced", balanced, "Weight samples by inverse class frequency");

  auto* segprobe = app.add_subcommand("segprobe", "Train a per-patch logistic segmentation head");
  std::string patch_labels;
  segprobe->add_option("--features", input, "EMB1 with one row per patch")->required();
  segprobe->add_option("--patch-labels", patch_labels, "0/1 per patch, whitespace separated")->required();
  segprobe->add_option("--l2", l2, "L2 strength")->delimiter(',');
  segprobe->add_option("--epochs", epochs, "Gradient steps");

  auto* evaluate = app.add_subcommand("evaluate", "Score probe(s) on the test part");
  std::optional<std::string> task, backbone, pretrain_tag;
  evaluate->add_option("--input", input, "Feature EMB1");
  evaluate->add_option("--split", split_file, "Split file");
  evaluate->add_option("--model", model_dir, "Probe model directory");
  evaluate->add_option("--task", task, "Task name");
  evaluate->add_option("--backbone", backbone, "Backbone name for the table row");
  evaluate->add_option("--pretrain-tag", pretrain_tag, "Pretraining data tag for the table row");

  auto* select = app.add_subcommand("select-checkpoint", "Pick the checkpoint with the best downstream metric");
  std::string series;
  select->add_option("--series", series, "step,ssl_loss,downstream_metric CSV")->required();

  auto* run = app.add_subcommand("run", "Run the pipeline stages listed in --config");
  auto* validate = app.add_subcommand("validate", "Check a config without running it");

  auto* synth = app.add_subcommand("synth", "Write a synthetic embedding set, labels and desk config");
  SyntheticSpec spec;
  synth->add_option("--rows", spec.rows, "Rows");
  synth->add_option("--dim", spec.dim, "Embedding width");
  synth->add_option("--videos", spec.videos, "Videos");
  synth->add_option("--classes", spec.classes, "Label classes");
  synth->add_option("--duplicates", spec.duplicate_fraction, "Near-duplicate frame fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*run) {
      if (!g.config) throw InvalidArgument("run needs --config");
      return report_manifest(run_pipeline(base_config(g, false)), base_config(g, false));
    }
    if (*validate) {
      if (!g.config) throw InvalidArgument("validate needs --config");
      const auto violations = validate_config(base_config(g, false));
      for (const auto& v : violations) std::cout << v << "\n";
      if (violations.empty()) std::cout << "ok\n";
      return violations.empty() ? 0 : kExitValidation;
    }
    if (*synth) {
      const fs::path out = g.out.value_or("synthetic");
      spec.seed = g.seed.value_or(spec.seed);
      fs::create_directories(out);
      const SyntheticDataset data = make_synthetic(spec);
      write_embeddings(data.matrix, out / "embeddings.emb1");
      write_labels(data.matrix.frames, data.labels, out / "labels.csv");
      PipelineConfig c;
      c.seed = spec.seed;
      c.input = out / "embeddings.emb1";
      c.labels = out / "labels.csv";
      c.out = out / "run";
      c.stages = {"dedup", "cluster", "sample", "split", "probe", "evaluate"};
      write_text_atomic(out / "config.json", config_to_json(c).dump(2) + "\n");
      std::cout << "wrote " << spec.rows << " rows to " << (out / "embeddings.emb1").string() << "\n";
      return 0;
    }
    if (*select) {
      const auto entries = read_checkpoint_series(series);
      const CheckpointSelection sel = select_checkpoint(entries);
      json doc = {{"best_step", sel.best_step},
                  {"best_metric", sel.best_metric},
                  {"loss_argmin_step", sel.loss_argmin_step},
                  {"min_loss", sel.min_loss},
                  {"warnings", sel.warnings}};
      std::cout << doc.dump(2) << "\n";
      if (g.out) {
        fs::create_directories(*g.out);
        write_text_atomic(fs::path(*g.out) / "checkpoint_selection.json", doc.dump(2) + "\n");
      }
      return 0;
    }
    if (*segprobe) {
      const FeatureMatrix features = features_from_embeddings(read_embeddings(input));
      const auto mask = read_mask_labels(patch_labels);
      ProbeHyper hyper;
      if (!l2.empty()) hyper.l2 = l2.front();
      if (epochs) hyper.epochs = *epochs;
      hyper.seed = g.seed.value_or(0);
      const SegHead head = train_seg_head(features, mask, hyper);
      const fs::path out = g.out.value_or("seghead");
      write_seg_head(head, out);
      for (const auto& w : head.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "parameters: " << head.parameter_count() << "\n";
      return 0;
    }
    if (*downsample && !frames_file.empty()) {
      const auto frames = read_frame_list(frames_file);
      const auto kept = temporal_downsample(frames, parse_fps_arg(source_fps), parse_fps_arg(target_fps));
      const fs::path out = g.out.value_or(".");
      fs::create_directories(out);
      write_frame_list(kept, out / "downsampled_frames.csv");
      std::cout << frames.size() << " -> " << kept.size() << "\n";
      return 0;
    }

    PipelineConfig c = base_config(g, true);
    if (!input.empty()) c.input = input;
    if (*downsample) {
      c.downsample.source = parse_fps_arg(source_fps);
      c.downsample.target = parse_fps_arg(target_fps);
      return run_single(c, "downsample");
    }
    if (*dedup) {
      if (threshold) c.dedup.threshold = *threshold;
      if (global_blocking) c.dedup.blocking = Blocking::kGlobal;
      return run_single(c, "dedup");
    }
    if (*cluster) {
      if (!level_ks.empty()) c.cluster.level_ks = level_ks;
      if (max_iters) c.cluster.kmeans.max_iters = *max_iters;
      if (no_polish) c.cluster.kmeans.polish = false;
      if (normalize) c.cluster.normalize = true;
      return run_single(c, "cluster");
    }
    if (*sample) {
      if (!tree.empty()) c.sample.tree = tree;
      if (!targets.empty()) c.sample.targets = targets;
      return run_single(c, "sample");
    }
    if (*split) {
      if (!labels.empty()) c.labels = labels;
      if (protocol) c.split.protocol = *protocol;
      if (!fractions.empty()) c.split.fractions = fractions;
      if (holdout) c.split.holdout = *holdout;
      if (folds) c.split.folds = *folds;
      if (few_shot) c.split.few_shot_fraction = *few_shot;
      if (cap) c.split.per_class_cap = *cap;
      if (group_by_video) c.split.group_by_video = true;
      if (!split_file.empty()) c.split.file = split_file;
      return run_single(c, "split");
    }
    if (*probe) {
      if (!split_file.empty()) c.split.file = split_file;
      if (!l2.empty()) c.probe.l2 = l2;
      if (epochs) c.probe.epochs = *epochs;
      if (lr) c.probe.learning_rate = *lr;
      if (balanced) c.probe.class_balanced = true;
      return run_single(c, "probe");
    }
    if (*evaluate) {
      if (!split_file.empty()) c.split.file = split_file;
      if (!model_dir.empty()) c.probe.model_dir = model_dir;
      if (task) c.evaluate.task = *task;
      if (backbone) c.evaluate.backbone = *backbone;
      if (pretrain_tag) c.evaluate.pretrain_tag = *pretrain_tag;
      return run_single(c, "evaluate");
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
