#pragma once

// Declarative end-to-end curation run with an auditable per-stage manifest.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "curate/dedup.hpp"
#include "curate/embedding_store.hpp"
#include "curate/hkmeans.hpp"

namespace curate {

inline constexpr const char* kToolVersion = "curate 0.1.0";

/// Canonical stage order; a run executes the requested subset in this order.
inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> order{"downsample", "dedup",  "cluster", "sample",
                                              "split",      "probe",  "evaluate"};
  return order;
}

/// Stage seeds: derive_seed(master, stage_name).
std::uint64_t stage_seed(std::uint64_t master, const std::string& stage);

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::filesystem::path input;
  std::optional<std::filesystem::path> labels;
  std::filesystem::path out = "curate_out";
  std::vector<std::string> stages;
  /// Pick up outputs of earlier stages already present in `out` instead of
  /// reading `input` when the run starts mid-chain.
  bool resume = true;

  struct Downsample {
    Fps source{30, 1};
    Fps target{5, 1};
  } downsample;
  struct Dedup {
    double threshold = kDefaultDedupThreshold;
    Blocking blocking = Blocking::kPerVideo;
  } dedup;
  struct Cluster {
    std::vector<std::size_t> level_ks{4000, 400, 40, 8};
    KMeansOptions kmeans;
    bool normalize = false;
  } cluster;
  struct Sample {
    std::vector<std::size_t> targets{1000, 10000};
    std::optional<std::filesystem::path> tree;
  } sample;
  struct Split {
    /// which sample target feeds the split (default: largest)
    std::optional<std::size_t> sample;
    std::string protocol = "fractions";  // or "holdout_kfold"
    std::vector<double> fractions{0.8, 0.1, 0.1};
    double holdout = 0.15;
    std::size_t folds = 10;
    bool group_by_video = false;
    std::optional<double> few_shot_fraction;
    std::optional<std::size_t> per_class_cap;
    /// ingest an existing split verbatim instead of generating one
    std::optional<std::filesystem::path> file;
  } split;
  struct Probe {
    std::vector<double> l2{1e-4};
    double learning_rate = 1.0;
    int epochs = 300;
    bool class_balanced = false;
    /// trained model(s) for evaluate when the probe stage is not part of the run
    std::optional<std::filesystem::path> model_dir;
  } probe;
  struct Evaluate {
    std::string task = "classification";
    std::string backbone = "unknown";
    std::string pretrain_tag = "unknown";
  } evaluate;

  std::size_t split_sample() const;
};

/// Missing keys keep their defaults; unknown keys and type errors throw FormatError.
PipelineConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const PipelineConfig& config);
PipelineConfig read_config(const std::filesystem::path& source);

/// Every violated constraint, one message each; empty iff runnable.
std::vector<std::string> validate_config(const PipelineConfig& config);

struct FileDigest {
  std::string path;  // relative to the output directory for outputs
  std::string sha256;
};

struct StageRecord {
  std::string name;
  nlohmann::json params;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
  std::size_t count_in = 0;
  std::size_t count_out = 0;
  /// stage-specific facts (sample sizes, kept counts, ...)
  nlohmann::json details = nlohmann::json::object();
  double wall_ms = 0.0;
  /// "ok" or "failed"
  std::string status = "ok";
  std::string error;
  /// "validation" (bad data or parameters) or "runtime" (I/O, divergence, ...)
  std::string error_kind;
};

struct CurationManifest {
  std::string tool_version = kToolVersion;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::vector<StageRecord> stages;
  bool failed = false;

  const StageRecord& stage(const std::string& name) const;
  bool has_stage(const std::string& name) const;
};

nlohmann::json manifest_to_json(const CurationManifest& manifest);
CurationManifest manifest_from_json(const nlohmann::json& doc);
/// Manifest JSON with every wall-time field removed.
nlohmann::json manifest_without_timing(const nlohmann::json& doc);

/// Runs the requested stages and writes `<out>/manifest.json` atomically.
/// A failing stage stops the run; the manifest then records the completed
/// stages plus the failure and `failed` is set.
CurationManifest run_pipeline(const PipelineConfig& config);

/// Recomputes every output digest in the manifest; returns mismatching paths.
std::vector<std::string> verify_manifest(const CurationManifest& manifest, const std::filesystem::path& out);

/// SHA-256 of a file, or of the sorted (relative name, digest) listing for a directory.
std::string digest_path(const std::filesystem::path& path);

nlohmann::json dedup_report_to_json(const DedupReport& report);

}  // namespace curate
