#include "curate/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "curate/digest.hpp"
#include "curate/errors.hpp"
#include "curate/metrics.hpp"
#include "curate/parallel.hpp"
#include "curate/probe.hpp"
#include "curate/random.hpp"
#include "curate/splits.hpp"
#include "curate/synthetic.hpp"

namespace curate {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t stage_seed(std::uint64_t master, const std::string& stage) { return derive_seed(master, stage); }

std::size_t PipelineConfig::split_sample() const {
  if (split.sample) return *split.sample;
  if (sample.targets.empty()) return 0;
  return *std::max_element(sample.targets.begin(), sample.targets.end());
}

// ---- config (de)serialization ----------------------------------------------

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw FormatError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw FormatError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void take(const json& obj, const char* key, T& into, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    into = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(where + "." + key + ": wrong type");
  }
}

void take_path(const json& obj, const char* key, fs::path& into, const std::string& where) {
  std::string s;
  if (!obj.contains(key)) return;
  take(obj, key, s, where);
  into = s;
}

void take_path(const json& obj, const char* key, std::optional<fs::path>& into, const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return;
  fs::path p;
  take_path(obj, key, p, where);
  into = p;
}

template <typename T>
void take_opt(const json& obj, const char* key, std::optional<T>& into, const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return;
  T v{};
  take(obj, key, v, where);
  into = v;
}

// fps may be given as a number or as [num, den]
Fps parse_fps(const json& value, const std::string& where) {
  if (value.is_number_integer()) return Fps{value.get<std::int64_t>(), 1};
  if (value.is_array() && value.size() == 2 && value[0].is_number_integer() && value[1].is_number_integer()) {
    return Fps{value[0].get<std::int64_t>(), value[1].get<std::int64_t>()};
  }
  throw FormatError(where + ": expected an integer or [num, den]");
}

const char* blocking_name(Blocking b) { return b == Blocking::kGlobal ? "global" : "per_video"; }

}  // namespace

PipelineConfig config_from_json(const json& doc) {
  PipelineConfig c;
  reject_unknown(doc,
                 {"seed", "workers", "input", "labels", "out", "stages", "resume", "downsample", "dedup", "cluster",
                  "sample", "split", "probe", "evaluate"},
                 "config");
  take(doc, "seed", c.seed, "config");
  take(doc, "workers", c.workers, "config");
  take_path(doc, "input", c.input, "config");
  take_path(doc, "labels", c.labels, "config");
  take_path(doc, "out", c.out, "config");
  take(doc, "stages", c.stages, "config");
  take(doc, "resume", c.resume, "config");

  if (doc.contains("downsample")) {
    const auto& d = doc["downsample"];
    reject_unknown(d, {"source_fps", "target_fps"}, "downsample");
    if (d.contains("source_fps")) c.downsample.source = parse_fps(d["source_fps"], "downsample.source_fps");
    if (d.contains("target_fps")) c.downsample.target = parse_fps(d["target_fps"], "downsample.target_fps");
  }
  if (doc.contains("dedup")) {
    const auto& d = doc["dedup"];
    reject_unknown(d, {"threshold", "blocking"}, "dedup");
    take(d, "threshold", c.dedup.threshold, "dedup");
    std::string blocking = blocking_name(c.dedup.blocking);
    take(d, "blocking", blocking, "dedup");
    if (blocking == "global") {
      c.dedup.blocking = Blocking::kGlobal;
    } else if (blocking == "per_video") {
      c.dedup.blocking = Blocking::kPerVideo;
    } else {
      throw FormatError("dedup.blocking: expected 'global' or 'per_video'");
    }
  }
  if (doc.contains("cluster")) {
    const auto& d = doc["cluster"];
    reject_unknown(d, {"level_ks", "max_iters", "tol", "polish", "max_polish_sweeps", "normalize"}, "cluster");
    take(d, "level_ks", c.cluster.level_ks, "cluster");
    take(d, "max_iters", c.cluster.kmeans.max_iters, "cluster");
    take(d, "tol", c.cluster.kmeans.tol, "cluster");
    take(d, "polish", c.cluster.kmeans.polish, "cluster");
    take(d, "max_polish_sweeps", c.cluster.kmeans.max_polish_sweeps, "cluster");
    take(d, "normalize", c.cluster.normalize, "cluster");
  }
  if (doc.contains("sample")) {
    const auto& d = doc["sample"];
    reject_unknown(d, {"targets", "tree"}, "sample");
    take(d, "targets", c.sample.targets, "sample");
    take_path(d, "tree", c.sample.tree, "sample");
  }
  if (doc.contains("split")) {
    const auto& d = doc["split"];
    reject_unknown(d,
                   {"sample", "protocol", "fractions", "holdout", "folds", "group_by_video", "few_shot_fraction",
                    "per_class_cap", "file"},
                   "split");
    take_opt(d, "sample", c.split.sample, "split");
    take(d, "protocol", c.split.protocol, "split");
    take(d, "fractions", c.split.fractions, "split");
    take(d, "holdout", c.split.holdout, "split");
    take(d, "folds", c.split.folds, "split");
    take(d, "group_by_video", c.split.group_by_video, "split");
    take_opt(d, "few_shot_fraction", c.split.few_shot_fraction, "split");
    take_opt(d, "per_class_cap", c.split.per_class_cap, "split");
    take_path(d, "file", c.split.file, "split");
  }
  if (doc.contains("probe")) {
    const auto& d = doc["probe"];
    reject_unknown(d, {"l2", "learning_rate", "epochs", "class_balanced", "model_dir"}, "probe");
    if (d.contains("l2") && d["l2"].is_number()) {
      c.probe.l2 = {d["l2"].get<double>()};
    } else {
      take(d, "l2", c.probe.l2, "probe");
    }
    take(d, "learning_rate", c.probe.learning_rate, "probe");
    take(d, "epochs", c.probe.epochs, "probe");
    take(d, "class_balanced", c.probe.class_balanced, "probe");
    take_path(d, "model_dir", c.probe.model_dir, "probe");
  }
  if (doc.contains("evaluate")) {
    const auto& d = doc["evaluate"];
    reject_unknown(d, {"task", "backbone", "pretrain_tag"}, "evaluate");
    take(d, "task", c.evaluate.task, "evaluate");
    take(d, "backbone", c.evaluate.backbone, "evaluate");
    take(d, "pretrain_tag", c.evaluate.pretrain_tag, "evaluate");
  }
  return c;
}

json config_to_json(const PipelineConfig& c) {
  auto opt_path = [](const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); };
  json doc = json::object();
  doc["seed"] = c.seed;
  doc["workers"] = c.workers;
  doc["input"] = c.input.string();
  doc["labels"] = opt_path(c.labels);
  doc["out"] = c.out.string();
  doc["stages"] = c.stages;
  doc["resume"] = c.resume;
  doc["downsample"] = {{"source_fps", {c.downsample.source.num, c.downsample.source.den}},
                       {"target_fps", {c.downsample.target.num, c.downsample.target.den}}};
  doc["dedup"] = {{"threshold", c.dedup.threshold}, {"blocking", blocking_name(c.dedup.blocking)}};
  doc["cluster"] = {{"level_ks", c.cluster.level_ks},
                    {"max_iters", c.cluster.kmeans.max_iters},
                    {"tol", c.cluster.kmeans.tol},
                    {"polish", c.cluster.kmeans.polish},
                    {"max_polish_sweeps", c.cluster.kmeans.max_polish_sweeps},
                    {"normalize", c.cluster.normalize}};
  doc["sample"] = {{"targets", c.sample.targets}, {"tree", opt_path(c.sample.tree)}};
  doc["split"] = {{"sample", c.split.sample ? json(*c.split.sample) : json(nullptr)},
                  {"protocol", c.split.protocol},
                  {"fractions", c.split.fractions},
                  {"holdout", c.split.holdout},
                  {"folds", c.split.folds},
                  {"group_by_video", c.split.group_by_video},
                  {"few_shot_fraction", c.split.few_shot_fraction ? json(*c.split.few_shot_fraction) : json(nullptr)},
                  {"per_class_cap", c.split.per_class_cap ? json(*c.split.per_class_cap) : json(nullptr)},
                  {"file", opt_path(c.split.file)}};
  doc["probe"] = {{"l2", c.probe.l2},
                  {"learning_rate", c.probe.learning_rate},
                  {"epochs", c.probe.epochs},
                  {"class_balanced", c.probe.class_balanced},
                  {"model_dir", opt_path(c.probe.model_dir)}};
  doc["evaluate"] = {
      {"task", c.evaluate.task}, {"backbone", c.evaluate.backbone}, {"pretrain_tag", c.evaluate.pretrain_tag}};
  return doc;
}

PipelineConfig read_config(const fs::path& source) {
  std::ifstream in(source);
  if (!in) throw StorageError("cannot open config: " + source.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(source.string() + ": " + e.what());
  }
  return config_from_json(doc);
}

// ---- source resolution ------------------------------------------------------
// Each stage reads the output of the nearest earlier stage that ran in this
// invocation, else (with resume) a cached output in `out`, else the
// configured locator.

namespace {

struct Sources {
  fs::path points;    // matrix for dedup / cluster / sample
  fs::path labeled;   // matrix whose rows the split indexes
  fs::path tree;
  fs::path split_file;
  fs::path probe_dir;
  std::vector<fs::path> cached;
};

fs::path sample_file(const fs::path& out, std::size_t target) {
  return out / ("sample_" + std::to_string(target) + ".emb1");
}

std::size_t stage_rank(const std::string& name) {
  const auto& order = stage_order();
  const auto it = std::find(order.begin(), order.end(), name);
  return it == order.end() ? order.size() : static_cast<std::size_t>(it - order.begin());
}

bool requested(const PipelineConfig& c, const std::string& stage) {
  return std::find(c.stages.begin(), c.stages.end(), stage) != c.stages.end();
}

Sources initial_sources(const PipelineConfig& c) {
  Sources s;
  s.points = s.labeled = c.input;
  s.tree = c.sample.tree.value_or(c.out / "tree");
  s.split_file = c.split.file.value_or(c.out / "split.txt");
  s.probe_dir = c.probe.model_dir.value_or(c.out / "probe");
  if (!c.resume || c.stages.empty()) return s;

  std::size_t first = stage_order().size();
  for (const auto& name : c.stages) first = std::min(first, stage_rank(name));
  for (std::size_t r = 0; r < first; ++r) {
    const auto& name = stage_order()[r];
    if (name == "downsample" || name == "dedup") {
      const fs::path p = c.out / (name == "dedup" ? "dedup.emb1" : "downsampled.emb1");
      if (fs::exists(p)) {
        s.points = s.labeled = p;
        s.cached.push_back(p);
      }
    } else if (name == "cluster") {
      if (!c.sample.tree && fs::exists(c.out / "tree" / "tree.json")) s.cached.push_back(c.out / "tree");
    } else if (name == "sample") {
      const fs::path p = sample_file(c.out, c.split_sample());
      if (fs::exists(p)) {
        s.labeled = p;
        s.cached.push_back(p);
      }
    } else if (name == "split") {
      if (!c.split.file && fs::exists(c.out / "split.txt")) s.cached.push_back(c.out / "split.txt");
    } else if (name == "probe") {
      if (!c.probe.model_dir && fs::exists(c.out / "probe")) s.cached.push_back(c.out / "probe");
    }
  }
  return s;
}

}  // namespace

std::vector<std::string> validate_config(const PipelineConfig& c) {
  std::vector<std::string> v;
  if (c.stages.empty()) v.push_back("no stages requested");
  std::set<std::string> seen;
  for (const auto& s : c.stages) {
    if (stage_rank(s) == stage_order().size()) v.push_back("unknown stage '" + s + "'");
    if (!seen.insert(s).second) v.push_back("stage '" + s + "' listed twice");
  }
  if (c.workers == 0) v.push_back("workers must be at least 1");

  const auto& ds = c.downsample;
  if (requested(c, "downsample")) {
    if (ds.source.num <= 0 || ds.source.den <= 0 || ds.target.num <= 0 || ds.target.den <= 0) {
      v.push_back("downsample fps must be positive");
    } else if (ds.target.value() > ds.source.value()) {
      v.push_back("downsample target_fps exceeds source_fps");
    }
  }
  if (!(c.dedup.threshold > 0.0 && c.dedup.threshold <= 1.0)) v.push_back("dedup threshold must be in (0, 1]");

  const auto& ks = c.cluster.level_ks;
  if (ks.empty()) v.push_back("level_ks is empty");
  if (std::any_of(ks.begin(), ks.end(), [](std::size_t k) { return k == 0; })) v.push_back("level_ks must be positive");
  for (std::size_t i = 1; i < ks.size(); ++i) {
    if (ks[i] >= ks[i - 1]) {
      v.push_back("level_ks not decreasing");
      break;
    }
  }
  if (c.cluster.kmeans.max_iters < 1) v.push_back("cluster max_iters must be at least 1");
  if (!(c.cluster.kmeans.tol >= 0.0)) v.push_back("cluster tol must be non-negative");

  const auto& ts = c.sample.targets;
  if (ts.empty()) v.push_back("no sample targets");
  if (std::any_of(ts.begin(), ts.end(), [](std::size_t t) { return t == 0; })) {
    v.push_back("target sizes must be positive");
  }
  if (c.split.sample && std::find(ts.begin(), ts.end(), *c.split.sample) == ts.end()) {
    v.push_back("split.sample " + std::to_string(*c.split.sample) + " is not one of the sample targets");
  }

  const auto& sp = c.split;
  if (sp.protocol == "fractions") {
    double sum = 0.0;
    for (double f : sp.fractions) {
      if (!(f >= 0.0)) v.push_back("split fractions must be non-negative");
      sum += f;
    }
    if (sp.fractions.empty() || std::abs(sum - 1.0) > 1e-9) v.push_back("split fractions must sum to 1");
  } else if (sp.protocol == "holdout_kfold") {
    if (!(sp.holdout >= 0.0 && sp.holdout < 1.0)) v.push_back("split holdout must be in [0, 1)");
    if (sp.folds < 2) v.push_back("split folds must be at least 2");
    if (sp.few_shot_fraction) v.push_back("few_shot_fraction applies to the fractions protocol only");
  } else {
    v.push_back("unknown split protocol '" + sp.protocol + "'");
  }
  if (sp.few_shot_fraction && !(*sp.few_shot_fraction > 0.0 && *sp.few_shot_fraction <= 1.0)) {
    v.push_back("few_shot_fraction must be in (0, 1]");
  }
  if (sp.per_class_cap && *sp.per_class_cap == 0) v.push_back("per_class_cap must be positive");

  if (c.probe.l2.empty()) v.push_back("probe l2 list is empty");
  for (double l2 : c.probe.l2) {
    if (!(l2 >= 0.0) || !std::isfinite(l2)) v.push_back("probe l2 values must be finite and non-negative");
  }
  if (!(c.probe.learning_rate > 0.0)) v.push_back("probe learning_rate must be positive");
  if (c.probe.epochs < 0) v.push_back("probe epochs must be non-negative");

  // referenced inputs must exist unless an earlier stage of this run produces them
  const Sources s = initial_sources(c);
  std::set<std::string> produced;
  auto need = [&](const fs::path& p, const char* producer, const std::string& stage, const char* what) {
    if (producer != nullptr && produced.count(producer)) return;
    if (p.empty()) {
      v.push_back(std::string(what) + " not set (needed by " + stage + ")");
    } else if (!fs::exists(p)) {
      v.push_back("missing input: " + p.string() + " (needed by " + stage + ")");
    }
  };
  std::vector<std::string> ordered;
  for (const auto& name : stage_order()) {
    if (requested(c, name)) ordered.push_back(name);
  }
  for (const auto& stage : ordered) {
    const bool points_made = produced.count("downsample") || produced.count("dedup");
    if (stage == "downsample" || stage == "dedup" || stage == "cluster" || stage == "sample") {
      if (!points_made) need(s.points, nullptr, stage, "input");
      if (stage == "sample") need(s.tree, "cluster", stage, "cluster tree");
    } else if (stage == "split") {
      if (!points_made) need(s.labeled, "sample", stage, "input");
      if (!sp.file) need(c.labels.value_or(fs::path{}), nullptr, stage, "labels");
      if (sp.file) need(*sp.file, nullptr, stage, "split file");
    } else if (stage == "probe" || stage == "evaluate") {
      if (!points_made) need(s.labeled, "sample", stage, "input");
      need(s.split_file, "split", stage, "split file");
      if (stage == "evaluate") need(s.probe_dir, "probe", stage, "probe model");
    }
    produced.insert(stage);
  }
  return v;
}

// ---- manifest ---------------------------------------------------------------

const StageRecord& CurationManifest::stage(const std::string& name) const {
  for (const auto& s : stages) {
    if (s.name == name) return s;
  }
  throw InvalidArgument("manifest has no stage '" + name + "'");
}

bool CurationManifest::has_stage(const std::string& name) const {
  return std::any_of(stages.begin(), stages.end(), [&](const StageRecord& s) { return s.name == name; });
}

namespace {

json digests_to_json(const std::vector<FileDigest>& ds) {
  json arr = json::array();
  for (const auto& d : ds) arr.push_back({{"path", d.path}, {"sha256", d.sha256}});
  return arr;
}

std::vector<FileDigest> digests_from_json(const json& arr) {
  std::vector<FileDigest> out;
  for (const auto& d : arr) out.push_back({d.at("path").get<std::string>(), d.at("sha256").get<std::string>()});
  return out;
}

}  // namespace

json manifest_to_json(const CurationManifest& m) {
  json stages = json::array();
  for (const auto& s : m.stages) {
    json rec = {{"name", s.name},
                {"status", s.status},
                {"params", s.params},
                {"inputs", digests_to_json(s.inputs)},
                {"outputs", digests_to_json(s.outputs)},
                {"count_in", s.count_in},
                {"count_out", s.count_out},
                {"details", s.details},
                {"wall_ms", s.wall_ms}};
    if (!s.error.empty()) {
      rec["error"] = s.error;
      rec["error_kind"] = s.error_kind;
    }
    stages.push_back(std::move(rec));
  }
  return {{"tool_version", m.tool_version},
          {"seed", m.seed},
          {"failed", m.failed},
          {"config", m.config},
          {"stages", stages}};
}

CurationManifest manifest_from_json(const json& doc) {
  CurationManifest m;
  try {
    m.tool_version = doc.at("tool_version").get<std::string>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.failed = doc.at("failed").get<bool>();
    m.config = doc.at("config");
    for (const auto& rec : doc.at("stages")) {
      StageRecord s;
      s.name = rec.at("name").get<std::string>();
      s.status = rec.at("status").get<std::string>();
      s.params = rec.at("params");
      s.inputs = digests_from_json(rec.at("inputs"));
      s.outputs = digests_from_json(rec.at("outputs"));
      s.count_in = rec.at("count_in").get<std::size_t>();
      s.count_out = rec.at("count_out").get<std::size_t>();
      s.details = rec.value("details", json::object());
      s.wall_ms = rec.at("wall_ms").get<double>();
      s.error = rec.value("error", std::string{});
      s.error_kind = rec.value("error_kind", std::string{});
      m.stages.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  return m;
}

json manifest_without_timing(const json& doc) {
  json copy = doc;
  if (copy.contains("stages")) {
    for (auto& s : copy["stages"]) s.erase("wall_ms");
  }
  return copy;
}

std::string digest_path(const fs::path& path) {
  if (!fs::is_directory(path)) return sha256_file(path);
  std::vector<std::string> lines;
  for (const auto& entry : fs::recursive_directory_iterator(path)) {
    if (!entry.is_regular_file()) continue;
    lines.push_back(fs::relative(entry.path(), path).generic_string() + "  " + sha256_file(entry.path()) + "\n");
  }
  std::sort(lines.begin(), lines.end());
  std::string listing;
  for (const auto& l : lines) listing += l;
  return sha256_hex({reinterpret_cast<const unsigned char*>(listing.data()), listing.size()});
}

std::vector<std::string> verify_manifest(const CurationManifest& manifest, const fs::path& out) {
  std::vector<std::string> bad;
  for (const auto& s : manifest.stages) {
    for (const auto& d : s.outputs) {
      const fs::path p = out / d.path;
      if (!fs::exists(p) || digest_path(p) != d.sha256) bad.push_back(d.path);
    }
  }
  return bad;
}

json dedup_report_to_json(const DedupReport& report) {
  json hist = json::array();
  for (const auto& [size, count] : report.size_histogram()) hist.push_back({{"size", size}, {"components", count}});
  return {{"threshold", report.threshold},
          {"total_rows", report.total_rows},
          {"kept_count", report.kept.size()},
          {"removed_count", report.removed_count},
          {"component_sizes", hist},
          {"kept", report.kept}};
}

// ---- stages -----------------------------------------------------------------

namespace {

class StageRun {
 public:
  StageRun(const PipelineConfig& config, std::string name) : config_(config) {
    record.name = std::move(name);
    start_ = std::chrono::steady_clock::now();
  }

  void input(const fs::path& p) { record.inputs.push_back({locator(p), digest_path(p)}); }
  void output(const fs::path& p) { record.outputs.push_back({locator(p), digest_path(p)}); }

  StageRecord finish() {
    record.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    return std::move(record);
  }

  StageRecord record;

 private:
  // paths under the output directory are recorded relative to it
  std::string locator(const fs::path& p) const {
    const auto rel = fs::relative(p, config_.out);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return p.generic_string();
  }

  const PipelineConfig& config_;
  std::chrono::steady_clock::time_point start_;
};

struct Gathered {
  FeatureMatrix features;
  std::vector<std::uint32_t> labels;
};

Gathered gather(const FeatureMatrix& all, const std::vector<LabeledIndex>& items) {
  Gathered g;
  g.features.mode = all.mode;
  g.features.layer_dim = all.layer_dim;
  g.features.values.resize(static_cast<Eigen::Index>(items.size()), all.values.cols());
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].index >= all.rows()) {
      throw ValidationError("split index " + std::to_string(items[i].index) + " outside matrix of " +
                            std::to_string(all.rows()) + " rows");
    }
    g.features.values.row(static_cast<Eigen::Index>(i)) = all.values.row(static_cast<Eigen::Index>(items[i].index));
    g.labels.push_back(items[i].label);
  }
  return g;
}

std::size_t class_count(const DatasetSplit& split) {
  std::uint32_t top = 0;
  for (const auto& p : split.parts) {
    for (const auto& it : p.items) top = std::max(top, it.label);
  }
  return static_cast<std::size_t>(top) + 1;
}

bool is_kfold(const DatasetSplit& split) { return split.has_part("fold_0"); }

double macro_f1_score(std::span<const std::uint32_t> truth, const RowMatrixXd& probs) {
  const auto pred = argmax_rows(probs);
  const auto cm = confusion(truth, pred, static_cast<std::size_t>(probs.cols()));
  return f1_scores(cm).macro_f1;
}

ProbeModel fit_probe(const PipelineConfig& c, const DatasetSplit& split, const FeatureMatrix& all,
                     const std::string& train_part, const std::string& val_part, std::uint64_t seed,
                     json& detail) {
  const std::size_t classes = class_count(split);
  const Gathered train = gather(all, split.part(train_part).items);
  ProbeHyper hyper;
  hyper.l2 = c.probe.l2.front();
  hyper.learning_rate = c.probe.learning_rate;
  hyper.epochs = c.probe.epochs;
  hyper.class_balanced = c.probe.class_balanced;
  hyper.seed = seed;
  detail["train_items"] = train.labels.size();
  const bool can_sweep = c.probe.l2.size() > 1 && split.has_part(val_part) && !split.part(val_part).items.empty();
  if (!can_sweep) {
    ProbeModel model = train_linear_probe(train.features, train.labels, hyper, classes);
    detail["l2"] = hyper.l2;
    detail["final_loss"] = model.training_log.back();
    return model;
  }
  const Gathered val = gather(all, split.part(val_part).items);
  SweepResult sweep = sweep_l2(train.features, train.labels, val.features, val.labels, c.probe.l2, hyper, classes,
                               macro_f1_score);
  detail["l2"] = sweep.best.hyper.l2;
  detail["val_macro_f1"] = sweep.scores;
  detail["final_loss"] = sweep.best.training_log.back();
  return std::move(sweep.best);
}

}  // namespace

CurationManifest run_pipeline(const PipelineConfig& config) {
  if (const auto violations = validate_config(config); !violations.empty()) {
    std::string msg = "invalid config:";
    for (const auto& v : violations) msg += "\n  " + v;
    throw ValidationError(msg);
  }
  set_worker_count(config.workers);
  fs::create_directories(config.out);

  CurationManifest manifest;
  manifest.seed = config.seed;
  manifest.config = config_to_json(config);

  Sources src = initial_sources(config);
  const fs::path out = config.out;

  for (const auto& name : stage_order()) {
    if (!requested(config, name)) continue;
    StageRun run(config, name);
    auto& rec = run.record;
    const std::uint64_t seed = stage_seed(config.seed, name);
    try {
      if (rec.name == "downsample" || rec.name == "dedup") {
        run.input(src.points);
        const EmbeddingMatrix m = read_embeddings(src.points);
        rec.count_in = m.rows();
        fs::path dest;
        if (name == "downsample") {
          rec.params = {{"source_fps", {config.downsample.source.num, config.downsample.source.den}},
                        {"target_fps", {config.downsample.target.num, config.downsample.target.den}}};
          const auto keep = temporal_downsample_indices(m.frames, config.downsample.source, config.downsample.target);
          dest = out / "downsampled.emb1";
          write_embeddings(m.select(keep), dest);
          rec.count_out = keep.size();
        } else {
          rec.params = {{"threshold", config.dedup.threshold}, {"blocking", blocking_name(config.dedup.blocking)}};
          const DedupReport report = deduplicate(m, config.dedup.threshold, config.dedup.blocking);
          dest = out / "dedup.emb1";
          write_embeddings(m.select(report.kept), dest);
          write_text_atomic(out / "dedup_report.json", dedup_report_to_json(report).dump(2) + "\n");
          rec.count_out = report.kept.size();
          rec.details = {{"removed", report.removed_count}, {"components", report.components.size()}};
          run.output(dest);
          dest = out / "dedup_report.json";
        }
        run.output(dest);
        src.points = src.labeled = out / (name == "dedup" ? "dedup.emb1" : "downsampled.emb1");
      } else if (name == "cluster") {
        rec.params = {{"level_ks", config.cluster.level_ks},
                      {"seed", seed},
                      {"max_iters", config.cluster.kmeans.max_iters},
                      {"tol", config.cluster.kmeans.tol},
                      {"polish", config.cluster.kmeans.polish},
                      {"normalize", config.cluster.normalize}};
        run.input(src.points);
        const EmbeddingMatrix m = read_embeddings(src.points);
        rec.count_in = m.rows();
        RowMatrixXf points = m.values;
        if (config.cluster.normalize) points.rowwise().normalize();
        const auto tree = hierarchical_kmeans<float>(points, config.cluster.level_ks, seed, config.cluster.kmeans);
        const fs::path dest = config.sample.tree.value_or(out / "tree");
        write_cluster_tree(tree, dest);
        src.tree = dest;
        rec.count_out = tree.num_points();
        json inertia = json::array();
        for (const auto& level : tree.levels) inertia.push_back(level.inertia);
        rec.details = {{"inertia", inertia}};
        run.output(dest);
      } else if (name == "sample") {
        rec.params = {{"targets", config.sample.targets}, {"seed", seed}};
        run.input(src.points);
        run.input(src.tree);
        const EmbeddingMatrix m = read_embeddings(src.points);
        const ClusterTree<float> tree = read_cluster_tree(src.tree);
        if (tree.num_points() != m.rows()) {
          throw ValidationError("cluster tree covers " + std::to_string(tree.num_points()) + " points but " +
                                src.points.string() + " has " + std::to_string(m.rows()) + " rows");
        }
        rec.count_in = m.rows();
        json sizes = json::object();
        for (const std::size_t target : config.sample.targets) {
          const SampleAllocation alloc = balanced_sample(tree, m.rows(), target, seed);
          const fs::path dest = sample_file(out, target);
          write_embeddings(m.select(alloc.drawn), dest);
          run.output(dest);
          sizes[std::to_string(target)] = alloc.drawn.size();
          if (target == config.split_sample()) rec.count_out = alloc.drawn.size();
          if (alloc.saturated) rec.details["saturated"].push_back(target);
        }
        rec.details["rows"] = sizes;
        src.labeled = sample_file(out, config.split_sample());
      } else if (name == "split") {
        const auto& sp = config.split;
        rec.params = {{"protocol", sp.protocol}, {"seed", seed}};
        run.input(src.labeled);
        const EmbeddingMatrix m = read_embeddings(src.labeled);
        rec.count_in = m.rows();
        DatasetSplit split;
        if (sp.file) {
          run.input(*sp.file);
          split = read_split_file(*sp.file);
          rec.params["source"] = "file";
        } else {
          run.input(*config.labels);
          const LabelMap labels = read_labels(*config.labels);
          std::vector<LabeledIndex> items;
          items.reserve(m.rows());
          for (std::size_t i = 0; i < m.rows(); ++i) {
            const auto& f = m.frames[i];
            const auto it = labels.find({f.video_id, f.frame_number});
            if (it == labels.end()) {
              throw ValidationError("no label for " + f.video_id + " frame " + std::to_string(f.frame_number) +
                                    " (row " + std::to_string(i) + ")");
            }
            LabeledIndex item{i, it->second, std::nullopt};
            if (sp.group_by_video) item.group = f.video_id;
            items.push_back(std::move(item));
          }
          if (sp.protocol == "fractions") {
            rec.params["fractions"] = sp.fractions;
            split = stratified_split(items, sp.fractions, seed);
            if (sp.few_shot_fraction) {
              const std::size_t cap = sp.per_class_cap.value_or(std::numeric_limits<std::size_t>::max());
              split = few_shot_subset(split, *sp.few_shot_fraction, cap, derive_seed(seed, "few_shot"));
              rec.params["few_shot_fraction"] = *sp.few_shot_fraction;
              if (sp.per_class_cap) rec.params["per_class_cap"] = *sp.per_class_cap;
            }
          } else {
            rec.params["holdout"] = sp.holdout;
            rec.params["folds"] = sp.folds;
            split = holdout_kfold(items, sp.holdout, sp.folds, seed);
          }
          rec.params["group_by_video"] = sp.group_by_video;
        }
        split.check_disjoint();
        const fs::path dest = out / "split.txt";
        write_split_file(split, dest);
        src.split_file = dest;
        rec.count_out = split.total_items();
        for (const auto& p : split.parts) rec.details["parts"][p.name] = p.items.size();
        if (!split.warnings.empty()) rec.details["warnings"] = split.warnings;
        run.output(dest);
      } else if (name == "probe") {
        rec.params = {{"l2", config.probe.l2},
                      {"learning_rate", config.probe.learning_rate},
                      {"epochs", config.probe.epochs},
                      {"class_balanced", config.probe.class_balanced},
                      {"seed", seed}};
        run.input(src.labeled);
        run.input(src.split_file);
        const FeatureMatrix all = features_from_embeddings(read_embeddings(src.labeled));
        const DatasetSplit split = read_split_file(src.split_file);
        rec.count_in = rec.count_out = split.total_items();
        const fs::path dest = config.probe.model_dir.value_or(out / "probe");
        fs::remove_all(dest);
        if (is_kfold(split)) {
          for (std::size_t f = 0; f < fold_count(split); ++f) {
            const DatasetSplit fold = cv_fold(split, f);
            json detail;
            const ProbeModel model = fit_probe(config, fold, all, "train", "val", derive_seed(seed, f), detail);
            write_probe_model(model, dest / ("fold_" + std::to_string(f)));
            rec.details["folds"].push_back(detail);
          }
        } else {
          json detail;
          const ProbeModel model = fit_probe(config, split, all, "train", "val", seed, detail);
          write_probe_model(model, dest);
          rec.details = detail;
        }
        src.probe_dir = dest;
        run.output(dest);
      } else if (name == "evaluate") {
        rec.params = {{"task", config.evaluate.task},
                      {"backbone", config.evaluate.backbone},
                      {"pretrain_tag", config.evaluate.pretrain_tag}};
        run.input(src.labeled);
        run.input(src.split_file);
        run.input(src.probe_dir);
        const FeatureMatrix all = features_from_embeddings(read_embeddings(src.labeled));
        const DatasetSplit split = read_split_file(src.split_file);
        rec.count_in = split.total_items();
        if (!split.has_part("test") || split.part("test").items.empty()) {
          throw ValidationError("split has no test items to evaluate");
        }
        const Gathered test = gather(all, split.part("test").items);
        const std::size_t classes = class_count(split);

        std::vector<fs::path> model_dirs;
        if (is_kfold(split)) {
          for (std::size_t f = 0; f < fold_count(split); ++f) model_dirs.push_back(src.probe_dir / ("fold_" + std::to_string(f)));
        } else {
          model_dirs.push_back(src.probe_dir);
        }
        EvalReport report;
        report.task = config.evaluate.task;
        report.split_name = split.name;
        report.seed = split.seed;
        std::vector<double> macro, micro, auroc;
        ConfusionMatrix pooled{Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(
            static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(classes))};
        for (const auto& dir : model_dirs) {
          const ProbeModel model = read_probe_model(dir);
          const RowMatrixXd probs = predict_proba(model, test.features);
          const auto cm = confusion(test.labels, argmax_rows(probs), classes);
          pooled.counts += cm.counts;
          const F1Scores f1 = f1_scores(cm);
          macro.push_back(f1.macro_f1);
          micro.push_back(f1.micro_f1);
          const AurocResult a = auroc_ovr_macro(test.labels, probs);
          auroc.push_back(a.macro);
          for (const auto& w : a.warnings) {
            if (std::find(report.warnings.begin(), report.warnings.end(), w) == report.warnings.end()) {
              report.warnings.push_back(w);
            }
          }
        }
        report.metrics.push_back(aggregate_cv("macro_f1", macro));
        report.metrics.push_back(aggregate_cv("micro_f1", micro));
        report.metrics.push_back(aggregate_cv("auroc", auroc));
        const F1Scores pooled_f1 = f1_scores(pooled);
        report.pooled["micro_f1"] = pooled_f1.micro_f1;
        report.pooled["macro_f1"] = pooled_f1.macro_f1;

        write_text_atomic(out / "eval_report.json", format_eval_report(report));
        write_text_atomic(out / "eval_table.tsv", eval_table_header(report) + "\n" +
                                                      eval_table_row(report, config.evaluate.backbone,
                                                                     config.evaluate.pretrain_tag) +
                                                      "\n");
        rec.count_out = test.labels.size();
        rec.details = {{"test_items", test.labels.size()}, {"models", model_dirs.size()}};
        run.output(out / "eval_report.json");
        run.output(out / "eval_table.tsv");
      }
      manifest.stages.push_back(run.finish());
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      const bool invalid = dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const InvalidArgument*>(&e) ||
                           dynamic_cast<const FormatError*>(&e);
      rec.error_kind = invalid ? "validation" : "runtime";
      manifest.stages.push_back(run.finish());
      manifest.failed = true;
      break;
    }
  }
  // cached upstream outputs consumed by the first stage
  if (!src.cached.empty() && !manifest.stages.empty()) {
    json cached = json::array();
    for (const auto& p : src.cached) cached.push_back(p.filename().string());
    manifest.stages.front().details["cached_inputs"] = cached;
  }
  write_text_atomic(out / "manifest.json", manifest_to_json(manifest).dump(2) + "\n");
  return manifest;
}

}  // namespace curate
