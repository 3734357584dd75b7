#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "curate/errors.hpp"
#include "curate/pipeline.hpp"
#include "curate/synthetic.hpp"
#include "test_support.hpp"

using namespace curate;
using curate::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 3,000 rows is enough to exercise every stage in well under a second.
struct SmallRun {
  TempDir dir{"pipeline"};
  PipelineConfig config;

  SmallRun() {
    SyntheticSpec spec;
    spec.rows = 3000;
    spec.dim = 16;
    spec.videos = 30;
    spec.modes = 12;
    spec.classes = 3;
    const auto data = make_synthetic(spec);
    write_embeddings(data.matrix, dir / "emb.emb1");
    write_labels(data.matrix.frames, data.labels, dir / "labels.csv");
    config.seed = 7;
    config.input = dir / "emb.emb1";
    config.labels = dir / "labels.csv";
    config.out = dir / "out";
    config.stages = {"dedup", "cluster", "sample", "split", "probe", "evaluate"};
    config.cluster.level_ks = {60, 12, 4};
    config.sample.targets = {200, 600};
    config.probe.epochs = 50;
  }
};

}  // namespace

TEST(ValidateConfig, ReportsEveryViolation) {
  TempDir dir("validate");
  PipelineConfig c;
  c.input = dir / "missing.emb1";
  c.stages = {"dedup", "cluster", "sample"};
  c.cluster.level_ks = {40, 400};
  c.sample.targets = {0};
  const auto report = validate_config(c);
  auto has = [&](const std::string& needle) {
    return std::any_of(report.begin(), report.end(), [&](const auto& m) { return m.find(needle) != std::string::npos; });
  };
  EXPECT_TRUE(has("level_ks not decreasing"));
  EXPECT_TRUE(has("missing.emb1"));
  EXPECT_TRUE(has("target sizes must be positive"));
  EXPECT_THROW(run_pipeline(c), ValidationError);
}

TEST(ValidateConfig, DeskConfigIsClean) {
  SmallRun run;
  EXPECT_TRUE(validate_config(run.config).empty());
}

TEST(ConfigJson, RoundTripAndUnknownKeys) {
  SmallRun run;
  run.config.split.few_shot_fraction = 0.01;
  run.config.dedup.blocking = Blocking::kGlobal;
  const auto doc = config_to_json(run.config);
  EXPECT_EQ(config_to_json(config_from_json(doc)), doc);
  auto bad = doc;
  bad["cluster"]["levels"] = 3;
  EXPECT_THROW(config_from_json(bad), FormatError);
  EXPECT_THROW(config_from_json(nlohmann::json{{"seed", "seven"}}), FormatError);
}

TEST(RunPipeline, DedupOnlyCollapsesThreeDuplicates) {
  TempDir dir("dedup-only");
  EmbeddingMatrix m;
  m.dim = 2;
  m.values.resize(3, 2);
  m.values << 1, 2, 1, 2, 1, 2;
  for (std::uint64_t f = 0; f < 3; ++f) m.frames.push_back({"vid", f * 6, f * 200});
  write_embeddings(m, dir / "in.emb1");
  PipelineConfig c;
  c.input = dir / "in.emb1";
  c.out = dir / "out";
  c.stages = {"dedup"};
  const auto manifest = run_pipeline(c);
  ASSERT_FALSE(manifest.failed);
  EXPECT_EQ(manifest.stage("dedup").count_in, 3u);
  EXPECT_EQ(manifest.stage("dedup").count_out, 1u);
  EXPECT_EQ(read_embeddings(dir / "out" / "dedup.emb1").rows(), 1u);
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "manifest.json"));
}

TEST(RunPipeline, CountsTelescopeAndDigestsVerify) {
  SmallRun run;
  const auto manifest = run_pipeline(run.config);
  ASSERT_FALSE(manifest.failed);
  ASSERT_EQ(manifest.stages.size(), 6u);
  for (std::size_t s = 1; s < manifest.stages.size(); ++s) {
    EXPECT_EQ(manifest.stages[s].count_in, manifest.stages[s - 1].count_out) << manifest.stages[s].name;
  }
  EXPECT_EQ(read_embeddings(run.config.out / "sample_200.emb1").rows(), 200u);
  EXPECT_EQ(read_embeddings(run.config.out / "sample_600.emb1").rows(), 600u);
  EXPECT_TRUE(verify_manifest(manifest, run.config.out).empty());

  const auto back = manifest_from_json(nlohmann::json::parse(slurp(run.config.out / "manifest.json")));
  EXPECT_EQ(manifest_to_json(back), manifest_to_json(manifest));

  std::ofstream(run.config.out / "split.txt", std::ios::app) << "tamper\n";
  const auto bad = verify_manifest(manifest, run.config.out);
  ASSERT_EQ(bad.size(), 1u);
  EXPECT_EQ(bad[0], "split.txt");
}

TEST(RunPipeline, IdenticalConfigIsByteIdentical) {
  SmallRun run;
  run_pipeline(run.config);
  const auto first_manifest = manifest_without_timing(nlohmann::json::parse(slurp(run.config.out / "manifest.json")));
  const auto first_sample = slurp(run.config.out / "sample_600.emb1");
  const auto first_report = slurp(run.config.out / "eval_report.json");
  std::filesystem::remove_all(run.config.out);

  run_pipeline(run.config);
  EXPECT_EQ(manifest_without_timing(nlohmann::json::parse(slurp(run.config.out / "manifest.json"))), first_manifest);
  EXPECT_EQ(slurp(run.config.out / "sample_600.emb1"), first_sample);
  EXPECT_EQ(slurp(run.config.out / "eval_report.json"), first_report);
}

TEST(RunPipeline, PartialRerunFromCacheMatchesFullRun) {
  SmallRun run;
  const auto full = run_pipeline(run.config);
  ASSERT_FALSE(full.failed);
  const auto split_digest = digest_path(run.config.out / "split.txt");
  const auto probe_digest = digest_path(run.config.out / "probe");
  const auto report_digest = digest_path(run.config.out / "eval_report.json");
  std::filesystem::remove(run.config.out / "split.txt");
  std::filesystem::remove_all(run.config.out / "probe");
  std::filesystem::remove(run.config.out / "eval_report.json");

  auto partial_config = run.config;
  partial_config.stages = {"split", "probe", "evaluate"};
  const auto partial = run_pipeline(partial_config);
  ASSERT_FALSE(partial.failed);
  EXPECT_TRUE(partial.stage("split").details.contains("cached_inputs"));
  EXPECT_EQ(partial.stage("split").count_in, full.stage("split").count_in);
  EXPECT_EQ(digest_path(run.config.out / "split.txt"), split_digest);
  EXPECT_EQ(digest_path(run.config.out / "probe"), probe_digest);
  EXPECT_EQ(digest_path(run.config.out / "eval_report.json"), report_digest);
}

TEST(RunPipeline, HoldoutKFoldProducesFoldModels) {
  SmallRun run;
  run.config.split.protocol = "holdout_kfold";
  run.config.split.folds = 3;
  run.config.split.group_by_video = true;
  const auto manifest = run_pipeline(run.config);
  ASSERT_FALSE(manifest.failed) << manifest.stages.back().error;
  for (int f = 0; f < 3; ++f) EXPECT_TRUE(std::filesystem::exists(run.config.out / "probe" / ("fold_" + std::to_string(f))));
  const auto report = parse_eval_report(slurp(run.config.out / "eval_report.json"));
  EXPECT_EQ(report.metric("macro_f1").per_fold.size(), 3u);
  EXPECT_TRUE(report.pooled.count("micro_f1"));
}

TEST(RunPipeline, StageFailureIsRecordedAndHalts) {
  SmallRun run;
  // drop the label file's tail so some sampled frames have no label
  const auto text = slurp(*run.config.labels);
  std::ofstream(*run.config.labels, std::ios::trunc) << text.substr(0, text.size() / 2);
  const auto manifest = run_pipeline(run.config);
  EXPECT_TRUE(manifest.failed);
  ASSERT_TRUE(manifest.has_stage("split"));
  EXPECT_EQ(manifest.stage("split").status, "failed");
  EXPECT_EQ(manifest.stage("split").error_kind, "validation");
  EXPECT_NE(manifest.stage("split").error.find("no label"), std::string::npos);
  EXPECT_EQ(manifest.stage("sample").status, "ok");
  EXPECT_FALSE(manifest.has_stage("probe"));
  const auto on_disk = manifest_from_json(nlohmann::json::parse(slurp(run.config.out / "manifest.json")));
  EXPECT_TRUE(on_disk.failed);
}

TEST(DigestPath, DirectoryDigestFollowsContents) {
  TempDir dir("digest");
  std::filesystem::create_directories(dir / "d" / "sub");
  std::ofstream(dir / "d" / "a.txt") << "a";
  std::ofstream(dir / "d" / "sub" / "b.txt") << "b";
  const auto before = digest_path(dir / "d");
  EXPECT_EQ(before.size(), 64u);
  EXPECT_EQ(digest_path(dir / "d"), before);
  std::ofstream(dir / "d" / "sub" / "b.txt") << "c";
  EXPECT_NE(digest_path(dir / "d"), before);
  // sha256("abc")
  std::ofstream(dir / "abc") << "abc";
  EXPECT_EQ(digest_path(dir / "abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(StageSeed, DependsOnMasterAndStage) {
  EXPECT_EQ(stage_seed(1, "cluster"), stage_seed(1, "cluster"));
  EXPECT_NE(stage_seed(1, "cluster"), stage_seed(2, "cluster"));
  EXPECT_NE(stage_seed(1, "cluster"), stage_seed(1, "sample"));
}
