#include <gtest/gtest.h>

#include <filesystem>

#include "ctm/io.hpp"
#include "ctm/pipeline.hpp"
#include "test_util.hpp"

namespace ctm::pipeline {
namespace {

namespace fs = std::filesystem;

fs::path config_dir() { return fs::path(CTM_SOURCE_DIR) / "configs"; }

TEST(PipelineConfig, DefaultsCarryPublishedValues) {
  const PipelineConfig c;
  const auto j = c.to_json();
  EXPECT_DOUBLE_EQ(j["preprocess"]["target_mm"].get<double>(), 1.5);
  EXPECT_DOUBLE_EQ(j["segnet"]["w_dice"].get<double>(), 0.6);
  EXPECT_DOUBLE_EQ(j["segnet"]["w_ce"].get<double>(), 0.4);
  EXPECT_EQ(j["postproc"]["min_voxels"].get<int>(), 100);
  EXPECT_DOUBLE_EQ(j["measure"]["dropout"]["Liver"].get<double>(), 0.2);
  EXPECT_DOUBLE_EQ(j["measure"]["dropout"]["Prostate"].get<double>(), 0.3);
  EXPECT_DOUBLE_EQ(j["measure_training"]["adam"]["beta1"].get<double>(), 0.9);
  EXPECT_DOUBLE_EQ(j["measure_training"]["adam"]["beta2"].get<double>(), 0.999);
  EXPECT_EQ(j["measure"]["patch"], nlohmann::json({128, 128, 64}));
}

TEST(PipelineConfig, DigestTracksEveryHyperparameterButNotOutput) {
  const PipelineConfig a;
  PipelineConfig b = a;
  b.output = "elsewhere";
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_EQ(a.digest().size(), 64u);
  b.target_mm = 3.0;
  EXPECT_NE(a.digest(), b.digest());
  PipelineConfig c = a;
  c.segnet.w_dice = 0.5;
  c.segnet.w_ce = 0.5;
  EXPECT_NE(a.digest(), c.digest());
  PipelineConfig d = a;
  d.seed = 1;
  EXPECT_NE(a.digest(), d.digest());
}

TEST(PipelineConfig, JsonRoundTrip) {
  const auto c = PipelineConfig::load(config_dir() / "desk.json");
  EXPECT_DOUBLE_EQ(c.target_mm, 3.0);
  EXPECT_EQ(c.phantom.train_count, 40);
  const auto back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.digest(), c.digest());
}

TEST(PipelineConfig, UnknownKeysAndBadValuesRejected) {
  EXPECT_THROW(PipelineConfig::from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"preprocess", {{"target", 1.5}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"segnet", {{"depth", 3}, {"colour", 1}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"postproc", {{"connectivity", 18}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"eval", {{"scales", {{"weight_kg", 1.0}}}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"phantom", {{"dims", {32, 32, 32}}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(PipelineConfig::load("/nonexistent/c.json"), ConfigError);
}

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Stages, MissingInputsNameTheFile) {
  testing::TempDir dir;
  auto c = PipelineConfig::load(config_dir() / "tiny.json");
  c.output = dir.path();
  try {
    run_stage("evaluate", c, {});
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("case_000_post"), std::string::npos);
  }
  EXPECT_THROW(run_stage("bake", c, {}), ConfigError);
}

TEST(Stages, TinyRunIsCompleteResumableAndReproducible) {
  testing::TempDir a, b;
  auto c = PipelineConfig::load(config_dir() / "tiny.json");
  c.output = a.path();
  std::vector<std::string> events;
  RunOptions opts;
  opts.progress = [&](const nlohmann::json& j) {
    events.push_back(j["stage"].get<std::string>() + ":" + j["event"].get<std::string>());
  };
  run_all(c, opts);
  for (const char* f : {"report.json", "roc.csv", "config.json", "checkpoints/segnet.json",
                        "checkpoints/measure.json", "predictions/case_001_measure.json"}) {
    EXPECT_TRUE(fs::exists(a.path() / f)) << f;
  }
  // Unchanged rerun skips every stage.
  for (std::string_view s : kStages) EXPECT_EQ(run_stage(s, c, {}), StageStatus::Skipped) << s;
  // A changed postproc setting reruns only that stage and what it feeds.
  auto c2 = c;
  c2.postproc.min_voxels = 5;
  EXPECT_EQ(run_stage("train-seg", c2, {}), StageStatus::Skipped);
  EXPECT_EQ(run_stage("postprocess", c2, {}), StageStatus::Ran);
  // Tampered outputs are regenerated.
  io::write_text_file(a.path() / "roc.csv", "organ,threshold,fpr,tpr\n");
  EXPECT_EQ(run_stage("evaluate", c, {}), StageStatus::Ran);

  auto cb = c;
  cb.output = b.path();
  RunOptions four;
  four.threads = 4;
  run_all(cb, four);
  EXPECT_EQ(io::read_text_file(b.path() / "roc.csv"), io::read_text_file(a.path() / "roc.csv"));
  const auto report = io::read_json_file(a.path() / "report.json");
  EXPECT_EQ(report["config_digest"].get<std::string>(), c.digest());
  EXPECT_EQ(report["organs"].size(), 5u);
  EXPECT_NE(std::find(events.begin(), events.end(), "train-seg:epoch"), events.end());
}

}  // namespace
}  // namespace ctm::pipeline
