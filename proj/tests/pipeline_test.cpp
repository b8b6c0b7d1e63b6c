#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "pipeline_fixture.hpp"
#include "stagekit/pipeline.hpp"
#include "support.hpp"

namespace stagekit {
namespace {

using testing::make_det;
using testing::make_synthetic;
using testing::Rng;
using testing::TempDir;
using testing::threshold_gate;
using testing::write_case;
using testing::write_text;

TEST(GateTest, Rules) {
  EXPECT_TRUE(gate_admits({1.0, 0.0}, GateRule::argmax_rule()));
  EXPECT_FALSE(gate_admits({0.5, 0.5}, GateRule::argmax_rule()));
  EXPECT_FALSE(gate_admits({0.4, 0.6}, GateRule::argmax_rule()));
  EXPECT_FALSE(gate_admits({0.55, 0.45}, GateRule::at_threshold(0.6)));
  EXPECT_TRUE(gate_admits({0.6, 0.4}, GateRule::at_threshold(0.6)));
  EXPECT_TRUE(gate_admits({0.5, 0.5}, GateRule::at_threshold(0.5)));
  EXPECT_THROW(GateRule::at_threshold(0.0), ValidationError);
  EXPECT_THROW(GateRule::at_threshold(1.0), ValidationError);
  EXPECT_THROW(GateRule::at_threshold(1.5), ValidationError);
}

nlohmann::json minimal_config() {
  return nlohmann::json::parse(R"({
    "images": "frames.json",
    "classification": {"views": [{"transform": "identity", "file": "cls.json"}]},
    "grounding": {"sources": [{"id": "a", "views": [{"transform": "hflip", "file": "a.json"}]}]}
  })");
}

TEST(ConfigTest, MinimalConfigDefaults) {
  const auto cfg = config_from_json(minimal_config(), "/data");
  EXPECT_EQ(cfg.images_file, "frames.json");
  ASSERT_EQ(cfg.classification_inputs.size(), 1u);
  EXPECT_EQ(cfg.tta_aggregation, TtaAggregation::mean);
  EXPECT_EQ(cfg.gate_rule.kind, GateRule::Kind::argmax);
  ASSERT_EQ(cfg.grounding_inputs.size(), 1u);
  EXPECT_EQ(cfg.grounding_inputs[0].views[0].transform.kind, TransformKind::hflip);
  EXPECT_EQ(cfg.ensemble.strategy, Strategy::affirmative);
  EXPECT_FALSE(cfg.evaluation.has_value());
  EXPECT_EQ(cfg.resolve("a.json"), std::filesystem::path("/data/a.json"));
}

TEST(ConfigTest, ScaleViewAndOptionalSections) {
  auto j = minimal_config();
  j["classification"]["views"].push_back({{"transform", "scale"}, {"scale", 0.5}, {"file", "s.json"}});
  j["classification"]["aggregation"] = "majority_vote";
  j["ensemble"] = {{"strategy", "consensus"}, {"merge", "weighted_average"}, {"cluster_iou", 0.6}};
  j["evaluation"] = {{"gt", "gt.json"}, {"mask", true}, {"max_dets", 10}};
  const auto cfg = config_from_json(j, ".");
  EXPECT_EQ(cfg.classification_inputs[1].transform.kind, TransformKind::scale);
  EXPECT_EQ(cfg.classification_inputs[1].transform.scale_factor, 0.5);
  EXPECT_EQ(cfg.tta_aggregation, TtaAggregation::majority_vote);
  EXPECT_EQ(cfg.ensemble.strategy, Strategy::consensus);
  EXPECT_EQ(cfg.ensemble.merge_mode, MergeMode::weighted_average);
  EXPECT_EQ(cfg.ensemble.cluster_iou, 0.6);
  EXPECT_TRUE(cfg.evaluation->mask);
  EXPECT_EQ(cfg.evaluation->max_dets, 10u);
}

std::string config_error(const nlohmann::json& j) {
  try {
    config_from_json(j, ".");
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

TEST(ConfigTest, ProblemsAreCollectedTogether) {
  auto j = minimal_config();
  j["classification"]["gate"] = threshold_gate(1.5);
  j["grounding"]["sources"][0]["weight"] = 2;
  j["ensemble"] = {{"strategy", "most"}};
  const auto msg = config_error(j);
  EXPECT_NE(msg.find("(0, 1)"), std::string::npos) << msg;
  EXPECT_NE(msg.find("unknown key 'grounding.sources[0].weight'"), std::string::npos) << msg;
  EXPECT_NE(msg.find("most"), std::string::npos) << msg;

  auto missing = minimal_config();
  missing.erase("grounding");
  missing.erase("images");
  const auto msg2 = config_error(missing);
  EXPECT_NE(msg2.find("'grounding'"), std::string::npos) << msg2;
  EXPECT_NE(msg2.find("'images'"), std::string::npos) << msg2;

  auto bad_view = minimal_config();
  bad_view["classification"]["views"][0]["transform"] = "shear";
  EXPECT_NE(config_error(bad_view).find("shear"), std::string::npos);

  auto argmax_with_threshold = minimal_config();
  argmax_with_threshold["classification"]["gate"] = {{"rule", "argmax"}, {"threshold", 0.5}};
  EXPECT_FALSE(config_error(argmax_with_threshold).empty());
}

TEST(ConfigTest, ParseConfigResolvesRelativeToFile) {
  TempDir dir("cfg");
  write_text(dir / "config.json", minimal_config().dump());
  const auto cfg = parse_config(dir / "config.json");
  EXPECT_EQ(cfg.resolve("a.json"), dir / "a.json");
  EXPECT_EQ(cfg.config_sha256, sha256_hex(read_file(dir / "config.json")));
  write_text(dir / "broken.json", "{\"images\": ");
  EXPECT_THROW(parse_config(dir / "broken.json"), IoError);
  EXPECT_THROW(parse_config(dir / "absent.json"), IoError);
}

TEST(PipelineTest, AllGatedOutGivesNoDetections) {
  Rng rng(1);
  auto c = make_synthetic(rng, 10, 2);
  for (auto& o : c.cls) o.probs = {0.1, 0.9};
  TempDir dir("pipe");
  const auto res = run_pipeline(parse_config(write_case(dir.path(), c, {{"rule", "argmax"}})));
  EXPECT_TRUE(res.detections.detections.empty());
  EXPECT_EQ(res.manifest["counts"]["gated_in"], 0);
  // Ground truth still counts: every recall is zero.
  EXPECT_EQ(res.report->detection->ar_50, 0.0);
}

TEST(PipelineTest, SingleIdentitySourceEqualsNms) {
  Rng rng(2);
  auto c = make_synthetic(rng, 12, 1);
  for (auto& o : c.cls) o.probs = {0.9, 0.1};
  TempDir dir("pipe");
  const auto res = run_pipeline(parse_config(write_case(dir.path(), c, {{"rule", "argmax"}})));
  auto expected = nms_per_group(c.sources[0], 0.5);
  for (auto& d : expected.detections) d.source_id = std::string(kEnsembleSourceId);
  EXPECT_EQ(to_json(res.detections).dump(), to_json(canonical_order(expected)).dump());
}

TEST(PipelineTest, OnlyGatedInImagesKeepDetections) {
  Rng rng(3);
  auto c = make_synthetic(rng, 20, 3);
  std::set<ImageId> bleeding;
  for (std::size_t i = 0; i < c.cls.size(); ++i) {
    c.cls[i].probs = i % 2 ? std::vector<double>{0.3, 0.7} : std::vector<double>{0.7, 0.3};
    if (i % 2 == 0) bleeding.insert(c.cls[i].image_id);
  }
  TempDir dir("pipe");
  const auto res = run_pipeline(parse_config(write_case(dir.path(), c, threshold_gate(0.5))));
  EXPECT_FALSE(res.detections.detections.empty());
  for (const auto& d : res.detections.detections) EXPECT_TRUE(bleeding.count(d.image_id));
  for (const auto& g : res.gates) EXPECT_EQ(g.bleeding, bleeding.count(g.image_id) == 1);
  EXPECT_EQ(res.manifest["counts"]["gated_in"], 10);
  EXPECT_TRUE(res.report->classification.has_value());
}

TEST(PipelineTest, ViewsArePooledBackToOriginalFrame) {
  TempDir dir("pipe");
  const std::vector<ImageMeta> frames{{"1", 100, 50}};
  write_text(dir / "frames.json", dump(testing::frames_json(frames)));
  write_text(dir / "cls.json", dump(to_json(std::vector<ClassificationOutput>{{"1", {0.8, 0.2}}})));
  DetectionSet flipped{frames, {make_det("1", 0.9, {70, 10, 90, 20}, 1, "")}};
  write_text(dir / "a.json", dump(to_json(flipped)));
  write_text(dir / "config.json", minimal_config().dump());
  const auto res = run_pipeline(parse_config(dir / "config.json"));
  ASSERT_EQ(res.detections.detections.size(), 1u);
  EXPECT_EQ(res.detections.detections[0].box, (BoundingBox{10, 10, 30, 20}));
}

TEST(PipelineTest, ManifestRecordsInputsAndSettings) {
  Rng rng(4);
  const auto c = make_synthetic(rng, 5, 2);
  TempDir dir("pipe");
  const auto cfg = parse_config(write_case(dir.path(), c, threshold_gate(0.25)));
  const auto res = run_pipeline(cfg);
  const auto& m = res.manifest;
  EXPECT_EQ(m["config_sha256"], sha256_hex(read_file(dir / "config.json")));
  // frames, classification, two sources, ground truth, labels
  ASSERT_EQ(m["files"].size(), 6u);
  for (const auto& f : m["files"]) {
    EXPECT_EQ(f["sha256"], sha256_hex(read_file(dir / f["path"].get<std::string>())));
  }
  EXPECT_EQ(m["settings"]["ensemble"]["strategy"], "affirmative");
  EXPECT_FALSE(m["tie_breaks"].empty());
  EXPECT_EQ(m.dump().find("time"), std::string::npos);
}

TEST(PipelineTest, DeterministicAcrossRunsAndThreads) {
  Rng rng(5);
  const auto c = make_synthetic(rng, 30, 3);
  TempDir dir("pipe");
  const auto cfg = parse_config(write_case(dir.path(), c, threshold_gate(0.4)));
  const auto a = pipeline_outputs(run_pipeline(cfg, 1));
  const auto b = pipeline_outputs(run_pipeline(cfg, 4));
  EXPECT_EQ(a, b);
}

TEST(PipelineTest, LowerThresholdNeverShrinksGatedSet) {
  Rng rng(6);
  const auto c = make_synthetic(rng, 40, 2);
  std::set<ImageId> previous;
  for (int t = 9; t >= 1; --t) {
    TempDir dir("pipe");
    const auto res = run_pipeline(parse_config(write_case(dir.path(), c, threshold_gate(t / 10.0))));
    std::set<ImageId> admitted;
    for (const auto& g : res.gates) {
      if (g.bleeding) admitted.insert(g.image_id);
    }
    EXPECT_TRUE(std::includes(admitted.begin(), admitted.end(), previous.begin(), previous.end()));
    previous = admitted;
  }
}

TEST(PipelineTest, InputErrors) {
  Rng rng(7);
  auto c = make_synthetic(rng, 4, 1);
  TempDir dir("pipe");
  auto cfg_path = write_case(dir.path(), c, threshold_gate(0.5));

  auto missing_cls = c;
  missing_cls.cls.pop_back();
  write_case(dir.path(), missing_cls, threshold_gate(0.5));
  EXPECT_THROW(run_pipeline(parse_config(cfg_path)), ValidationError);

  auto bad_probs = c;
  bad_probs.cls[0].probs = {0.7, 0.7};
  write_case(dir.path(), bad_probs, threshold_gate(0.5));
  EXPECT_THROW(run_pipeline(parse_config(cfg_path)), ValidationError);

  write_case(dir.path(), c, threshold_gate(0.5));
  std::filesystem::remove(dir / "det_0.json");
  EXPECT_THROW(run_pipeline(parse_config(cfg_path)), IoError);
}

TEST(CommitTest, WritesAllOrNothing) {
  TempDir dir("commit");
  commit_files(dir / "out", {{"a.txt", "1"}, {"b.txt", "2"}});
  EXPECT_EQ(read_file(dir / "out" / "a.txt"), "1");
  EXPECT_EQ(read_file(dir / "out" / "b.txt"), "2");
  EXPECT_FALSE(std::filesystem::exists(dir / "out" / "a.txt.tmp"));

  // A directory squatting on a target name is caught before anything lands.
  std::filesystem::create_directories(dir / "blocked" / "b.txt" / "x");
  EXPECT_THROW(commit_files(dir / "blocked", {{"a.txt", "1"}, {"b.txt", "2"}}), IoError);
  EXPECT_FALSE(std::filesystem::exists(dir / "blocked" / "a.txt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "blocked" / "a.txt.tmp"));
}

}  // namespace
}  // namespace stagekit
