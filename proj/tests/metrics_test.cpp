#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles/ap_oracle.hpp"
#include "stagekit/metrics.hpp"
#include "support.hpp"

namespace stagekit {
namespace {

using testing::make_ann;
using testing::make_det;
using testing::Rng;

GroundTruth frames_gt(int images, int w = 100, int h = 100) {
  GroundTruth gt;
  for (int i = 0; i < images; ++i) gt.images.push_back({std::to_string(i), w, h});
  return gt;
}

DetectionSet preds_for(const GroundTruth& gt) {
  DetectionSet ds;
  ds.images = gt.images;
  return ds;
}

// Independent evaluation of the same data through the brute-force oracle.
std::vector<double> oracle_ap(const DetectionSet& ds, const GroundTruth& gt, std::size_t max_dets) {
  std::vector<oracle::Pred> preds;
  std::vector<oracle::Gt> gts;
  for (const auto& d : ds.detections) {
    preds.push_back({d.image_id, d.score, {d.box.x1, d.box.y1, d.box.x2, d.box.y2}});
  }
  for (const auto& a : gt.annotations) {
    gts.push_back({a.image_id, {a.box.x1, a.box.y1, a.box.x2, a.box.y2}});
  }
  std::vector<double> out;
  for (double t : oracle::thresholds()) {
    out.push_back(oracle::ap_from_hits(oracle::ranked_hits(preds, gts, t, max_dets), gts.size()));
  }
  return out;
}

TEST(MatchTest, GreedyOneToOne) {
  auto gt = frames_gt(1);
  gt.annotations = {make_ann("0", {0, 0, 10, 10}), make_ann("0", {50, 50, 60, 60})};
  auto ds = preds_for(gt);
  ds.detections = {make_det("0", 0.9, {0, 0, 10, 10}), make_det("0", 0.8, {0, 0, 10, 10}),
                   make_det("0", 0.7, {50, 50, 60, 58})};
  const auto m = match_detections(ds, gt, 0.5, IouKind::box);
  ASSERT_EQ(m.records.size(), 3u);
  EXPECT_TRUE(m.records[0].matched);
  EXPECT_EQ(*m.records[0].annotation, 0u);
  EXPECT_FALSE(m.records[1].matched);
  EXPECT_TRUE(m.records[2].matched);
  EXPECT_EQ(m.total_gt, 2u);
}

TEST(MatchTest, CategoryMustAgree) {
  auto gt = frames_gt(1);
  gt.annotations = {make_ann("0", {0, 0, 10, 10}, 2)};
  auto ds = preds_for(gt);
  ds.detections = {make_det("0", 0.9, {0, 0, 10, 10}, 1)};
  EXPECT_FALSE(match_detections(ds, gt, 0.5, IouKind::box).records[0].matched);
}

TEST(MatchTest, UnknownImageAndMissingMasks) {
  auto gt = frames_gt(1);
  gt.annotations = {make_ann("0", {0, 0, 10, 10})};
  auto ds = preds_for(gt);
  ds.detections = {make_det("7", 0.9, {0, 0, 10, 10})};
  EXPECT_THROW(match_detections(ds, gt, 0.5, IouKind::box), ValidationError);

  ds.detections = {make_det("0", 0.9, {0, 0, 10, 10})};
  try {
    coco_summary(ds, gt, IouKind::mask);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("detections[0]"), std::string::npos);
    EXPECT_NE(what.find("annotations[0]"), std::string::npos);
  }
}

TEST(ApTest, TpFpTpExample) {
  MatchResult m;
  m.total_gt = 2;
  m.records = {{"0", 1, 0.9, true, 0, 0}, {"0", 1, 0.8, false, {}, 1}, {"0", 1, 0.7, true, 1, 2}};
  // Levels 0..50 see precision 1, levels 51..100 see 2/3.
  const double expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
  EXPECT_NEAR(*average_precision(m), expected, 1e-15);
  EXPECT_NEAR(expected, 253.0 / 303.0, 1e-15);
  EXPECT_NEAR(*average_precision(m), oracle::ap_from_hits({true, false, true}, 2), 1e-12);
  EXPECT_DOUBLE_EQ(*average_recall(m), 1.0);

  m.total_gt = 3;
  EXPECT_DOUBLE_EQ(*average_recall(m), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*average_recall(m, 1), 1.0 / 3.0);

  m.total_gt = 0;
  EXPECT_FALSE(average_precision(m).has_value());
  EXPECT_FALSE(average_recall(m).has_value());
}

TEST(ApTest, NoPredictionsGivesZero) {
  MatchResult m;
  m.total_gt = 4;
  EXPECT_EQ(*average_precision(m), 0.0);
  EXPECT_EQ(*average_recall(m), 0.0);
}

TEST(SummaryTest, PerfectPredictionsAreOneHundred) {
  auto gt = frames_gt(3);
  Rng rng(5);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      auto a = make_ann(std::to_string(i), rng.grid_box(100, 100), 1 + k % 2);
      a.mask = rng.mask(100, 100, 0.3);
      gt.annotations.push_back(a);
    }
  auto ds = preds_for(gt);
  for (const auto& a : gt.annotations) {
    ds.detections.push_back({a.image_id, a.category_id, 1.0, a.box, a.mask, "m"});
  }
  for (auto kind : {IouKind::box, IouKind::mask}) {
    const auto b = coco_summary(ds, gt, kind);
    for (double v : grounding_row_values(b)) EXPECT_EQ(to_percent(v, 1), 100.0);
  }
}

TEST(SummaryTest, EmptyPredictionsAreZero) {
  auto gt = frames_gt(2);
  gt.annotations = {make_ann("0", {0, 0, 5, 5}), make_ann("1", {1, 1, 4, 4}, 3)};
  const auto b = coco_summary(preds_for(gt), gt, IouKind::box);
  for (double v : grounding_row_values(b)) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(coco_summary(preds_for(gt), frames_gt(2), IouKind::box), ValidationError);
}

TEST(SummaryTest, MatchesOracleOnCraftedData) {
  auto gt = frames_gt(3);
  gt.annotations = {make_ann("0", {0, 0, 10, 10}), make_ann("0", {20, 20, 30, 30}),
                    make_ann("1", {5, 5, 25, 25}), make_ann("2", {40, 40, 60, 60})};
  auto ds = preds_for(gt);
  ds.detections = {make_det("0", 0.95, {0, 0, 10, 9}),   make_det("0", 0.6, {21, 21, 30, 30}),
                   make_det("0", 0.5, {0, 0, 10, 10}),   make_det("1", 0.9, {6, 6, 25, 25}),
                   make_det("1", 0.3, {50, 50, 60, 60}), make_det("2", 0.85, {40, 40, 55, 60}),
                   make_det("2", 0.6, {40, 40, 60, 60})};
  const auto b = coco_summary(ds, gt, IouKind::box);
  const auto expected = oracle_ap(ds, gt, kDefaultMaxDets);
  for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
    EXPECT_NEAR(b.pooled_ap[t], expected[t], 1e-12) << "threshold " << t;
    EXPECT_NEAR(b.categories[0].ap[t], expected[t], 1e-12);
  }
  // Single category: the mAP and AP rows coincide.
  EXPECT_DOUBLE_EQ(b.map_50_95, b.ap_50_95);
  EXPECT_DOUBLE_EQ(b.map_50, b.ap_50);
}

TEST(SummaryTest, MaxDetsBudgetMatchesOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    auto gt = frames_gt(2, 40, 40);
    for (int k = rng.integer(1, 5); k > 0; --k) {
      gt.annotations.push_back(make_ann(std::to_string(rng.integer(0, 1)), rng.grid_box(40, 40)));
    }
    auto ds = preds_for(gt);
    for (int k = rng.integer(0, 8); k > 0; --k) {
      ds.detections.push_back(make_det(std::to_string(rng.integer(0, 1)), rng.integer(1, 10) / 10.0,
                                       rng.grid_box(40, 40)));
    }
    const auto b = coco_summary(ds, gt, IouKind::box, 2);
    const auto expected = oracle_ap(ds, gt, 2);
    for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
      EXPECT_NEAR(b.pooled_ap[t], expected[t], 1e-9);
    }
  }
}

TEST(SummaryTest, RankInvarianceUnderSquaredScores) {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    auto gt = frames_gt(3, 50, 50);
    for (int k = rng.integer(1, 6); k > 0; --k) {
      gt.annotations.push_back(
          make_ann(std::to_string(rng.integer(0, 2)), rng.grid_box(50, 50), rng.integer(1, 2)));
    }
    auto ds = preds_for(gt);
    for (int k = rng.integer(0, 10); k > 0; --k) {
      ds.detections.push_back(make_det(std::to_string(rng.integer(0, 2)), rng.uniform(0, 1),
                                       rng.grid_box(50, 50), rng.integer(1, 2)));
    }
    auto squared = ds;
    for (auto& d : squared.detections) d.score *= d.score;
    const auto a = grounding_row_values(coco_summary(ds, gt, IouKind::box));
    const auto b = grounding_row_values(coco_summary(squared, gt, IouKind::box));
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(SummaryTest, AppendingLowScoreDetectionNeverLowersRecall) {
  // Adding a lowest-scored detection can only add hits at the tail; AR cannot drop.
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    auto gt = frames_gt(2, 30, 30);
    for (int k = rng.integer(1, 4); k > 0; --k) {
      gt.annotations.push_back(make_ann(std::to_string(rng.integer(0, 1)), rng.grid_box(30, 30)));
    }
    auto ds = preds_for(gt);
    for (int k = rng.integer(0, 5); k > 0; --k) {
      ds.detections.push_back(
          make_det(std::to_string(rng.integer(0, 1)), rng.uniform(0.5, 1), rng.grid_box(30, 30)));
    }
    const auto before = coco_summary(ds, gt, IouKind::box);
    ds.detections.push_back(make_det(std::to_string(rng.integer(0, 1)), 0.1, rng.grid_box(30, 30)));
    const auto after = coco_summary(ds, gt, IouKind::box);
    EXPECT_GE(after.ar_50_95, before.ar_50_95);
    EXPECT_GE(after.ar_50, before.ar_50);
  }
}

TEST(SummaryTest, ThreadCountDoesNotChangeResults) {
  Rng rng(7);
  auto gt = frames_gt(8, 64, 64);
  for (int k = 0; k < 40; ++k) {
    gt.annotations.push_back(
        make_ann(std::to_string(rng.integer(0, 7)), rng.grid_box(64, 64), rng.integer(1, 3)));
  }
  auto ds = preds_for(gt);
  for (int k = 0; k < 80; ++k) {
    ds.detections.push_back(make_det(std::to_string(rng.integer(0, 7)), rng.uniform(0, 1),
                                     rng.grid_box(64, 64), rng.integer(1, 3)));
  }
  const auto one = to_json(coco_summary(ds, gt, IouKind::box, 100, 1));
  const auto many = to_json(coco_summary(ds, gt, IouKind::box, 100, 4));
  EXPECT_EQ(one.dump(), many.dump());
}

std::vector<ClassificationOutput> outputs(const std::vector<std::vector<double>>& probs) {
  std::vector<ClassificationOutput> out;
  for (std::size_t i = 0; i < probs.size(); ++i) out.push_back({std::to_string(i), probs[i]});
  return out;
}

std::vector<ClassLabel> labels(const std::vector<std::size_t>& cls) {
  std::vector<ClassLabel> out;
  for (std::size_t i = 0; i < cls.size(); ++i) out.push_back({std::to_string(i), cls[i]});
  return out;
}

TEST(ClassificationTest, ConfusionExample) {
  // TP = 2, FP = 1, FN = 1, TN = 1 for the bleeding class.
  const auto p = outputs({{0.9, 0.1}, {0.8, 0.2}, {0.7, 0.3}, {0.2, 0.8}, {0.1, 0.9}});
  const auto l = labels({0, 0, 1, 0, 1});
  const auto b = classification_metrics(p, l);
  EXPECT_EQ(to_percent(b.positive.precision, 4), 66.6667);
  EXPECT_EQ(to_percent(b.positive.recall, 4), 66.6667);
  EXPECT_EQ(to_percent(b.positive.f1, 4), 66.6667);
  EXPECT_EQ(to_percent(b.accuracy, 4), 60.0);
  EXPECT_EQ(b.confusion, (std::vector<std::vector<std::size_t>>{{2, 1}, {1, 1}}));
  // Non-bleeding: precision 1/2, recall 1/2.
  EXPECT_NEAR(b.macro.precision, (2.0 / 3.0 + 0.5) / 2.0, 1e-15);
}

TEST(ClassificationTest, DegenerateAndPerfect) {
  const auto all_negative = outputs({{0.1, 0.9}, {0.2, 0.8}, {0.3, 0.7}, {0.4, 0.6}});
  const auto l = labels({0, 0, 1, 1});
  const auto d = classification_metrics(all_negative, l);
  EXPECT_EQ(d.positive.recall, 0.0);
  EXPECT_EQ(d.positive.precision, 0.0);
  EXPECT_EQ(d.positive.f1, 0.0);
  EXPECT_EQ(to_percent(d.accuracy, 4), 50.0);

  const auto perfect = outputs({{0.9, 0.1}, {0.6, 0.4}, {0.3, 0.7}, {0.0, 1.0}});
  const auto p = classification_metrics(perfect, l);
  for (double v : {p.accuracy, p.positive.precision, p.positive.recall, p.positive.f1,
                   p.macro.precision, p.macro.recall, p.macro.f1}) {
    EXPECT_EQ(to_percent(v, 4), 100.0);
  }
}

TEST(ClassificationTest, TiesGoToLowerIndexAndErrors) {
  const auto b = classification_metrics(outputs({{0.5, 0.5}}), labels({0}));
  EXPECT_EQ(b.accuracy, 1.0);
  EXPECT_THROW(classification_metrics(outputs({{0.5, 0.5}}), labels({0, 1})), ValidationError);
  EXPECT_THROW(classification_metrics(outputs({{0.5, 0.5}}), labels({})), ValidationError);
  auto dup = outputs({{0.5, 0.5}});
  dup.push_back(dup[0]);
  EXPECT_THROW(classification_metrics(dup, labels({0})), ValidationError);
}

TEST(ReportTest, TextAndJsonRows) {
  auto gt = frames_gt(1);
  gt.annotations = {make_ann("0", {0, 0, 10, 10})};
  auto ds = preds_for(gt);
  ds.detections = {make_det("0", 0.9, {0, 0, 10, 10})};
  EvalReport r;
  r.detection = coco_summary(ds, gt, IouKind::box);
  r.classification = classification_metrics(outputs({{0.9, 0.1}}), labels({0}));
  const auto j = to_json(r);
  EXPECT_EQ(j["detection"]["mAP@0.5"], 100.0);
  EXPECT_EQ(j["classification"]["accuracy"], 100.0);
  EXPECT_EQ(j["iou_thresholds"].size(), 10u);
  const auto text = to_text(r);
  EXPECT_NE(text.find("mAP@0.5:0.95"), std::string::npos);
  EXPECT_NE(text.find("100.0000"), std::string::npos);
  EXPECT_NE(text.find("maxDets=100"), std::string::npos);
}

TEST(ReportTest, PercentRounding) {
  EXPECT_EQ(to_percent(2.0 / 3.0, 4), 66.6667);
  EXPECT_EQ(to_percent(0.72345, 1), 72.3);
  EXPECT_EQ(to_percent(1.0, 1), 100.0);
}

}  // namespace
}  // namespace stagekit
