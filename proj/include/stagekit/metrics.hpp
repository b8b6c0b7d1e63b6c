#pragma once

// Evaluation: greedy one-to-one matching, 101-point interpolated AP, recall
// under a per-image detection budget, COCO-style summaries over IoU
// thresholds 0.50:0.05:0.95, and two-class classification metrics.
//
// Report rows:
//   mAP@0.5:0.95  mean over categories of (mean over thresholds of AP)
//   mAP@0.5       mean over categories of AP at IoU 0.5
//   AP@0.5:0.95   AP of all categories pooled into one ranking, averaged
//                 over thresholds
//   AP@0.5        pooled AP at IoU 0.5
//   AR@0.5:0.95   mean over categories and thresholds of recall
//   AR@0.5        mean over categories of recall at IoU 0.5
// With a single category the mAP and AP rows coincide.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stagekit/core.hpp"
#include "stagekit/error.hpp"
#include "stagekit/io.hpp"
#include "stagekit/tta.hpp"

namespace stagekit {

enum class IouKind { box, mask };

inline std::string_view iou_kind_name(IouKind k) { return k == IouKind::box ? "box" : "mask"; }

inline constexpr std::size_t kNumIouThresholds = 10;
inline constexpr std::size_t kDefaultMaxDets = 100;
inline constexpr std::size_t kRecallPoints = 101;

// 0.50, 0.55, ..., 0.95, each the double nearest the decimal value.
inline std::array<double, kNumIouThresholds> iou_thresholds() {
  std::array<double, kNumIouThresholds> t{};
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(50 + 5 * i) / 100.0;
  return t;
}

struct MatchRecord {
  ImageId image_id;
  int category_id = 0;
  double score = 0.0;
  bool matched = false;
  std::optional<std::size_t> annotation;  // index into GroundTruth::annotations
  std::size_t rank = 0;                   // global detection_precedes rank
};

struct MatchResult {
  double iou_threshold = 0.5;
  IouKind kind = IouKind::box;
  std::vector<MatchRecord> records;  // sorted by rank
  std::size_t total_gt = 0;
};

namespace detail {

inline double pair_iou(IouKind kind, const Detection& d, const Annotation& a) {
  if (kind == IouKind::box) return box_iou(d.box, a.box);
  try {
    return mask_iou(*d.mask, *a.mask);
  } catch (const UndefinedOverlap&) {
    // Empty prediction against empty annotation carries no overlap evidence.
    return 0.0;
  }
}

inline void check_match_inputs(const DetectionSet& preds, const GroundTruth& gt, IouKind kind) {
  const auto frames = frame_index(gt.images);
  for (const auto& d : preds.detections) {
    if (!frames.count(d.image_id)) {
      throw ValidationError("prediction on image " + d.image_id +
                            " which is absent from the ground truth");
    }
  }
  if (kind != IouKind::mask) return;
  std::string missing;
  for (std::size_t i = 0; i < preds.detections.size(); ++i) {
    if (!preds.detections[i].mask) {
      missing += (missing.empty() ? "" : ", ") + std::string("detections[") +
                 std::to_string(i) + "] (image " + preds.detections[i].image_id + ")";
    }
  }
  for (std::size_t i = 0; i < gt.annotations.size(); ++i) {
    if (!gt.annotations[i].mask) {
      missing += (missing.empty() ? "" : ", ") + std::string("annotations[") +
                 std::to_string(i) + "] (image " + gt.annotations[i].image_id + ")";
    }
  }
  if (!missing.empty()) throw ValidationError("mask evaluation requested but masks missing: " + missing);
}

}  // namespace detail

// For every (image, category): predictions in descending score order each
// take the unmatched annotation with the highest IoU >= iou_threshold
// (lowest annotation index on ties). Unmatched predictions are false
// positives.
inline MatchResult match_detections(const DetectionSet& preds, const GroundTruth& gt,
                                    double iou_threshold, IouKind kind, std::size_t threads = 1) {
  detail::check_match_inputs(preds, gt, kind);

  std::vector<std::size_t> order(preds.detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detection_precedes(preds.detections[a], preds.detections[b]);
  });

  using Key = std::pair<ImageId, int>;
  std::map<Key, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> groups;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& d = preds.detections[order[r]];
    groups[{d.image_id, d.category_id}].first.push_back(r);
  }
  for (std::size_t i = 0; i < gt.annotations.size(); ++i) {
    const auto& a = gt.annotations[i];
    groups[{a.image_id, a.category_id}].second.push_back(i);
  }

  MatchResult m;
  m.iou_threshold = iou_threshold;
  m.kind = kind;
  m.total_gt = gt.annotations.size();
  m.records.resize(order.size());

  std::vector<const std::pair<std::vector<std::size_t>, std::vector<std::size_t>>*> work;
  work.reserve(groups.size());
  for (const auto& [key, g] : groups) work.push_back(&g);

  parallel_for(work.size(), threads, [&](std::size_t w) {
    const auto& [ranks, anns] = *work[w];
    std::vector<bool> taken(anns.size(), false);
    for (const std::size_t r : ranks) {
      const auto& d = preds.detections[order[r]];
      MatchRecord rec{d.image_id, d.category_id, d.score, false, std::nullopt, r};
      double best = iou_threshold;
      std::optional<std::size_t> best_j;
      for (std::size_t j = 0; j < anns.size(); ++j) {
        if (taken[j]) continue;
        const double iou = detail::pair_iou(kind, d, gt.annotations[anns[j]]);
        if (iou >= best && (!best_j || iou > best)) {
          best = iou;
          best_j = j;
        }
      }
      if (best_j) {
        taken[*best_j] = true;
        rec.matched = true;
        rec.annotation = anns[*best_j];
      }
      m.records[r] = std::move(rec);
    }
  });
  return m;
}

// Keeps at most max_dets highest-ranked records per image.
inline MatchResult truncate_per_image(const MatchResult& m, std::size_t max_dets) {
  MatchResult out = m;
  out.records.clear();
  std::map<ImageId, std::size_t> seen;
  for (const auto& r : m.records) {
    if (seen[r.image_id]++ < max_dets) out.records.push_back(r);
  }
  return out;
}

// Records and ground-truth count restricted to one category.
inline MatchResult restrict_to_category(const MatchResult& m, const GroundTruth& gt, int category) {
  MatchResult out;
  out.iou_threshold = m.iou_threshold;
  out.kind = m.kind;
  for (const auto& r : m.records) {
    if (r.category_id == category) out.records.push_back(r);
  }
  out.total_gt = static_cast<std::size_t>(
      std::count_if(gt.annotations.begin(), gt.annotations.end(),
                    [&](const Annotation& a) { return a.category_id == category; }));
  return out;
}

// 101-point interpolated AP; nullopt when there is no ground truth.
inline std::optional<double> average_precision(const MatchResult& m) {
  if (m.total_gt == 0) return std::nullopt;
  const std::size_t n = m.records.size();
  if (n == 0) return 0.0;

  std::vector<std::size_t> tp(n);
  std::vector<double> precision(n);
  std::size_t cum_tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (m.records[i].matched) ++cum_tp;
    tp[i] = cum_tp;
    precision[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
  }
  for (std::size_t i = n - 1; i > 0; --i) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  // Recall threshold r_k = k/100 is reached at the first i with
  // tp[i] / total_gt >= k / 100, compared exactly in integers.
  double sum = 0.0;
  std::size_t i = 0;
  for (std::size_t k = 0; k < kRecallPoints; ++k) {
    while (i < n && tp[i] * 100 < k * m.total_gt) ++i;
    if (i == n) break;
    sum += precision[i];
  }
  return sum / static_cast<double>(kRecallPoints);
}

// Recall with at most max_dets detections per image; nullopt without ground
// truth.
inline std::optional<double> average_recall(const MatchResult& m,
                                            std::size_t max_dets = kDefaultMaxDets) {
  if (m.total_gt == 0) return std::nullopt;
  const auto t = truncate_per_image(m, max_dets);
  const auto hits = std::count_if(t.records.begin(), t.records.end(),
                                  [](const MatchRecord& r) { return r.matched; });
  return static_cast<double>(hits) / static_cast<double>(m.total_gt);
}

// ---------------------------------------------------------------------------
// Summaries

struct CategoryMetrics {
  int category_id = 0;
  std::array<double, kNumIouThresholds> ap{};
  std::array<double, kNumIouThresholds> recall{};
};

// Values are fractions in [0, 1]; reports scale them to percentages.
struct MetricBlock {
  IouKind kind = IouKind::box;
  std::size_t max_dets = kDefaultMaxDets;
  std::vector<CategoryMetrics> categories;         // categories present in the ground truth
  std::array<double, kNumIouThresholds> pooled_ap{};

  double map_50_95 = 0.0;
  double map_50 = 0.0;
  double ap_50_95 = 0.0;
  double ap_50 = 0.0;
  double ar_50_95 = 0.0;
  double ar_50 = 0.0;
};

inline MetricBlock coco_summary(const DetectionSet& preds, const GroundTruth& gt, IouKind kind,
                                std::size_t max_dets = kDefaultMaxDets, std::size_t threads = 1) {
  if (gt.annotations.empty()) {
    throw ValidationError("coco_summary: ground truth has no annotations");
  }
  std::set<int> cats;
  for (const auto& a : gt.annotations) cats.insert(a.category_id);

  MetricBlock block;
  block.kind = kind;
  block.max_dets = max_dets;
  for (int c : cats) block.categories.push_back({c, {}, {}});

  const auto thresholds = iou_thresholds();
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    const auto m = truncate_per_image(match_detections(preds, gt, thresholds[t], kind, threads),
                                      max_dets);
    block.pooled_ap[t] = *average_precision(m);
    for (auto& cm : block.categories) {
      const auto mc = restrict_to_category(m, gt, cm.category_id);
      cm.ap[t] = *average_precision(mc);
      cm.recall[t] = *average_recall(mc, max_dets);
    }
  }

  const double nc = static_cast<double>(block.categories.size());
  const double nt = static_cast<double>(thresholds.size());
  for (const auto& cm : block.categories) {
    block.map_50_95 += std::accumulate(cm.ap.begin(), cm.ap.end(), 0.0) / nt / nc;
    block.map_50 += cm.ap[0] / nc;
    block.ar_50_95 += std::accumulate(cm.recall.begin(), cm.recall.end(), 0.0) / nt / nc;
    block.ar_50 += cm.recall[0] / nc;
  }
  block.ap_50_95 = std::accumulate(block.pooled_ap.begin(), block.pooled_ap.end(), 0.0) / nt;
  block.ap_50 = block.pooled_ap[0];
  return block;
}

// ---------------------------------------------------------------------------
// Classification

struct PrfTriple {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClassificationBlock {
  std::size_t images = 0;
  double accuracy = 0.0;
  PrfTriple positive;  // bleeding class
  PrfTriple macro;     // unweighted mean over classes seen in labels or predictions
  std::vector<std::vector<std::size_t>> confusion;  // [label][predicted]
};

namespace detail {

// 0/0 resolves to 0.
inline PrfTriple prf(std::size_t tp, std::size_t fp, std::size_t fn) {
  PrfTriple r;
  r.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  r.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

}  // namespace detail

// Hard decision is argmax with ties to the lower class index. Predictions for
// unlabeled images are ignored.
inline ClassificationBlock classification_metrics(std::span<const ClassificationOutput> preds,
                                                  std::span<const ClassLabel> labels) {
  std::map<ImageId, const ClassificationOutput*> by_image;
  std::size_t arity = 0;
  for (const auto& p : preds) {
    if (!by_image.emplace(p.image_id, &p).second) {
      throw ValidationError("duplicate classification prediction for image " + p.image_id);
    }
    arity = std::max(arity, p.probs.size());
  }
  std::set<ImageId> labeled;
  for (const auto& l : labels) {
    if (!labeled.insert(l.image_id).second) {
      throw ValidationError("duplicate label for image " + l.image_id);
    }
    if (!by_image.count(l.image_id)) {
      throw ValidationError("missing classification prediction for image " + l.image_id);
    }
    arity = std::max(arity, l.label + 1);
  }
  if (labels.empty()) throw ValidationError("classification_metrics: no labels");

  ClassificationBlock b;
  b.images = labels.size();
  b.confusion.assign(arity, std::vector<std::size_t>(arity, 0));
  std::size_t correct = 0;
  for (const auto& l : labels) {
    const auto& probs = by_image.at(l.image_id)->probs;
    const std::size_t pred = argmax(probs);
    ++b.confusion[l.label][pred];
    if (pred == l.label) ++correct;
  }
  b.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());

  auto class_prf = [&](std::size_t k) {
    std::size_t tp = b.confusion[k][k], fp = 0, fn = 0;
    for (std::size_t j = 0; j < arity; ++j) {
      if (j == k) continue;
      fp += b.confusion[j][k];
      fn += b.confusion[k][j];
    }
    return detail::prf(tp, fp, fn);
  };
  b.positive = class_prf(kBleedingClass);

  std::size_t seen = 0;
  for (std::size_t k = 0; k < arity; ++k) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < arity; ++j) {
      row += b.confusion[k][j];
      col += b.confusion[j][k];
    }
    if (row + col == 0) continue;
    const auto t = class_prf(k);
    b.macro.precision += t.precision;
    b.macro.recall += t.recall;
    b.macro.f1 += t.f1;
    ++seen;
  }
  if (seen) {
    b.macro.precision /= static_cast<double>(seen);
    b.macro.recall /= static_cast<double>(seen);
    b.macro.f1 /= static_cast<double>(seen);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::size_t max_dets = kDefaultMaxDets;
  std::optional<MetricBlock> detection;
  std::optional<MetricBlock> segmentation;
  std::optional<ClassificationBlock> classification;
  std::vector<std::string> notes;
};

// Fraction -> percentage rounded to `decimals` places.
inline double to_percent(double fraction, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(fraction * 100.0 * scale) / scale;
}

inline constexpr std::array<std::string_view, 6> kGroundingRows = {
    "mAP@0.5:0.95", "mAP@0.5", "AP@0.5:0.95", "AP@0.5", "AR@0.5:0.95", "AR@0.5"};

inline std::array<double, 6> grounding_row_values(const MetricBlock& b) {
  return {b.map_50_95, b.map_50, b.ap_50_95, b.ap_50, b.ar_50_95, b.ar_50};
}

inline nlohmann::json to_json(const MetricBlock& b) {
  nlohmann::json j = nlohmann::json::object();
  const auto values = grounding_row_values(b);
  for (std::size_t i = 0; i < kGroundingRows.size(); ++i) {
    j[std::string(kGroundingRows[i])] = to_percent(values[i], 1);
  }
  nlohmann::json per_cat = nlohmann::json::array();
  for (const auto& c : b.categories) {
    nlohmann::json ap = nlohmann::json::array();
    nlohmann::json rc = nlohmann::json::array();
    for (double v : c.ap) ap.push_back(v * 100.0);
    for (double v : c.recall) rc.push_back(v * 100.0);
    per_cat.push_back({{"category_id", c.category_id}, {"ap", ap}, {"recall", rc}});
  }
  nlohmann::json pooled = nlohmann::json::array();
  for (double v : b.pooled_ap) pooled.push_back(v * 100.0);
  j["iou_kind"] = iou_kind_name(b.kind);
  j["per_category"] = std::move(per_cat);
  j["pooled_ap_per_threshold"] = std::move(pooled);
  return j;
}

inline nlohmann::json to_json(const ClassificationBlock& b) {
  auto triple = [](const PrfTriple& t) {
    return nlohmann::json{{"precision", to_percent(t.precision, 4)},
                          {"recall", to_percent(t.recall, 4)},
                          {"f1", to_percent(t.f1, 4)}};
  };
  return {{"images", b.images},
          {"accuracy", to_percent(b.accuracy, 4)},
          {"positive_class", triple(b.positive)},
          {"macro", triple(b.macro)},
          {"confusion", b.confusion}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = nlohmann::json::object();
  j["max_dets"] = r.max_dets;
  nlohmann::json th = nlohmann::json::array();
  for (double t : iou_thresholds()) th.push_back(t);
  j["iou_thresholds"] = std::move(th);
  if (r.classification) j["classification"] = to_json(*r.classification);
  if (r.detection) j["detection"] = to_json(*r.detection);
  if (r.segmentation) j["segmentation"] = to_json(*r.segmentation);
  j["notes"] = r.notes;
  return j;
}

inline std::string to_text(const EvalReport& r) {
  std::string out;
  char line[160];
  if (r.classification) {
    const auto& c = *r.classification;
    out += "Classification (" + std::to_string(c.images) + " images)\n";
    std::snprintf(line, sizeof line, "  %-12s %14s %14s\n", "", "positive", "macro");
    out += line;
    std::snprintf(line, sizeof line, "  %-12s %14.4f %14.4f\n", "Accuracy",
                  to_percent(c.accuracy, 4), to_percent(c.accuracy, 4));
    out += line;
    const std::pair<const char*, std::pair<double, double>> rows[] = {
        {"Precision", {c.positive.precision, c.macro.precision}},
        {"Recall", {c.positive.recall, c.macro.recall}},
        {"F1-score", {c.positive.f1, c.macro.f1}}};
    for (const auto& [name, v] : rows) {
      std::snprintf(line, sizeof line, "  %-12s %14.4f %14.4f\n", name, to_percent(v.first, 4),
                    to_percent(v.second, 4));
      out += line;
    }
  }
  if (r.detection || r.segmentation) {
    if (!out.empty()) out += "\n";
    out += "Grounding (maxDets=" + std::to_string(r.max_dets) + ")\n";
    std::snprintf(line, sizeof line, "  %-14s %12s %12s\n", "", r.detection ? "detection" : "",
                  r.segmentation ? "segmentation" : "");
    out += line;
    const auto det = r.detection ? grounding_row_values(*r.detection) : std::array<double, 6>{};
    const auto seg = r.segmentation ? grounding_row_values(*r.segmentation) : std::array<double, 6>{};
    for (std::size_t i = 0; i < kGroundingRows.size(); ++i) {
      char dcol[32] = "";
      char scol[32] = "";
      if (r.detection) std::snprintf(dcol, sizeof dcol, "%.1f", to_percent(det[i], 1));
      if (r.segmentation) std::snprintf(scol, sizeof scol, "%.1f", to_percent(seg[i], 1));
      std::snprintf(line, sizeof line, "  %-14s %12s %12s\n",
                    std::string(kGroundingRows[i]).c_str(), dcol, scol);
      out += line;
    }
  }
  for (const auto& n : r.notes) out += "note: " + n + "\n";
  return out;
}

}  // namespace stagekit
