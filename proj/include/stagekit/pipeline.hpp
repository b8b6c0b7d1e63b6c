#pragma once

// Two-stage orchestration: classification views are aggregated per image and
// gated; only gated-in images proceed to grounding, where each source model's
// views are pooled back to the original frame and the sources are ensembled.
// Evaluation, when configured, runs over all images, so ground truth on
// gated-out images counts as missed.
//
// Config file (JSON, unknown keys rejected, paths relative to the file):
//   {
//     "images": "frames.json",                      // file with an "images" list
//     "classification": {
//       "views": [{"transform": "identity", "file": "cls.json"},
//                 {"transform": "scale", "scale": 0.5, "file": "cls_s05.json"}],
//       "aggregation": "mean" | "majority_vote",      // default mean
//       "gate": {"rule": "argmax"} | {"rule": "threshold", "threshold": 0.5}
//     },
//     "grounding": {
//       "sources": [{"id": "convnext",
//                    "views": [{"transform": "hflip", "file": "cx_hflip.json"}]}]
//     },
//     "ensemble": {"strategy": "affirmative", "cluster_iou": 0.5,
//                  "merge": "nms", "nms_iou": 0.5},   // optional
//     "evaluation": {"gt": "gt.json", "mask": false,
//                    "cls_labels": "labels.json", "max_dets": 100}  // optional
//   }

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stagekit/core.hpp"
#include "stagekit/digest.hpp"
#include "stagekit/ensemble.hpp"
#include "stagekit/error.hpp"
#include "stagekit/io.hpp"
#include "stagekit/metrics.hpp"
#include "stagekit/tta.hpp"

namespace stagekit {

inline constexpr std::string_view kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Gating

struct GateRule {
  enum class Kind { argmax, threshold };
  Kind kind = Kind::argmax;
  double threshold = 0.5;

  static GateRule argmax_rule() { return {}; }
  static GateRule at_threshold(double t) {
    if (!(t > 0.0 && t < 1.0)) {
      throw ValidationError("gate threshold must lie in (0, 1), got " + std::to_string(t));
    }
    return {Kind::threshold, t};
  }

  std::string describe() const {
    if (kind == Kind::argmax) return "argmax (ties -> non-bleeding)";
    return "threshold: bleeding iff p(bleeding) >= " + std::to_string(threshold);
  }
};

struct GateDecision {
  ImageId image_id;
  bool bleeding = false;
  std::vector<double> aggregated_probs;
};

inline bool gate_admits(const std::vector<double>& probs, const GateRule& rule) {
  if (probs.size() <= kBleedingClass) return false;
  const double p = probs[kBleedingClass];
  if (rule.kind == GateRule::Kind::threshold) return p >= rule.threshold;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    if (k != kBleedingClass && !(p > probs[k])) return false;
  }
  return true;
}

inline std::vector<GateDecision> gate(std::span<const ClassificationOutput> aggregated,
                                      const GateRule& rule) {
  std::vector<GateDecision> out;
  out.reserve(aggregated.size());
  for (const auto& o : aggregated) {
    out.push_back({o.image_id, gate_admits(o.probs, rule), o.probs});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

struct ViewInput {
  ViewTransform transform;
  std::string file;  // as written in the config
};

struct GroundingSource {
  std::string id;
  std::vector<ViewInput> views;
};

struct EvaluationConfig {
  std::string gt;
  bool mask = false;
  std::optional<std::string> cls_labels;
  std::size_t max_dets = kDefaultMaxDets;
};

struct PipelineConfig {
  std::filesystem::path base_dir;
  std::string images_file;
  std::vector<ViewInput> classification_inputs;
  TtaAggregation tta_aggregation = TtaAggregation::mean;
  GateRule gate_rule;
  std::vector<GroundingSource> grounding_inputs;
  EnsembleConfig ensemble;
  std::optional<EvaluationConfig> evaluation;
  std::string config_sha256;

  std::filesystem::path resolve(const std::string& file) const { return base_dir / file; }
};

namespace detail {

class ConfigReader {
 public:
  std::vector<std::string> problems;

  // Reports keys of `obj` outside `allowed`.
  void only_keys(const nlohmann::json& obj, const std::string& where,
                 std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) return;
    for (const auto& [key, value] : obj.items()) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
        problems.push_back("unknown key '" + join(where, key) + "'");
      }
    }
  }

  const nlohmann::json* object(const nlohmann::json& parent, const std::string& where,
                               const char* key, bool required) {
    const auto it = parent.find(key);
    if (it == parent.end()) {
      if (required) problems.push_back("missing required section '" + join(where, key) + "'");
      return nullptr;
    }
    if (!it->is_object()) {
      problems.push_back("'" + join(where, key) + "' must be an object");
      return nullptr;
    }
    return &*it;
  }

  const nlohmann::json* list(const nlohmann::json& parent, const std::string& where,
                             const char* key) {
    const auto it = parent.find(key);
    if (it == parent.end()) {
      problems.push_back("missing required key '" + join(where, key) + "'");
      return nullptr;
    }
    if (!it->is_array() || it->empty()) {
      problems.push_back("'" + join(where, key) + "' must be a non-empty list");
      return nullptr;
    }
    return &*it;
  }

  std::optional<std::string> string(const nlohmann::json& parent, const std::string& where,
                                    const char* key, bool required) {
    const auto it = parent.find(key);
    if (it == parent.end()) {
      if (required) problems.push_back("missing required key '" + join(where, key) + "'");
      return std::nullopt;
    }
    if (!it->is_string()) {
      problems.push_back("'" + join(where, key) + "' must be a string");
      return std::nullopt;
    }
    return it->get<std::string>();
  }

  std::optional<double> number(const nlohmann::json& parent, const std::string& where,
                               const char* key) {
    const auto it = parent.find(key);
    if (it == parent.end()) return std::nullopt;
    if (!it->is_number()) {
      problems.push_back("'" + join(where, key) + "' must be a number");
      return std::nullopt;
    }
    return it->get<double>();
  }

  template <class Fn>
  void attempt(Fn&& fn) {
    try {
      fn();
    } catch (const ValidationError& e) {
      problems.push_back(e.what());
    }
  }

  static std::string join(const std::string& where, std::string_view key) {
    return where.empty() ? std::string(key) : where + "." + std::string(key);
  }
};

inline std::vector<ViewInput> read_views(ConfigReader& rd, const nlohmann::json& parent,
                                         const std::string& where) {
  std::vector<ViewInput> views;
  const auto* arr = rd.list(parent, where, "views");
  if (!arr) return views;
  for (std::size_t i = 0; i < arr->size(); ++i) {
    const std::string vw = where + ".views[" + std::to_string(i) + "]";
    const auto& v = (*arr)[i];
    if (!v.is_object()) {
      rd.problems.push_back("'" + vw + "' must be an object");
      continue;
    }
    rd.only_keys(v, vw, {"transform", "scale", "file"});
    ViewInput in;
    const auto kind = rd.string(v, vw, "transform", true);
    const auto file = rd.string(v, vw, "file", true);
    const auto scale = rd.number(v, vw, "scale");
    if (kind) {
      rd.attempt([&] {
        const auto k = parse_kind(*kind);
        if (k == TransformKind::scale) {
          if (!scale) throw ValidationError("'" + vw + ".scale' is required for scale views");
          in.transform = ViewTransform::scale(*scale);
        } else {
          if (scale) throw ValidationError("'" + vw + ".scale' only applies to scale views");
          in.transform = {k, 1.0};
        }
      });
    }
    if (file) in.file = *file;
    views.push_back(std::move(in));
  }
  return views;
}

}  // namespace detail

// Builds a config from parsed JSON. Every problem found is reported in one
// ValidationError.
inline PipelineConfig config_from_json(const nlohmann::json& root,
                                       const std::filesystem::path& base_dir) {
  detail::ConfigReader rd;
  PipelineConfig cfg;
  cfg.base_dir = base_dir;
  if (!root.is_object()) throw ValidationError("config: top level must be an object");
  rd.only_keys(root, "", {"images", "classification", "grounding", "ensemble", "evaluation"});

  if (auto images = rd.string(root, "", "images", true)) cfg.images_file = *images;

  if (const auto* cls = rd.object(root, "", "classification", true)) {
    rd.only_keys(*cls, "classification", {"views", "aggregation", "gate"});
    cfg.classification_inputs = detail::read_views(rd, *cls, "classification");
    if (auto agg = rd.string(*cls, "classification", "aggregation", false)) {
      rd.attempt([&] { cfg.tta_aggregation = parse_aggregation(*agg); });
    }
    if (const auto* g = rd.object(*cls, "classification", "gate", false)) {
      rd.only_keys(*g, "classification.gate", {"rule", "threshold"});
      const auto rule = rd.string(*g, "classification.gate", "rule", true);
      const auto t = rd.number(*g, "classification.gate", "threshold");
      if (rule && *rule == "argmax") {
        if (t) rd.problems.push_back("'classification.gate.threshold' requires rule 'threshold'");
      } else if (rule && *rule == "threshold") {
        if (!t) {
          rd.problems.push_back("missing required key 'classification.gate.threshold'");
        } else {
          rd.attempt([&] { cfg.gate_rule = GateRule::at_threshold(*t); });
        }
      } else if (rule) {
        rd.problems.push_back("unknown gate rule '" + *rule + "'");
      }
    }
  }

  if (const auto* gr = rd.object(root, "", "grounding", true)) {
    rd.only_keys(*gr, "grounding", {"sources"});
    if (const auto* sources = rd.list(*gr, "grounding", "sources")) {
      std::set<std::string> ids;
      for (std::size_t i = 0; i < sources->size(); ++i) {
        const std::string sw = "grounding.sources[" + std::to_string(i) + "]";
        const auto& s = (*sources)[i];
        if (!s.is_object()) {
          rd.problems.push_back("'" + sw + "' must be an object");
          continue;
        }
        rd.only_keys(s, sw, {"id", "views"});
        GroundingSource src;
        if (auto id = rd.string(s, sw, "id", true)) {
          src.id = *id;
          if (!ids.insert(*id).second) rd.problems.push_back("duplicate source id '" + *id + "'");
        }
        src.views = detail::read_views(rd, s, sw);
        cfg.grounding_inputs.push_back(std::move(src));
      }
    }
  }

  if (const auto* en = rd.object(root, "", "ensemble", false)) {
    rd.only_keys(*en, "ensemble", {"strategy", "cluster_iou", "merge", "nms_iou"});
    if (auto s = rd.string(*en, "ensemble", "strategy", false)) {
      rd.attempt([&] { cfg.ensemble.strategy = parse_strategy(*s); });
    }
    if (auto m = rd.string(*en, "ensemble", "merge", false)) {
      rd.attempt([&] { cfg.ensemble.merge_mode = parse_merge_mode(*m); });
    }
    if (auto c = rd.number(*en, "ensemble", "cluster_iou")) cfg.ensemble.cluster_iou = *c;
    if (auto n = rd.number(*en, "ensemble", "nms_iou")) cfg.ensemble.nms_iou = *n;
    rd.attempt([&] { cfg.ensemble.check(); });
  }

  if (const auto* ev = rd.object(root, "", "evaluation", false)) {
    rd.only_keys(*ev, "evaluation", {"gt", "mask", "cls_labels", "max_dets"});
    EvaluationConfig e;
    if (auto gt = rd.string(*ev, "evaluation", "gt", true)) e.gt = *gt;
    if (const auto it = ev->find("mask"); it != ev->end()) {
      if (!it->is_boolean()) {
        rd.problems.push_back("'evaluation.mask' must be a boolean");
      } else {
        e.mask = it->get<bool>();
      }
    }
    e.cls_labels = rd.string(*ev, "evaluation", "cls_labels", false);
    if (auto md = rd.number(*ev, "evaluation", "max_dets")) {
      if (!(*md >= 1.0) || std::floor(*md) != *md) {
        rd.problems.push_back("'evaluation.max_dets' must be a positive integer");
      } else {
        e.max_dets = static_cast<std::size_t>(*md);
      }
    }
    cfg.evaluation = std::move(e);
  }

  if (!rd.problems.empty()) {
    std::string msg = "config: ";
    for (std::size_t i = 0; i < rd.problems.size(); ++i) {
      if (i) msg += "; ";
      msg += rd.problems[i];
    }
    throw ValidationError(msg);
  }
  return cfg;
}

inline PipelineConfig parse_config(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  auto cfg = config_from_json(parse_json(text, path.string()), path.parent_path());
  cfg.config_sha256 = sha256_hex(text);
  return cfg;
}

// ---------------------------------------------------------------------------
// Run

struct PipelineResult {
  DetectionSet detections;
  std::vector<GateDecision> gates;
  std::optional<EvalReport> report;
  nlohmann::json manifest;
  std::vector<std::string> warnings;
};

inline const std::vector<std::string>& tie_break_rules() {
  static const std::vector<std::string> rules = {
      "detection order: score descending, then (x1, y1, x2, y2) ascending, then category, "
      "image id, source id",
      "nms: a detection is suppressed when IoU with a kept detection >= threshold",
      "clustering: a detection joins the first cluster whose seed has IoU >= cluster_iou",
      "mask merge: pixelwise majority, ties -> foreground",
      "gate argmax: ties -> non-bleeding",
      "tta majority_vote: ties -> lower class index",
      "classification metrics argmax: ties -> lower class index",
      "matching: highest IoU wins, ties -> lower annotation index",
      "evaluation: ground truth on gated-out images counts as missed",
  };
  return rules;
}

namespace detail {

struct FileLog {
  nlohmann::json entries = nlohmann::json::array();

  std::string read(const PipelineConfig& cfg, const std::string& role, const std::string& file) {
    const auto path = cfg.resolve(file);
    std::string bytes = read_file(path);
    entries.push_back({{"role", role}, {"path", file}, {"sha256", sha256_hex(bytes)}});
    return bytes;
  }
};

inline nlohmann::json gates_to_json(const std::vector<GateDecision>& gates) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& g : gates) {
    arr.push_back({{"image_id", image_id_to_json(g.image_id)},
                   {"bleeding", g.bleeding},
                   {"probs", g.aggregated_probs}});
  }
  return {{"gates", std::move(arr)}};
}

}  // namespace detail

inline nlohmann::json to_json(const std::vector<GateDecision>& gates) {
  return detail::gates_to_json(gates);
}

inline PipelineResult run_pipeline(const PipelineConfig& cfg, std::size_t threads = 1) {
  if (cfg.classification_inputs.empty()) throw ValidationError("pipeline: no classification inputs");
  if (cfg.grounding_inputs.empty()) throw ValidationError("pipeline: no grounding sources");
  cfg.ensemble.check();

  PipelineResult res;
  detail::FileLog files;

  // Original frames.
  const auto frames_origin = cfg.resolve(cfg.images_file).string();
  auto frames = sorted_images(detail::parse_images(
      parse_json(files.read(cfg, "images", cfg.images_file), frames_origin), frames_origin));
  {
    ValidationReport r;
    detail::check_images(frames, r);
    if (!r.ok()) throw ValidationError(frames_origin + ": " + r.summary());
  }
  const auto frame_map = frame_index(frames);

  // Stage 1: classification TTA and gating.
  std::map<ImageId, std::vector<ClassificationOutput>, ImageIdLess> per_image;
  for (const auto& view : cfg.classification_inputs) {
    const auto origin = cfg.resolve(view.file).string();
    auto outputs = decode_classification(
        parse_json(files.read(cfg, "classification:" + view_name(view.transform), view.file), origin),
        origin);
    if (const auto r = validate(outputs); !r.ok()) throw ValidationError(origin + ": " + r.summary());
    std::set<ImageId> seen;
    for (auto& o : outputs) {
      if (!frame_map.count(o.image_id)) {
        throw ValidationError(origin + ": classification for unknown image " + o.image_id);
      }
      if (!seen.insert(o.image_id).second) {
        throw ValidationError(origin + ": duplicate classification for image " + o.image_id);
      }
      per_image[o.image_id].push_back(std::move(o));
    }
  }
  std::vector<ClassificationOutput> aggregated;
  aggregated.reserve(frames.size());
  for (const auto& im : frames) {
    const auto it = per_image.find(im.id);
    if (it == per_image.end()) {
      throw ValidationError("no classification output for image " + im.id);
    }
    aggregated.push_back(aggregate_classification(it->second, cfg.tta_aggregation));
  }
  res.gates = gate(aggregated, cfg.gate_rule);
  std::set<ImageId> admitted;
  for (const auto& g : res.gates) {
    if (g.bleeding) admitted.insert(g.image_id);
  }

  // Stage 2: per-source TTA pooling, then cross-source ensemble.
  std::vector<DetectionSet> pooled;
  pooled.reserve(cfg.grounding_inputs.size());
  for (const auto& src : cfg.grounding_inputs) {
    std::vector<View> views;
    for (const auto& v : src.views) {
      const auto origin = cfg.resolve(v.file).string();
      auto ds = decode_detection_set(
          parse_json(files.read(cfg, "grounding:" + src.id + ":" + view_name(v.transform), v.file),
                     origin),
          origin);
      for (auto& w : clip_boxes(ds, origin)) res.warnings.push_back(std::move(w));
      if (const auto r = validate(ds); !r.ok()) throw ValidationError(origin + ": " + r.summary());
      std::erase_if(ds.detections, [&](const Detection& d) { return !admitted.count(d.image_id); });
      for (auto& d : ds.detections) {
        if (d.source_id.empty()) d.source_id = src.id;
      }
      views.push_back({v.transform, std::move(ds)});
    }
    pooled.push_back(pool_views(views, frames));
  }
  res.detections = ensemble(pooled, cfg.ensemble, threads);
  for (const auto& d : res.detections.detections) {
    if (!admitted.count(d.image_id)) {
      throw InvariantError("detection on gated-out image " + d.image_id);
    }
  }

  // Evaluation over all images.
  if (cfg.evaluation) {
    const auto& ev = *cfg.evaluation;
    EvalReport report;
    report.max_dets = ev.max_dets;
    const auto gt_origin = cfg.resolve(ev.gt).string();
    auto gt = decode_ground_truth(parse_json(files.read(cfg, "ground_truth", ev.gt), gt_origin),
                                  gt_origin);
    for (auto& w : clip_boxes(gt, gt_origin)) res.warnings.push_back(std::move(w));
    if (const auto r = validate(gt); !r.ok()) throw ValidationError(gt_origin + ": " + r.summary());
    report.detection = coco_summary(res.detections, gt, IouKind::box, ev.max_dets, threads);
    if (ev.mask) {
      report.segmentation = coco_summary(res.detections, gt, IouKind::mask, ev.max_dets, threads);
    }
    if (ev.cls_labels) {
      const auto origin = cfg.resolve(*ev.cls_labels).string();
      const auto labels = decode_labels(
          parse_json(files.read(cfg, "classification_labels", *ev.cls_labels), origin), origin);
      report.classification = classification_metrics(aggregated, labels);
    }
    report.notes.push_back("classification TTA aggregates probability vectors (" +
                           std::string(aggregation_name(cfg.tta_aggregation)) + ")");
    report.notes.push_back("ground truth on gated-out images counts as missed");
    res.report = std::move(report);
  }

  std::size_t admitted_count = admitted.size();
  res.manifest = {
      {"tool", "stagekit"},
      {"version", kVersion},
      {"config_sha256", cfg.config_sha256},
      {"files", files.entries},
      {"settings",
       {{"tta_aggregation", aggregation_name(cfg.tta_aggregation)},
        {"gate", cfg.gate_rule.describe()},
        {"ensemble",
         {{"strategy", strategy_name(cfg.ensemble.strategy)},
          {"cluster_iou", cfg.ensemble.cluster_iou},
          {"merge", merge_mode_name(cfg.ensemble.merge_mode)},
          {"nms_iou", cfg.ensemble.nms_iou}}},
        {"max_dets", cfg.evaluation ? cfg.evaluation->max_dets : kDefaultMaxDets}}},
      {"tie_breaks", tie_break_rules()},
      {"counts",
       {{"images", frames.size()},
        {"gated_in", admitted_count},
        {"detections", res.detections.detections.size()}}},
  };
  return res;
}

// Output file name -> contents for a finished run.
inline std::vector<std::pair<std::string, std::string>> pipeline_outputs(const PipelineResult& r) {
  std::vector<std::pair<std::string, std::string>> files = {
      {"predictions.json", dump(to_json(r.detections))},
      {"gates.json", dump(to_json(r.gates))},
  };
  if (r.report) {
    files.emplace_back("report.json", dump(to_json(*r.report)));
    files.emplace_back("report.txt", to_text(*r.report));
  }
  files.emplace_back("manifest.json", dump(r.manifest));
  return files;
}

// Writes every output to a temporary first and renames only once all writes
// succeeded.
inline void commit_files(const std::filesystem::path& dir,
                         const std::vector<std::pair<std::string, std::string>>& files) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
  for (const auto& [name, bytes] : files) {
    if (std::filesystem::is_directory(dir / name, ec)) {
      throw IoError("output target is a directory: " + (dir / name).string());
    }
  }
  std::vector<std::filesystem::path> temps;
  auto cleanup = [&] {
    for (const auto& t : temps) std::filesystem::remove(t, ec);
  };
  for (const auto& [name, bytes] : files) {
    auto tmp = dir / (name + ".tmp");
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    temps.push_back(tmp);
    if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())).flush()) {
      cleanup();
      throw IoError("cannot write " + tmp.string());
    }
  }
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::filesystem::rename(temps[i], dir / files[i].first, ec);
    if (ec) {
      cleanup();
      throw IoError("cannot rename into " + (dir / files[i].first).string());
    }
  }
}

}  // namespace stagekit
