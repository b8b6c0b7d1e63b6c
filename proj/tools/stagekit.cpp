// stagekit command-line entry point.
//
// Exit status: 0 success, 1 validation failure, 2 I/O or parse failure,
// 3 internal invariant violation. Log verbosity comes from STAGEKIT_LOG
// (error | warn | info | debug; default warn).

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "stagekit/stagekit.hpp"

namespace fs = std::filesystem;
using namespace stagekit;

namespace {

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("stagekit");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("STAGEKIT_LOG")) {
    const std::string level = env;
    if (level == "error") spdlog::set_level(spdlog::level::err);
    else if (level == "warn") spdlog::set_level(spdlog::level::warn);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
    else if (level == "debug") spdlog::set_level(spdlog::level::debug);
    else spdlog::warn("ignoring unknown STAGEKIT_LOG level '{}'", level);
  }
}

void log_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) spdlog::warn("{}", w);
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string gt;
  std::string pred;
  bool mask = false;
  std::optional<std::string> cls_labels;
  std::optional<std::string> cls_pred;
  std::string out = ".";
  std::size_t max_dets = kDefaultMaxDets;
  std::size_t threads = 0;
};

int cmd_evaluate(const EvaluateArgs& a) {
  if (a.cls_labels.has_value() != a.cls_pred.has_value()) {
    throw ValidationError("--cls-labels and --cls-pred must be given together");
  }
  auto gt = load_ground_truth(a.gt);
  auto pred = load_detection_set(a.pred);
  log_warnings(gt.warnings);
  log_warnings(pred.warnings);

  EvalReport report;
  report.max_dets = a.max_dets;
  report.detection = coco_summary(pred.value, gt.value, IouKind::box, a.max_dets, a.threads);
  if (a.mask) {
    report.segmentation = coco_summary(pred.value, gt.value, IouKind::mask, a.max_dets, a.threads);
  }
  if (a.cls_labels) {
    const auto outputs = load_classification(*a.cls_pred);
    const auto labels = load_labels(*a.cls_labels);
    report.classification = classification_metrics(outputs, labels);
  }
  const std::string text = to_text(report);
  commit_files(a.out, {{"report.json", dump(to_json(report))}, {"report.txt", text}});
  std::cout << text;
  spdlog::info("report written to {}", (fs::path(a.out) / "report.json").string());
  return 0;
}

// ---------------------------------------------------------------------------

struct EnsembleArgs {
  std::vector<std::string> inputs;
  std::string out;
  std::string strategy = "affirmative";
  double cluster_iou = 0.5;
  std::string merge = "nms";
  double nms_iou = 0.5;
  std::size_t threads = 0;
};

int cmd_ensemble(const EnsembleArgs& a) {
  EnsembleConfig cfg;
  cfg.strategy = parse_strategy(a.strategy);
  cfg.merge_mode = parse_merge_mode(a.merge);
  cfg.cluster_iou = a.cluster_iou;
  cfg.nms_iou = a.nms_iou;
  cfg.check();

  std::vector<DetectionSet> sets;
  for (const auto& path : a.inputs) {
    auto loaded = load_detection_set(path);
    log_warnings(loaded.warnings);
    sets.push_back(std::move(loaded.value));
  }
  const auto fused = ensemble(sets, cfg, a.threads);
  write_file_atomic(a.out, dump(to_json(fused)));
  spdlog::info("{} detections from {} sources written to {}", fused.detections.size(),
               sets.size(), a.out);
  return 0;
}

// ---------------------------------------------------------------------------

struct SwaArgs {
  std::vector<std::string> inputs;
  std::string out;
  std::size_t threads = 0;
};

int cmd_swa(const SwaArgs& a) {
  std::vector<TensorArchive> archives;
  std::vector<std::string> raw;
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& path : a.inputs) {
    raw.push_back(read_file(path));
    archives.push_back(decode_archive(raw.back(), path));
    inputs.push_back({{"path", path}, {"sha256", sha256_hex(raw.back())}});
  }
  // A single checkpoint is its own average; copy it verbatim.
  const std::string bytes =
      archives.size() == 1 ? raw.front() : encode_archive(average_archives(archives, a.threads));
  const nlohmann::json meta = {{"tool", "stagekit"},
                               {"version", kVersion},
                               {"operation", "uniform weight average"},
                               {"inputs", inputs},
                               {"tensors", archives.front().entries.size()},
                               {"output_sha256", sha256_hex(bytes)}};
  write_file_atomic(a.out, bytes);
  write_file_atomic(a.out + ".manifest.json", dump(meta));
  spdlog::info("averaged {} archives into {}", archives.size(), a.out);
  return 0;
}

// ---------------------------------------------------------------------------

struct PipelineArgs {
  std::string config;
  std::string out_dir = "stagekit_out";
  bool dry_run = false;
  std::size_t threads = 0;
};

int cmd_pipeline(const PipelineArgs& a) {
  const auto cfg = parse_config(a.config);
  const auto result = run_pipeline(cfg, a.threads);
  log_warnings(result.warnings);
  const auto files = pipeline_outputs(result);
  if (a.dry_run) {
    for (const auto& [name, bytes] : files) {
      spdlog::info("dry run: would write {} ({} bytes)", name, bytes.size());
    }
    std::cout << "dry run ok: " << result.detections.detections.size() << " detections, "
              << result.manifest["counts"]["gated_in"].get<std::size_t>() << " of "
              << result.gates.size() << " images gated in\n";
    return 0;
  }
  commit_files(a.out_dir, files);
  if (result.report) std::cout << to_text(*result.report);
  spdlog::info("pipeline outputs written to {}", a.out_dir);
  return 0;
}

// ---------------------------------------------------------------------------

struct ValidateArgs {
  std::string file;
  std::string kind = "predictions";
};

int cmd_validate(const ValidateArgs& a) {
  const auto root = load_json(a.file);
  ValidationReport report;
  std::vector<std::string> warnings;
  if (a.kind == "predictions") {
    auto ds = decode_detection_set(root, a.file);
    warnings = clip_boxes(ds, a.file);
    report = validate(ds);
  } else if (a.kind == "gt") {
    auto gt = decode_ground_truth(root, a.file);
    warnings = clip_boxes(gt, a.file);
    report = validate(gt);
  } else if (a.kind == "classification") {
    report = validate(decode_classification(root, a.file));
  } else {
    throw ValidationError("unknown --kind '" + a.kind + "'");
  }
  log_warnings(warnings);
  nlohmann::json j = {{"file", a.file}, {"ok", report.ok()}, {"violations", nlohmann::json::array()}};
  for (const auto& v : report.violations) {
    j["violations"].push_back({{"where", v.where}, {"what", v.what}});
  }
  std::cout << dump(j);
  return report.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();

  CLI::App app{"stagekit: two-stage detection pipeline toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Detection/segmentation AP/AR and classification metrics");
  evaluate->add_option("--gt", ev.gt, "Ground-truth file")->required();
  evaluate->add_option("--pred", ev.pred, "Prediction file")->required();
  evaluate->add_flag("--mask", ev.mask, "Also evaluate segmentation masks");
  evaluate->add_option("--cls-labels", ev.cls_labels, "Classification label file");
  evaluate->add_option("--cls-pred", ev.cls_pred, "Classification prediction file");
  evaluate->add_option("--out", ev.out, "Output directory for report.json and report.txt")
      ->capture_default_str();
  evaluate->add_option("--max-dets", ev.max_dets, "Detections per image considered")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  evaluate->add_option("--threads", ev.threads, "Worker threads (0 = all cores)")->capture_default_str();

  EnsembleArgs en;
  auto* ens = app.add_subcommand("ensemble", "Fuse prediction files from several models");
  ens->add_option("inputs", en.inputs, "Prediction files, one per source model")->required();
  ens->add_option("--out", en.out, "Output prediction file")->required();
  ens->add_option("--strategy", en.strategy, "affirmative | consensus | unanimous")->capture_default_str();
  ens->add_option("--cluster-iou", en.cluster_iou, "IoU to join a cluster seed, in (0, 1]")
      ->capture_default_str();
  ens->add_option("--merge", en.merge, "nms | weighted_average | max_score")->capture_default_str();
  ens->add_option("--nms-iou", en.nms_iou, "IoU for merge=nms, in (0, 1]")->capture_default_str();
  ens->add_option("--threads", en.threads, "Worker threads (0 = all cores)")->capture_default_str();

  SwaArgs sw;
  auto* swa = app.add_subcommand("swa-average", "Average checkpoint archives (SWA)");
  swa->add_option("inputs", sw.inputs, "SWA1 archives")->required();
  swa->add_option("--out", sw.out, "Output archive")->required();
  swa->add_option("--threads", sw.threads, "Worker threads (0 = all cores)")->capture_default_str();

  PipelineArgs pl;
  auto* pipe = app.add_subcommand("pipeline", "Run the two-stage pipeline from a config file");
  pipe->add_option("--config", pl.config, "Pipeline config file")->required();
  pipe->add_option("--out-dir", pl.out_dir, "Directory for outputs")->capture_default_str();
  pipe->add_flag("--dry-run", pl.dry_run, "Validate and run without writing outputs");
  pipe->add_option("--threads", pl.threads, "Worker threads (0 = all cores)")->capture_default_str();

  ValidateArgs va;
  auto* val = app.add_subcommand("validate", "Check a canonical file and list violations");
  val->add_option("file", va.file, "File to check")->required();
  val->add_option("--kind", va.kind, "predictions | gt | classification")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*evaluate) return cmd_evaluate(ev);
    if (*ens) return cmd_ensemble(en);
    if (*swa) return cmd_swa(sw);
    if (*pipe) return cmd_pipeline(pl);
    if (*val) return cmd_validate(va);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return static_cast<int>(ErrorKind::invariant);
  }
  return static_cast<int>(ErrorKind::invariant);
}
