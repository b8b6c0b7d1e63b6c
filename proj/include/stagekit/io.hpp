#pragma once

// Canonical JSON file formats.
//
// Prediction file:
//   {"images": [{"id", "width", "height"}],
//    "detections": [{"image_id", "category_id", "score", "bbox": [x1,y1,x2,y2],
//                    "mask": {"size": [h, w], "runs": [...]} | null,
//                    "source_id"}]}
// Ground-truth file: same, with "annotations" (no score / source_id).
// Classification file: {"predictions": [{"image_id", "probs": [...]}]}
// Label file: {"labels": [{"image_id", "class"}]}
//
// Image ids may be JSON integers or strings. Loaders clip out-of-frame boxes
// (recording a warning) and then run validate(); any violation aborts.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stagekit/core.hpp"
#include "stagekit/error.hpp"
#include "stagekit/tta.hpp"

namespace stagekit {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

// Writes to a sibling temporary and renames over the target, so readers never
// observe a half-written file.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed: " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename into " + path.string());
  }
}

inline json parse_json(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(origin + ": " + e.what());
  }
}

inline json load_json(const std::filesystem::path& path) {
  return parse_json(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Field helpers. Structural problems (wrong type, missing key) are I/O-class
// failures; they mean the bytes are not a file of the expected format.

namespace detail {

inline const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw IoError(where + ": expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw IoError(where + ": missing key '" + key + "'");
  return *it;
}

inline double as_number(const json& v, const std::string& where) {
  if (!v.is_number()) throw IoError(where + ": expected a number");
  return v.get<double>();
}

inline std::int64_t as_integer(const json& v, const std::string& where) {
  if (v.is_number_integer()) return v.get<std::int64_t>();
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (std::floor(d) == d && std::fabs(d) < 9.0e15) return static_cast<std::int64_t>(d);
  }
  throw IoError(where + ": expected an integer");
}

inline ImageId as_image_id(const json& v, const std::string& where) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_float()) {
    return std::to_string(as_integer(v, where));
  }
  throw IoError(where + ": image id must be an integer or string");
}

inline json image_id_to_json(const ImageId& id) {
  const bool canonical_int =
      all_digits(id) && id.size() <= 18 && (id.size() == 1 || id[0] != '0');
  if (canonical_int) return std::stoll(id);
  return id;
}

inline std::vector<ImageMeta> parse_images(const json& root, const std::string& origin) {
  const auto& arr = require(root, "images", origin);
  if (!arr.is_array()) throw IoError(origin + ": 'images' must be a list");
  std::vector<ImageMeta> images;
  images.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = origin + ": images[" + std::to_string(i) + "]";
    const auto& im = arr[i];
    images.push_back({as_image_id(require(im, "id", where), where + ".id"),
                      static_cast<int>(as_integer(require(im, "width", where), where + ".width")),
                      static_cast<int>(as_integer(require(im, "height", where), where + ".height"))});
  }
  return images;
}

inline BoundingBox parse_bbox(const json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 4) {
    throw IoError(where + ": bbox must be a list of 4 numbers");
  }
  // Unchecked here; validate() reports degenerate boxes with context.
  return {as_number(v[0], where), as_number(v[1], where), as_number(v[2], where),
          as_number(v[3], where)};
}

inline std::optional<BinaryMask> parse_mask(const json& obj, const std::string& where) {
  const auto it = obj.find("mask");
  if (it == obj.end() || it->is_null()) return std::nullopt;
  const auto& size = require(*it, "size", where + ".mask");
  if (!size.is_array() || size.size() != 2) {
    throw IoError(where + ".mask.size must be [h, w]");
  }
  BinaryMask m;
  m.height = static_cast<int>(as_integer(size[0], where + ".mask.size"));
  m.width = static_cast<int>(as_integer(size[1], where + ".mask.size"));
  const auto& runs = require(*it, "runs", where + ".mask");
  if (!runs.is_array()) throw IoError(where + ".mask.runs must be a list");
  m.runs.reserve(runs.size());
  for (const auto& r : runs) {
    const auto n = as_integer(r, where + ".mask.runs");
    if (n < 0 || n > 0xFFFFFFFFll) throw IoError(where + ".mask.runs: run out of range");
    m.runs.push_back(static_cast<std::uint32_t>(n));
  }
  return m;
}

inline json mask_to_json(const std::optional<BinaryMask>& m) {
  if (!m) return nullptr;
  return json{{"size", {m->height, m->width}}, {"runs", m->runs}};
}

inline json bbox_to_json(const BoundingBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

inline json images_to_json(const std::vector<ImageMeta>& images) {
  json arr = json::array();
  for (const auto& im : images) {
    arr.push_back({{"id", image_id_to_json(im.id)}, {"width", im.width}, {"height", im.height}});
  }
  return arr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Decoding (structure only) and loading (decode + clip + validate)

template <class T>
struct Loaded {
  T value;
  std::vector<std::string> warnings;
};

inline DetectionSet decode_detection_set(const json& root, const std::string& origin) {
  DetectionSet ds;
  ds.images = detail::parse_images(root, origin);
  const auto& arr = detail::require(root, "detections", origin);
  if (!arr.is_array()) throw IoError(origin + ": 'detections' must be a list");
  ds.detections.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = origin + ": detections[" + std::to_string(i) + "]";
    const auto& d = arr[i];
    Detection det;
    det.image_id = detail::as_image_id(detail::require(d, "image_id", where), where);
    det.category_id = static_cast<int>(
        detail::as_integer(detail::require(d, "category_id", where), where + ".category_id"));
    det.score = detail::as_number(detail::require(d, "score", where), where + ".score");
    det.box = detail::parse_bbox(detail::require(d, "bbox", where), where + ".bbox");
    det.mask = detail::parse_mask(d, where);
    if (const auto it = d.find("source_id"); it != d.end() && !it->is_null()) {
      if (!it->is_string()) throw IoError(where + ".source_id must be a string");
      det.source_id = it->get<std::string>();
    }
    ds.detections.push_back(std::move(det));
  }
  return ds;
}

inline GroundTruth decode_ground_truth(const json& root, const std::string& origin) {
  GroundTruth gt;
  gt.images = detail::parse_images(root, origin);
  const auto& arr = detail::require(root, "annotations", origin);
  if (!arr.is_array()) throw IoError(origin + ": 'annotations' must be a list");
  gt.annotations.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = origin + ": annotations[" + std::to_string(i) + "]";
    const auto& a = arr[i];
    Annotation ann;
    ann.image_id = detail::as_image_id(detail::require(a, "image_id", where), where);
    ann.category_id = static_cast<int>(
        detail::as_integer(detail::require(a, "category_id", where), where + ".category_id"));
    ann.box = detail::parse_bbox(detail::require(a, "bbox", where), where + ".bbox");
    ann.mask = detail::parse_mask(a, where);
    gt.annotations.push_back(std::move(ann));
  }
  return gt;
}

namespace detail {

template <class Item>
void clip_items(std::vector<Item>& items, const std::vector<ImageMeta>& images,
                const char* label, const std::string& origin,
                std::vector<std::string>& warnings) {
  const auto frames = frame_index(images);
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& item = items[i];
    const auto it = frames.find(item.image_id);
    if (it == frames.end() || !item.box.valid() || inside_frame(item.box, it->second)) {
      continue;
    }
    item.box = clip_to_frame(item.box, it->second);
    warnings.push_back(origin + ": " + label + "[" + std::to_string(i) +
                       "] box clipped to image " + item.image_id);
  }
}

}  // namespace detail

// Clips out-of-frame boxes in place, returning one warning per clipped box.
inline std::vector<std::string> clip_boxes(DetectionSet& ds, const std::string& origin) {
  std::vector<std::string> warnings;
  detail::clip_items(ds.detections, ds.images, "detections", origin, warnings);
  return warnings;
}

inline std::vector<std::string> clip_boxes(GroundTruth& gt, const std::string& origin) {
  std::vector<std::string> warnings;
  detail::clip_items(gt.annotations, gt.images, "annotations", origin, warnings);
  return warnings;
}

inline Loaded<DetectionSet> load_detection_set(const std::filesystem::path& path) {
  const std::string origin = path.string();
  auto ds = decode_detection_set(load_json(path), origin);
  auto warnings = clip_boxes(ds, origin);
  const auto report = validate(ds);
  if (!report.ok()) throw ValidationError(origin + ": " + report.summary());
  return {std::move(ds), std::move(warnings)};
}

inline Loaded<GroundTruth> load_ground_truth(const std::filesystem::path& path) {
  const std::string origin = path.string();
  auto gt = decode_ground_truth(load_json(path), origin);
  auto warnings = clip_boxes(gt, origin);
  const auto report = validate(gt);
  if (!report.ok()) throw ValidationError(origin + ": " + report.summary());
  return {std::move(gt), std::move(warnings)};
}

// ---------------------------------------------------------------------------
// Encoding

inline json to_json(const DetectionSet& ds) {
  json dets = json::array();
  for (const auto& d : ds.detections) {
    dets.push_back({{"image_id", detail::image_id_to_json(d.image_id)},
                    {"category_id", d.category_id},
                    {"score", d.score},
                    {"bbox", detail::bbox_to_json(d.box)},
                    {"mask", detail::mask_to_json(d.mask)},
                    {"source_id", d.source_id}});
  }
  return {{"images", detail::images_to_json(ds.images)}, {"detections", std::move(dets)}};
}

inline json to_json(const GroundTruth& gt) {
  json anns = json::array();
  for (const auto& a : gt.annotations) {
    anns.push_back({{"image_id", detail::image_id_to_json(a.image_id)},
                    {"category_id", a.category_id},
                    {"bbox", detail::bbox_to_json(a.box)},
                    {"mask", detail::mask_to_json(a.mask)}});
  }
  return {{"images", detail::images_to_json(gt.images)}, {"annotations", std::move(anns)}};
}

// Serialized form used for every file stagekit writes: two-space indent and a
// trailing newline.
inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Classification files

inline std::vector<ClassificationOutput> decode_classification(const json& root,
                                                                const std::string& origin) {
  const auto& arr = detail::require(root, "predictions", origin);
  if (!arr.is_array()) throw IoError(origin + ": 'predictions' must be a list");
  std::vector<ClassificationOutput> out;
  out.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = origin + ": predictions[" + std::to_string(i) + "]";
    const auto& p = arr[i];
    ClassificationOutput o;
    o.image_id = detail::as_image_id(detail::require(p, "image_id", where), where);
    const auto& probs = detail::require(p, "probs", where);
    if (!probs.is_array()) throw IoError(where + ".probs must be a list");
    for (const auto& v : probs) o.probs.push_back(detail::as_number(v, where + ".probs"));
    out.push_back(std::move(o));
  }
  return out;
}

inline std::vector<ClassificationOutput> load_classification(const std::filesystem::path& path) {
  auto out = decode_classification(load_json(path), path.string());
  const auto report = validate(out);
  if (!report.ok()) throw ValidationError(path.string() + ": " + report.summary());
  return out;
}

inline json to_json(const std::vector<ClassificationOutput>& outputs) {
  json arr = json::array();
  for (const auto& o : outputs) {
    arr.push_back({{"image_id", detail::image_id_to_json(o.image_id)}, {"probs", o.probs}});
  }
  return {{"predictions", std::move(arr)}};
}

struct ClassLabel {
  ImageId image_id;
  std::size_t label = 0;
};

inline std::vector<ClassLabel> decode_labels(const json& root, const std::string& origin) {
  const auto& arr = detail::require(root, "labels", origin);
  if (!arr.is_array()) throw IoError(origin + ": 'labels' must be a list");
  std::vector<ClassLabel> out;
  out.reserve(arr.size());
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string where = origin + ": labels[" + std::to_string(i) + "]";
    const auto& l = arr[i];
    const auto cls = detail::as_integer(detail::require(l, "class", where), where + ".class");
    if (cls < 0) throw ValidationError(where + ": negative class index");
    out.push_back({detail::as_image_id(detail::require(l, "image_id", where), where),
                   static_cast<std::size_t>(cls)});
  }
  return out;
}

inline std::vector<ClassLabel> load_labels(const std::filesystem::path& path) {
  return decode_labels(load_json(path), path.string());
}

}  // namespace stagekit
