#pragma once

// Geometric primitives, the canonical prediction data model, and the
// validation pass shared by every other stagekit module.
//
// Coordinates are continuous corners (x1, y1, x2, y2) in the original image
// frame, origin top-left. Area is (x2 - x1) * (y2 - y1), no +1 convention.
// Masks are run-length encoded in column-major order starting with a run of
// zeros (which may be empty).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "stagekit/error.hpp"

namespace stagekit {

// ---------------------------------------------------------------------------
// BoundingBox

struct BoundingBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  // Checked constructor: rejects non-finite coordinates and zero or negative
  // extents.
  static BoundingBox from_corners(double x1, double y1, double x2, double y2) {
    BoundingBox b{x1, y1, x2, y2};
    if (!b.valid()) {
      throw ValidationError("invalid box [" + std::to_string(x1) + ", " +
                            std::to_string(y1) + ", " + std::to_string(x2) +
                            ", " + std::to_string(y2) + "]");
    }
    return b;
  }

  bool valid() const noexcept {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2) && x1 < x2 && y1 < y2;
  }

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
  friend auto operator<=>(const BoundingBox& a, const BoundingBox& b) {
    return std::tie(a.x1, a.y1, a.x2, a.y2) <=> std::tie(b.x1, b.y1, b.x2, b.y2);
  }
};

inline double box_area(const BoundingBox& b) noexcept {
  return b.width() * b.height();
}

inline double box_intersection(const BoundingBox& a,
                               const BoundingBox& b) noexcept {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double box_iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double inter = box_intersection(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = box_area(a) + box_area(b) - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Image identity and frames

using ImageId = std::string;

namespace detail {
inline bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return c >= '0' && c <= '9';
  });
}
}  // namespace detail

// Natural order: purely numeric ids compare numerically, everything else
// lexicographically, numeric ids first.
inline bool image_id_less(const ImageId& a, const ImageId& b) {
  const bool na = detail::all_digits(a);
  const bool nb = detail::all_digits(b);
  if (na != nb) return na;
  if (na) {
    auto strip = [](const std::string& s) {
      const auto p = s.find_first_not_of('0');
      return p == std::string::npos ? std::string("0") : s.substr(p);
    };
    const std::string sa = strip(a);
    const std::string sb = strip(b);
    if (sa.size() != sb.size()) return sa.size() < sb.size();
    if (sa != sb) return sa < sb;
  }
  return a < b;
}

struct ImageIdLess {
  bool operator()(const ImageId& a, const ImageId& b) const {
    return image_id_less(a, b);
  }
};

struct ImageMeta {
  ImageId id;
  int width = 0;
  int height = 0;

  friend bool operator==(const ImageMeta&, const ImageMeta&) = default;
};

inline BoundingBox clip_to_frame(const BoundingBox& b, const ImageMeta& frame) {
  const double w = frame.width;
  const double h = frame.height;
  return {std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h),
          std::clamp(b.x2, 0.0, w), std::clamp(b.y2, 0.0, h)};
}

inline bool inside_frame(const BoundingBox& b, const ImageMeta& frame) {
  return b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= frame.width &&
         b.y2 <= frame.height;
}

// ---------------------------------------------------------------------------
// BinaryMask and run-length encoding

struct BinaryMask {
  int width = 0;
  int height = 0;
  // Alternating run lengths, zeros first, column-major pixel order.
  std::vector<std::uint32_t> runs;

  std::uint64_t pixel_count() const noexcept {
    return static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height);
  }

  std::uint64_t run_sum() const noexcept {
    std::uint64_t s = 0;
    for (auto r : runs) s += r;
    return s;
  }

  bool valid() const noexcept {
    return width > 0 && height > 0 && run_sum() == pixel_count();
  }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
  friend auto operator<=>(const BinaryMask&, const BinaryMask&) = default;
};

// Row-major bitmap (one byte per pixel, nonzero = foreground) to canonical
// column-major RLE.
inline BinaryMask rle_encode(std::span<const std::uint8_t> bitmap, int width,
                             int height) {
  if (width <= 0 || height <= 0) {
    throw ValidationError("rle_encode: non-positive mask dimensions");
  }
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bitmap.size() != n) {
    throw ValidationError("rle_encode: bitmap has " +
                          std::to_string(bitmap.size()) + " pixels, expected " +
                          std::to_string(n));
  }
  BinaryMask m{width, height, {}};
  bool current = false;
  std::uint32_t count = 0;
  for (int col = 0; col < width; ++col) {
    for (int row = 0; row < height; ++row) {
      const bool v = bitmap[static_cast<std::size_t>(row) * width + col] != 0;
      if (v != current) {
        m.runs.push_back(count);
        count = 0;
        current = v;
      }
      ++count;
    }
  }
  m.runs.push_back(count);
  return m;
}

// Inverse of rle_encode: returns a row-major bitmap.
inline std::vector<std::uint8_t> rle_decode(const BinaryMask& m) {
  if (!m.valid()) {
    throw ValidationError("rle_decode: run sum " + std::to_string(m.run_sum()) +
                          " does not match " + std::to_string(m.width) + "x" +
                          std::to_string(m.height));
  }
  std::vector<std::uint8_t> bitmap(static_cast<std::size_t>(m.pixel_count()), 0);
  std::uint64_t pos = 0;
  for (std::size_t i = 0; i < m.runs.size(); ++i) {
    const bool fg = (i % 2) == 1;
    for (std::uint32_t k = 0; k < m.runs[i]; ++k, ++pos) {
      if (!fg) continue;
      const auto col = pos / static_cast<std::uint64_t>(m.height);
      const auto row = pos % static_cast<std::uint64_t>(m.height);
      bitmap[row * static_cast<std::uint64_t>(m.width) + col] = 1;
    }
  }
  return bitmap;
}

// Merges empty interior runs and drops trailing empty runs without decoding.
inline BinaryMask canonicalize(const BinaryMask& m) {
  if (!m.valid()) {
    throw ValidationError("canonicalize: invalid mask");
  }
  BinaryMask out{m.width, m.height, {}};
  out.runs.push_back(m.runs.empty() ? 0 : m.runs[0]);
  bool last_fg = false;
  for (std::size_t i = 1; i < m.runs.size(); ++i) {
    const bool fg = (i % 2) == 1;
    if (m.runs[i] == 0) continue;
    if (fg == last_fg) {
      out.runs.back() += m.runs[i];
    } else {
      out.runs.push_back(m.runs[i]);
      last_fg = fg;
    }
  }
  return out;
}

inline std::uint64_t mask_area(const BinaryMask& m) noexcept {
  std::uint64_t a = 0;
  for (std::size_t i = 1; i < m.runs.size(); i += 2) a += m.runs[i];
  return a;
}

namespace detail {

class RunCursor {
 public:
  explicit RunCursor(std::span<const std::uint32_t> runs) : runs_(runs) {
    refill();
  }
  bool done() const noexcept { return left_ == 0; }
  bool value() const noexcept { return value_; }
  std::uint64_t left() const noexcept { return left_; }
  void consume(std::uint64_t n) {
    left_ -= n;
    refill();
  }

 private:
  void refill() {
    while (left_ == 0 && idx_ < runs_.size()) {
      left_ = runs_[idx_];
      value_ = (idx_ % 2) == 1;
      ++idx_;
    }
  }

  std::span<const std::uint32_t> runs_;
  std::size_t idx_ = 0;
  std::uint64_t left_ = 0;
  bool value_ = false;
};

}  // namespace detail

// Foreground pixels shared by two equal-sized masks, computed on the runs.
inline std::uint64_t mask_intersection(const BinaryMask& a, const BinaryMask& b) {
  detail::RunCursor ca(a.runs);
  detail::RunCursor cb(b.runs);
  std::uint64_t inter = 0;
  while (!ca.done() && !cb.done()) {
    const std::uint64_t step = std::min(ca.left(), cb.left());
    if (ca.value() && cb.value()) inter += step;
    ca.consume(step);
    cb.consume(step);
  }
  return inter;
}

inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.width != b.width || a.height != b.height) {
    throw ValidationError("mask_iou: dimension mismatch " +
                          std::to_string(a.width) + "x" + std::to_string(a.height) +
                          " vs " + std::to_string(b.width) + "x" +
                          std::to_string(b.height));
  }
  if (!a.valid() || !b.valid()) {
    throw ValidationError("mask_iou: run sum does not match mask dimensions");
  }
  const std::uint64_t inter = mask_intersection(a, b);
  const std::uint64_t uni = mask_area(a) + mask_area(b) - inter;
  if (uni == 0) throw UndefinedOverlap();
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Detections and datasets

struct Detection {
  ImageId image_id;
  int category_id = 0;
  double score = 0.0;
  BoundingBox box;
  std::optional<BinaryMask> mask;
  std::string source_id;

  friend bool operator==(const Detection&, const Detection&) = default;
};

// Total order used for every score-sorted pass: score descending, then the
// box corners lexicographically ascending, then the remaining fields so that
// the order never depends on input position.
inline bool detection_precedes(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.box != b.box) return a.box < b.box;
  if (a.category_id != b.category_id) return a.category_id < b.category_id;
  if (a.image_id != b.image_id) return image_id_less(a.image_id, b.image_id);
  if (a.source_id != b.source_id) return a.source_id < b.source_id;
  if (a.mask.has_value() != b.mask.has_value()) return !a.mask.has_value();
  if (a.mask && *a.mask != *b.mask) return *a.mask < *b.mask;
  return false;
}

struct DetectionSet {
  std::vector<ImageMeta> images;
  std::vector<Detection> detections;
};

struct Annotation {
  ImageId image_id;
  int category_id = 0;
  BoundingBox box;
  std::optional<BinaryMask> mask;
};

struct GroundTruth {
  std::vector<ImageMeta> images;
  std::vector<Annotation> annotations;
};

inline std::map<ImageId, ImageMeta> frame_index(std::span<const ImageMeta> images) {
  std::map<ImageId, ImageMeta> out;
  for (const auto& im : images) out.emplace(im.id, im);
  return out;
}

// Images sorted into natural id order.
inline std::vector<ImageMeta> sorted_images(std::vector<ImageMeta> images) {
  std::sort(images.begin(), images.end(),
            [](const ImageMeta& a, const ImageMeta& b) {
              return image_id_less(a.id, b.id);
            });
  return images;
}

// Canonical layout: images in natural id order, detections grouped by image
// (in that order), then by category, then in detection_precedes order.
inline DetectionSet canonical_order(DetectionSet ds) {
  ds.images = sorted_images(std::move(ds.images));
  std::sort(ds.detections.begin(), ds.detections.end(),
            [](const Detection& a, const Detection& b) {
              if (a.image_id != b.image_id) return image_id_less(a.image_id, b.image_id);
              if (a.category_id != b.category_id) return a.category_id < b.category_id;
              return detection_precedes(a, b);
            });
  return ds;
}

// ---------------------------------------------------------------------------
// Non-maximum suppression

// Greedy NMS over detections of a single image and category. Output is in
// detection_precedes order.
inline std::vector<Detection> nms(std::span<const Detection> dets,
                                  double iou_threshold) {
  if (dets.empty()) return {};
  for (const auto& d : dets) {
    if (d.image_id != dets.front().image_id ||
        d.category_id != dets.front().category_id) {
      throw ValidationError("nms: detections must share image_id and category_id");
    }
  }
  std::vector<Detection> order(dets.begin(), dets.end());
  std::sort(order.begin(), order.end(), detection_precedes);
  std::vector<Detection> kept;
  for (auto& d : order) {
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
          return box_iou(k.box, d.box) >= iou_threshold;
        });
    if (!suppressed) kept.push_back(std::move(d));
  }
  return kept;
}

// nms applied independently to every (image, category) group; output in
// canonical_order.
inline DetectionSet nms_per_group(const DetectionSet& ds, double iou_threshold) {
  std::map<std::pair<ImageId, int>, std::vector<Detection>> groups;
  for (const auto& d : ds.detections) {
    groups[{d.image_id, d.category_id}].push_back(d);
  }
  DetectionSet out{ds.images, {}};
  for (auto& [key, members] : groups) {
    for (auto& d : nms(members, iou_threshold)) out.detections.push_back(std::move(d));
  }
  return canonical_order(std::move(out));
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string where;
  std::string what;

  friend bool operator==(const Violation&, const Violation&) = default;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }

  std::string summary() const {
    std::string s;
    for (const auto& v : violations) {
      if (!s.empty()) s += "; ";
      s += v.where + ": " + v.what;
    }
    return s;
  }
};

namespace detail {

inline void check_images(std::span<const ImageMeta> images, ValidationReport& r) {
  std::set<ImageId> seen;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    const std::string where = "images[" + std::to_string(i) + "] (id " + im.id + ")";
    if (im.width <= 0 || im.height <= 0) {
      r.violations.push_back({where, "non-positive dimensions"});
    }
    if (!seen.insert(im.id).second) {
      r.violations.push_back({where, "duplicate image id"});
    }
  }
}

inline void check_geometry(const std::string& where, const ImageId& image_id,
                           const BoundingBox& box,
                           const std::optional<BinaryMask>& mask,
                           const std::map<ImageId, ImageMeta>& frames,
                           ValidationReport& r) {
  const auto it = frames.find(image_id);
  if (it == frames.end()) {
    r.violations.push_back({where, "dangling image_id " + image_id});
  }
  if (!box.valid()) {
    r.violations.push_back({where, "invalid box (non-finite or zero-area)"});
  } else if (it != frames.end() && !inside_frame(box, it->second)) {
    r.violations.push_back({where, "box outside image frame"});
  }
  if (mask) {
    if (mask->run_sum() != mask->pixel_count() || mask->width <= 0 ||
        mask->height <= 0) {
      r.violations.push_back(
          {where, "mask run sum " + std::to_string(mask->run_sum()) +
                      " does not equal " + std::to_string(mask->width) + "x" +
                      std::to_string(mask->height)});
    }
    if (it != frames.end() && (mask->width != it->second.width ||
                               mask->height != it->second.height)) {
      r.violations.push_back({where, "mask dimensions differ from image"});
    }
  }
}

}  // namespace detail

inline ValidationReport validate(const DetectionSet& ds) {
  ValidationReport r;
  detail::check_images(ds.images, r);
  const auto frames = frame_index(ds.images);
  for (std::size_t i = 0; i < ds.detections.size(); ++i) {
    const auto& d = ds.detections[i];
    const std::string where = "detections[" + std::to_string(i) + "]";
    if (!(d.score >= 0.0 && d.score <= 1.0)) {
      r.violations.push_back({where, "score " + std::to_string(d.score) +
                                         " outside [0, 1]"});
    }
    detail::check_geometry(where, d.image_id, d.box, d.mask, frames, r);
  }
  return r;
}

inline ValidationReport validate(const GroundTruth& gt) {
  ValidationReport r;
  detail::check_images(gt.images, r);
  const auto frames = frame_index(gt.images);
  for (std::size_t i = 0; i < gt.annotations.size(); ++i) {
    const auto& a = gt.annotations[i];
    detail::check_geometry("annotations[" + std::to_string(i) + "]", a.image_id,
                           a.box, a.mask, frames, r);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Parallel helper

// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware
// concurrency). Callers write results by index, so output never depends on
// the worker count. The first exception thrown is rethrown on the caller.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  workers.clear();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace stagekit
