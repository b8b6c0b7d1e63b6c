#pragma once

// Test-time augmentation support: a closed family of invertible view
// transforms, exact mapping of boxes and masks between the original frame and
// a view frame, pooling of per-view detections, and aggregation of per-view
// classification outputs.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "stagekit/core.hpp"
#include "stagekit/error.hpp"

namespace stagekit {

enum class TransformKind { identity, hflip, vflip, rot90, rot180, rot270, scale };

// Rotations are counter-clockwise, matching numpy/torch rot90 with k = 1, 2, 3.
struct ViewTransform {
  TransformKind kind = TransformKind::identity;
  double scale_factor = 1.0;

  static ViewTransform scale(double factor) {
    if (!(factor > 0.0) || !std::isfinite(factor)) {
      throw ValidationError("scale factor must be positive and finite");
    }
    return {TransformKind::scale, factor};
  }

  bool discrete() const noexcept { return kind != TransformKind::scale; }

  friend bool operator==(const ViewTransform&, const ViewTransform&) = default;
};

inline constexpr TransformKind kDiscreteTransforms[] = {
    TransformKind::identity, TransformKind::hflip,  TransformKind::vflip,
    TransformKind::rot90,    TransformKind::rot180, TransformKind::rot270};

inline std::string_view kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::identity: return "identity";
    case TransformKind::hflip: return "hflip";
    case TransformKind::vflip: return "vflip";
    case TransformKind::rot90: return "rot90";
    case TransformKind::rot180: return "rot180";
    case TransformKind::rot270: return "rot270";
    case TransformKind::scale: return "scale";
  }
  throw InvariantError("unknown transform kind");
}

inline TransformKind parse_kind(std::string_view s) {
  for (auto k : kDiscreteTransforms) {
    if (kind_name(k) == s) return k;
  }
  if (s == "scale") return TransformKind::scale;
  throw ValidationError("unknown view transform '" + std::string(s) + "'");
}

// "hflip", "rot90", "scale:0.5", ...
inline std::string view_name(const ViewTransform& t) {
  std::string name(kind_name(t.kind));
  if (t.kind == TransformKind::scale) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), t.scale_factor);
    name += ":" + std::string(buf, res.ptr);
  }
  return name;
}

// Frame of the view produced by applying t to `frame`. Rotations by 90/270
// swap the dimensions; scale rounds to the nearest pixel (at least 1).
inline ImageMeta transformed_frame(const ImageMeta& frame, const ViewTransform& t) {
  switch (t.kind) {
    case TransformKind::rot90:
    case TransformKind::rot270:
      return {frame.id, frame.height, frame.width};
    case TransformKind::scale: {
      auto sw = static_cast<int>(std::lround(frame.width * t.scale_factor));
      auto sh = static_cast<int>(std::lround(frame.height * t.scale_factor));
      return {frame.id, std::max(1, sw), std::max(1, sh)};
    }
    default:
      return frame;
  }
}

// ---------------------------------------------------------------------------
// Boxes

// Original frame -> view frame.
inline BoundingBox forward_box(const BoundingBox& b, const ViewTransform& t,
                               const ImageMeta& frame) {
  const double w = frame.width;
  const double h = frame.height;
  switch (t.kind) {
    case TransformKind::identity: return b;
    case TransformKind::hflip: return {w - b.x2, b.y1, w - b.x1, b.y2};
    case TransformKind::vflip: return {b.x1, h - b.y2, b.x2, h - b.y1};
    // (x, y) -> (y, W - x)
    case TransformKind::rot90: return {b.y1, w - b.x2, b.y2, w - b.x1};
    case TransformKind::rot180: return {w - b.x2, h - b.y2, w - b.x1, h - b.y1};
    // (x, y) -> (H - y, x)
    case TransformKind::rot270: return {h - b.y2, b.x1, h - b.y1, b.x2};
    case TransformKind::scale: {
      const double s = t.scale_factor;
      return {b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s};
    }
  }
  throw InvariantError("unknown transform kind");
}

// View frame -> original frame. Exact inverse of forward_box for flips and
// rotations whenever W - x is representable (any coordinate on a dyadic grid
// coarser than 2^-(52 - log2 W)); division for scale.
inline BoundingBox invert_box(const BoundingBox& b, const ViewTransform& t,
                              const ImageMeta& original_frame) {
  const double w = original_frame.width;
  const double h = original_frame.height;
  switch (t.kind) {
    case TransformKind::identity: return b;
    case TransformKind::hflip: return {w - b.x2, b.y1, w - b.x1, b.y2};
    case TransformKind::vflip: return {b.x1, h - b.y2, b.x2, h - b.y1};
    // (x', y') -> (W - y', x')
    case TransformKind::rot90: return {w - b.y2, b.x1, w - b.y1, b.x2};
    case TransformKind::rot180: return {w - b.x2, h - b.y2, w - b.x1, h - b.y1};
    // (x', y') -> (y', H - x')
    case TransformKind::rot270: return {b.y1, h - b.x2, b.y2, h - b.x1};
    case TransformKind::scale: {
      const double s = t.scale_factor;
      return {b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s};
    }
  }
  throw InvariantError("unknown transform kind");
}

// ---------------------------------------------------------------------------
// Masks

namespace detail {

// Nearest-neighbour resampling on pixel centres.
inline BinaryMask resample_nearest(const BinaryMask& m, int new_width,
                                   int new_height) {
  const auto src = rle_decode(m);
  std::vector<std::uint8_t> dst(static_cast<std::size_t>(new_width) * new_height);
  for (int r = 0; r < new_height; ++r) {
    const auto sr = std::min<long>(
        m.height - 1, static_cast<long>((r + 0.5) * m.height / new_height));
    for (int c = 0; c < new_width; ++c) {
      const auto sc = std::min<long>(
          m.width - 1, static_cast<long>((c + 0.5) * m.width / new_width));
      dst[static_cast<std::size_t>(r) * new_width + c] =
          src[static_cast<std::size_t>(sr) * m.width + sc];
    }
  }
  return rle_encode(dst, new_width, new_height);
}

// Pixel (row, col) of a W x H source lands at the returned (row, col) of the
// transformed image.
inline std::pair<int, int> map_pixel(TransformKind k, int row, int col, int w,
                                     int h) {
  switch (k) {
    case TransformKind::hflip: return {row, w - 1 - col};
    case TransformKind::vflip: return {h - 1 - row, col};
    case TransformKind::rot90: return {w - 1 - col, row};
    case TransformKind::rot180: return {h - 1 - row, w - 1 - col};
    case TransformKind::rot270: return {col, h - 1 - row};
    default: return {row, col};
  }
}

inline TransformKind inverse_kind(TransformKind k) {
  if (k == TransformKind::rot90) return TransformKind::rot270;
  if (k == TransformKind::rot270) return TransformKind::rot90;
  return k;
}

inline BinaryMask permute_pixels(const BinaryMask& m, TransformKind k) {
  if (k == TransformKind::identity) return m;
  const bool swap = k == TransformKind::rot90 || k == TransformKind::rot270;
  const int out_w = swap ? m.height : m.width;
  const int out_h = swap ? m.width : m.height;
  const auto src = rle_decode(m);
  std::vector<std::uint8_t> dst(src.size(), 0);
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      const auto [nr, nc] = map_pixel(k, r, c, m.width, m.height);
      dst[static_cast<std::size_t>(nr) * out_w + nc] =
          src[static_cast<std::size_t>(r) * m.width + c];
    }
  }
  return rle_encode(dst, out_w, out_h);
}

}  // namespace detail

inline BinaryMask forward_mask(const BinaryMask& m, const ViewTransform& t,
                               const ImageMeta& frame) {
  if (m.width != frame.width || m.height != frame.height) {
    throw ValidationError("forward_mask: mask is " + std::to_string(m.width) +
                          "x" + std::to_string(m.height) + ", frame is " +
                          std::to_string(frame.width) + "x" +
                          std::to_string(frame.height));
  }
  if (t.kind == TransformKind::scale) {
    const auto view = transformed_frame(frame, t);
    return detail::resample_nearest(m, view.width, view.height);
  }
  return detail::permute_pixels(m, t.kind);
}

// Pixel-exact for flips and rotations; nearest-neighbour resampling for scale.
inline BinaryMask invert_mask(const BinaryMask& m, const ViewTransform& t,
                              const ImageMeta& original_frame) {
  const auto view = transformed_frame(original_frame, t);
  if (m.width != view.width || m.height != view.height) {
    throw ValidationError("invert_mask: mask is " + std::to_string(m.width) +
                          "x" + std::to_string(m.height) + ", view frame is " +
                          std::to_string(view.width) + "x" +
                          std::to_string(view.height));
  }
  if (t.kind == TransformKind::scale) {
    return detail::resample_nearest(m, original_frame.width, original_frame.height);
  }
  return detail::permute_pixels(m, detail::inverse_kind(t.kind));
}

// ---------------------------------------------------------------------------
// Detection pooling

struct View {
  ViewTransform transform;
  DetectionSet detections;  // expressed in the view frame
};

// Maps every view's detections back to the original frame and concatenates
// them in view order. Non-identity views tag source_id with "@<view>". Scores
// pass through unchanged. A detection whose mapped box has no overlap with
// the original frame (possible only through scale rounding) is dropped.
inline DetectionSet pool_views(std::span<const View> per_view,
                               std::span<const ImageMeta> original_frames) {
  const auto frames = frame_index(original_frames);
  DetectionSet out;
  out.images.assign(original_frames.begin(), original_frames.end());
  for (const auto& view : per_view) {
    const auto& t = view.transform;
    for (const auto& im : view.detections.images) {
      const auto it = frames.find(im.id);
      if (it == frames.end()) continue;
      const auto expected = transformed_frame(it->second, t);
      if (im.width != expected.width || im.height != expected.height) {
        throw ValidationError("view " + view_name(t) + ": image " + im.id +
                              " is " + std::to_string(im.width) + "x" +
                              std::to_string(im.height) + ", expected " +
                              std::to_string(expected.width) + "x" +
                              std::to_string(expected.height));
      }
    }
    for (const auto& d : view.detections.detections) {
      const auto it = frames.find(d.image_id);
      if (it == frames.end()) {
        throw ValidationError("view " + view_name(t) +
                              ": no original frame for image " + d.image_id);
      }
      const auto& frame = it->second;
      Detection mapped = d;
      mapped.box = clip_to_frame(invert_box(d.box, t, frame), frame);
      if (!mapped.box.valid()) continue;
      if (d.mask) mapped.mask = invert_mask(*d.mask, t, frame);
      if (t.kind != TransformKind::identity) {
        mapped.source_id += "@" + view_name(t);
      }
      out.detections.push_back(std::move(mapped));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification aggregation

// Class 0 is bleeding, class 1 is non-bleeding.
inline constexpr std::size_t kBleedingClass = 0;

struct ClassificationOutput {
  ImageId image_id;
  std::vector<double> probs;

  friend bool operator==(const ClassificationOutput&,
                         const ClassificationOutput&) = default;
};

inline ValidationReport validate(std::span<const ClassificationOutput> outputs) {
  ValidationReport r;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& o = outputs[i];
    const std::string where =
        "predictions[" + std::to_string(i) + "] (image " + o.image_id + ")";
    if (o.probs.empty()) {
      r.violations.push_back({where, "empty probability vector"});
      continue;
    }
    double sum = 0.0;
    bool negative = false;
    for (double p : o.probs) {
      if (!std::isfinite(p) || p < 0.0) negative = true;
      sum += p;
    }
    if (negative) r.violations.push_back({where, "negative or non-finite probability"});
    if (!(std::fabs(sum - 1.0) <= 1e-6)) {
      r.violations.push_back({where, "probabilities sum to " + std::to_string(sum)});
    }
  }
  return r;
}

enum class TtaAggregation { mean, majority_vote };

inline TtaAggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return TtaAggregation::mean;
  if (s == "majority_vote") return TtaAggregation::majority_vote;
  throw ValidationError("unknown TTA aggregation '" + std::string(s) + "'");
}

inline std::string_view aggregation_name(TtaAggregation a) {
  return a == TtaAggregation::mean ? "mean" : "majority_vote";
}

// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline ClassificationOutput aggregate_classification(
    std::span<const ClassificationOutput> outputs, TtaAggregation mode) {
  if (outputs.empty()) {
    throw ValidationError("aggregate_classification: no outputs");
  }
  const auto& first = outputs.front();
  const std::size_t arity = first.probs.size();
  for (const auto& o : outputs) {
    if (o.probs.size() != arity) {
      throw ValidationError("aggregate_classification: class arity mismatch for image " +
                            o.image_id);
    }
    if (o.image_id != first.image_id) {
      throw ValidationError("aggregate_classification: mixed image ids " +
                            first.image_id + " and " + o.image_id);
    }
  }
  if (outputs.size() == 1) return first;

  ClassificationOutput out{first.image_id, std::vector<double>(arity, 0.0)};
  const double n = static_cast<double>(outputs.size());
  if (mode == TtaAggregation::mean) {
    // Summing sorted values makes the result independent of view order.
    std::vector<double> column(outputs.size());
    double total = 0.0;
    for (std::size_t k = 0; k < arity; ++k) {
      for (std::size_t v = 0; v < outputs.size(); ++v) column[v] = outputs[v].probs[k];
      std::sort(column.begin(), column.end());
      double s = 0.0;
      for (double x : column) s += x;
      out.probs[k] = s / n;
      total += out.probs[k];
    }
    if (total > 0.0 && std::fabs(total - 1.0) > 1e-12) {
      for (auto& p : out.probs) p /= total;
    }
  } else {
    std::vector<std::size_t> votes(arity, 0);
    for (const auto& o : outputs) ++votes[argmax(o.probs)];
    for (std::size_t k = 0; k < arity; ++k) out.probs[k] = votes[k] / n;
  }
  return out;
}

}  // namespace stagekit
