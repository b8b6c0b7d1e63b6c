#pragma once

// Multi-source detection fusion. Detections from every source model are
// greedily clustered per (image, category), clusters are filtered by how many
// distinct sources they contain (affirmative / consensus / unanimous), and
// each surviving cluster is merged into output detections.

#include <algorithm>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stagekit/core.hpp"
#include "stagekit/error.hpp"

namespace stagekit {

enum class Strategy { affirmative, consensus, unanimous };
enum class MergeMode { nms, weighted_average, max_score };

inline Strategy parse_strategy(std::string_view s) {
  if (s == "affirmative") return Strategy::affirmative;
  if (s == "consensus") return Strategy::consensus;
  if (s == "unanimous") return Strategy::unanimous;
  throw ValidationError("unknown ensemble strategy '" + std::string(s) + "'");
}

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::affirmative: return "affirmative";
    case Strategy::consensus: return "consensus";
    case Strategy::unanimous: return "unanimous";
  }
  throw InvariantError("unknown strategy");
}

inline MergeMode parse_merge_mode(std::string_view s) {
  if (s == "nms") return MergeMode::nms;
  if (s == "weighted_average") return MergeMode::weighted_average;
  if (s == "max_score") return MergeMode::max_score;
  throw ValidationError("unknown merge mode '" + std::string(s) + "'");
}

inline std::string_view merge_mode_name(MergeMode m) {
  switch (m) {
    case MergeMode::nms: return "nms";
    case MergeMode::weighted_average: return "weighted_average";
    case MergeMode::max_score: return "max_score";
  }
  throw InvariantError("unknown merge mode");
}

struct EnsembleConfig {
  Strategy strategy = Strategy::affirmative;
  double cluster_iou = 0.5;
  MergeMode merge_mode = MergeMode::nms;
  double nms_iou = 0.5;

  void check() const {
    if (!(cluster_iou > 0.0 && cluster_iou <= 1.0)) {
      throw ValidationError("cluster_iou must lie in (0, 1], got " +
                            std::to_string(cluster_iou));
    }
    if (!(nms_iou > 0.0 && nms_iou <= 1.0)) {
      throw ValidationError("nms_iou must lie in (0, 1], got " + std::to_string(nms_iou));
    }
  }
};

inline constexpr std::string_view kEnsembleSourceId = "ensemble";

struct Cluster {
  // members.front() is the seed; members are in detection_precedes order.
  std::vector<Detection> members;
  std::size_t source_count = 0;

  const Detection& seed() const { return members.front(); }
};

// Minimum distinct-source count a cluster needs to survive.
inline std::size_t required_sources(Strategy s, std::size_t num_sources) {
  switch (s) {
    case Strategy::affirmative: return 1;
    case Strategy::consensus: return (num_sources + 1) / 2;
    case Strategy::unanimous: return num_sources;
  }
  throw InvariantError("unknown strategy");
}

// Union of the image lists; the same id with different dimensions is an
// error. Result is in natural id order.
inline std::vector<ImageMeta> merge_images(std::span<const DetectionSet> sets) {
  std::map<ImageId, ImageMeta, ImageIdLess> merged;
  for (const auto& s : sets) {
    for (const auto& im : s.images) {
      auto [it, inserted] = merged.emplace(im.id, im);
      if (!inserted && (it->second.width != im.width || it->second.height != im.height)) {
        throw ValidationError("inconsistent dimensions for image " + im.id + ": " +
                              std::to_string(it->second.width) + "x" +
                              std::to_string(it->second.height) + " vs " +
                              std::to_string(im.width) + "x" + std::to_string(im.height));
      }
    }
  }
  std::vector<ImageMeta> out;
  out.reserve(merged.size());
  for (auto& [id, im] : merged) out.push_back(std::move(im));
  return out;
}

namespace detail {

struct Tagged {
  const Detection* det;
  std::size_t source;
};

using GroupKey = std::pair<ImageId, int>;

struct GroupKeyLess {
  bool operator()(const GroupKey& a, const GroupKey& b) const {
    if (a.first != b.first) return image_id_less(a.first, b.first);
    return a.second < b.second;
  }
};

// Greedy compare-to-seed clustering of one (image, category) group.
inline std::vector<Cluster> cluster_group(std::vector<Tagged> group, double cluster_iou) {
  std::sort(group.begin(), group.end(), [](const Tagged& a, const Tagged& b) {
    return detection_precedes(*a.det, *b.det);
  });
  std::vector<Cluster> clusters;
  std::vector<std::set<std::size_t>> sources;
  for (const auto& t : group) {
    auto it = std::find_if(clusters.begin(), clusters.end(), [&](const Cluster& c) {
      return box_iou(c.seed().box, t.det->box) >= cluster_iou;
    });
    if (it == clusters.end()) {
      clusters.push_back({{*t.det}, 0});
      sources.push_back({t.source});
    } else {
      it->members.push_back(*t.det);
      sources[static_cast<std::size_t>(it - clusters.begin())].insert(t.source);
    }
  }
  for (std::size_t i = 0; i < clusters.size(); ++i) {
    clusters[i].source_count = sources[i].size();
  }
  return clusters;
}

inline std::map<GroupKey, std::vector<Tagged>, GroupKeyLess> group_by_image_category(
    std::span<const DetectionSet> sets) {
  std::map<GroupKey, std::vector<Tagged>, GroupKeyLess> groups;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (const auto& d : sets[s].detections) {
      groups[{d.image_id, d.category_id}].push_back({&d, s});
    }
  }
  return groups;
}

}  // namespace detail

// Clusters are returned grouped by image (natural id order), then category,
// then creation order within the group.
inline std::vector<Cluster> cluster_detections(std::span<const DetectionSet> sets,
                                               double cluster_iou) {
  if (sets.empty()) throw ValidationError("cluster_detections: no source sets");
  merge_images(sets);
  std::vector<Cluster> out;
  for (auto& [key, group] : detail::group_by_image_category(sets)) {
    for (auto& c : detail::cluster_group(std::move(group), cluster_iou)) {
      out.push_back(std::move(c));
    }
  }
  return out;
}

inline std::vector<Cluster> apply_strategy(std::vector<Cluster> clusters, Strategy strategy,
                                           std::size_t num_sources) {
  if (num_sources == 0) throw ValidationError("apply_strategy: need at least one source");
  const std::size_t need = required_sources(strategy, num_sources);
  std::erase_if(clusters, [&](const Cluster& c) { return c.source_count < need; });
  return clusters;
}

namespace detail {

// Pixelwise majority over equally sized masks; ties go to foreground.
inline BinaryMask majority_mask(std::span<const Detection> members) {
  const auto& first = *members.front().mask;
  std::vector<std::uint32_t> votes(static_cast<std::size_t>(first.pixel_count()), 0);
  for (const auto& m : members) {
    if (m.mask->width != first.width || m.mask->height != first.height) {
      throw ValidationError("cannot merge masks of different sizes on image " +
                            m.image_id);
    }
    const auto bits = rle_decode(*m.mask);
    for (std::size_t i = 0; i < bits.size(); ++i) votes[i] += bits[i];
  }
  std::vector<std::uint8_t> bitmap(votes.size());
  const auto n = members.size();
  for (std::size_t i = 0; i < votes.size(); ++i) bitmap[i] = 2 * votes[i] >= n ? 1 : 0;
  return rle_encode(bitmap, first.width, first.height);
}

}  // namespace detail

inline std::vector<Detection> merge_cluster(const Cluster& c, MergeMode mode, double nms_iou) {
  if (c.members.empty()) throw InvariantError("merge_cluster: empty cluster");
  if (c.members.size() == 1) return {c.members.front()};
  switch (mode) {
    case MergeMode::nms:
      return nms(c.members, nms_iou);
    case MergeMode::max_score:
      return {*std::min_element(c.members.begin(), c.members.end(), detection_precedes)};
    case MergeMode::weighted_average: {
      double wsum = 0.0;
      for (const auto& m : c.members) wsum += m.score;
      const bool uniform = !(wsum > 0.0);
      const double total = uniform ? static_cast<double>(c.members.size()) : wsum;
      double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0, best = 0.0;
      for (const auto& m : c.members) {
        const double w = uniform ? 1.0 : m.score;
        x1 += w * m.box.x1;
        y1 += w * m.box.y1;
        x2 += w * m.box.x2;
        y2 += w * m.box.y2;
        best = std::max(best, m.score);
      }
      Detection out = c.seed();
      out.box = {x1 / total, y1 / total, x2 / total, y2 / total};
      out.score = best;
      const bool all_masks = std::all_of(c.members.begin(), c.members.end(),
                                         [](const Detection& d) { return d.mask.has_value(); });
      out.mask = all_masks ? std::optional(detail::majority_mask(c.members)) : std::nullopt;
      return {out};
    }
  }
  throw InvariantError("unknown merge mode");
}

// Full fusion: cluster, filter by strategy, merge. Output images are the union
// of the inputs, output detections are in canonical_order and carry
// source_id "ensemble". `threads` parallelises per-group work without
// affecting the result.
inline DetectionSet ensemble(std::span<const DetectionSet> sets, const EnsembleConfig& cfg,
                             std::size_t threads = 1) {
  cfg.check();
  if (sets.empty()) throw ValidationError("ensemble: no source sets");
  DetectionSet out;
  out.images = merge_images(sets);

  auto grouped = detail::group_by_image_category(sets);
  std::vector<std::vector<detail::Tagged>> groups;
  groups.reserve(grouped.size());
  for (auto& [key, g] : grouped) groups.push_back(std::move(g));

  const std::size_t need = required_sources(cfg.strategy, sets.size());
  std::vector<std::vector<Detection>> fused(groups.size());
  parallel_for(groups.size(), threads, [&](std::size_t i) {
    for (const auto& c : detail::cluster_group(std::move(groups[i]), cfg.cluster_iou)) {
      if (c.source_count < need) continue;
      for (auto& d : merge_cluster(c, cfg.merge_mode, cfg.nms_iou)) {
        d.source_id = std::string(kEnsembleSourceId);
        fused[i].push_back(std::move(d));
      }
    }
  });
  for (auto& f : fused) {
    for (auto& d : f) out.detections.push_back(std::move(d));
  }
  return canonical_order(std::move(out));
}

}  // namespace stagekit
