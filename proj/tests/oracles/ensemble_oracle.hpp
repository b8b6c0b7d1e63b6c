#pragma once

// Exhaustive ensemble oracle for tiny inputs: enumerates every set partition
// of one (image, category) group and keeps the unique partition consistent
// with the greedy compare-to-seed rule, then filters and merges it.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <set>
#include <vector>

#include "stagekit/core.hpp"

namespace oracle {

struct Item {
  stagekit::Detection det;
  std::size_t source;
};

// All set partitions of {0..n-1} as block-label vectors (restricted growth
// strings).
inline std::vector<std::vector<int>> all_partitions(std::size_t n) {
  std::vector<std::vector<int>> out;
  std::vector<int> labels(n, 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int max_label) {
    if (i == n) {
      out.push_back(labels);
      return;
    }
    for (int l = 0; l <= max_label + 1; ++l) {
      labels[i] = l;
      rec(i + 1, std::max(max_label, l));
    }
  };
  if (n == 0) return {{}};
  rec(0, -1);
  return out;
}

// `items` must already be in detection_precedes order. A partition is
// greedy-consistent iff every block's first item is its seed and each item
// belongs to the earliest-seeded block whose seed precedes it with
// IoU >= thr, or seeds its own block when no such seed exists.
inline std::vector<std::vector<std::size_t>> greedy_partition(const std::vector<Item>& items,
                                                              double thr) {
  const std::size_t n = items.size();
  std::vector<std::vector<std::size_t>> found;
  int matches = 0;
  for (const auto& labels : all_partitions(n)) {
    const int blocks = n ? *std::max_element(labels.begin(), labels.end()) + 1 : 0;
    std::vector<std::size_t> seed(static_cast<std::size_t>(blocks), n);
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = seed[static_cast<std::size_t>(labels[i])];
      if (s == n) s = i;
    }
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      // earliest seed before i that i overlaps enough
      std::size_t want = n;
      std::vector<std::size_t> seeds_sorted(seed.begin(), seed.end());
      std::sort(seeds_sorted.begin(), seeds_sorted.end());
      for (std::size_t s : seeds_sorted) {
        if (s >= i) break;
        if (stagekit::box_iou(items[s].det.box, items[i].det.box) >= thr) {
          want = s;
          break;
        }
      }
      const std::size_t my_seed = seed[static_cast<std::size_t>(labels[i])];
      if (want == n) {
        ok = my_seed == i;
      } else {
        ok = my_seed == want;
      }
    }
    if (ok) {
      ++matches;
      found.assign(static_cast<std::size_t>(blocks), {});
      for (std::size_t i = 0; i < n; ++i) found[static_cast<std::size_t>(labels[i])].push_back(i);
    }
  }
  if (matches != 1) return {};  // caller asserts non-empty for non-empty input
  std::sort(found.begin(), found.end());
  return found;
}

inline std::size_t distinct_sources(const std::vector<Item>& items,
                                    const std::vector<std::size_t>& block) {
  std::set<std::size_t> s;
  for (auto i : block) s.insert(items[i].source);
  return s.size();
}

}  // namespace oracle
