#pragma once

// Shared helpers for the test binaries: seeded generators and scratch dirs.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stagekit/stagekit.hpp"

namespace stagekit::testing {

inline Detection make_det(const std::string& image, double score, BoundingBox box,
                          int category = 1, const std::string& source = "m") {
  return {image, category, score, box, std::nullopt, source};
}

inline Annotation make_ann(const std::string& image, BoundingBox box, int category = 1) {
  return {image, category, box, std::nullopt};
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(gen_); }
  std::mt19937_64& engine() { return gen_; }

  // Box with integer corners inside a w x h frame.
  BoundingBox grid_box(int w, int h) {
    const int x1 = integer(0, w - 1);
    const int y1 = integer(0, h - 1);
    return {double(x1), double(y1), double(integer(x1 + 1, w)), double(integer(y1 + 1, h))};
  }

  // Box with corners on a 2^-16 grid inside a w x h frame.
  BoundingBox dyadic_box(int w, int h) {
    constexpr double q = 1.0 / 65536.0;
    const auto cw = static_cast<std::int64_t>(w) * 65536;
    const auto ch = static_cast<std::int64_t>(h) * 65536;
    std::uniform_int_distribution<std::int64_t> dx(0, cw - 1), dy(0, ch - 1);
    const auto x1 = dx(gen_);
    const auto y1 = dy(gen_);
    const auto x2 = std::uniform_int_distribution<std::int64_t>(x1 + 1, cw)(gen_);
    const auto y2 = std::uniform_int_distribution<std::int64_t>(y1 + 1, ch)(gen_);
    return {x1 * q, y1 * q, x2 * q, y2 * q};
  }

  BinaryMask mask(int w, int h, double density = 0.4) {
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(w) * h);
    for (auto& b : bits) b = coin(density) ? 1 : 0;
    return rle_encode(bits, w, h);
  }

 private:
  std::mt19937_64 gen_;
};

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("stagekit_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  write_file_atomic(p, text);
}

}  // namespace stagekit::testing
