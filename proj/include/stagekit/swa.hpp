#pragma once

// Stochastic weight averaging over checkpoint tensor archives.
//
// Archive layout (all integers little-endian):
//   bytes 0..3   magic "SWA1"
//   bytes 4..11  u64 header length N
//   next N bytes UTF-8 JSON list of {"name", "shape", "offset", "length"}
//   remainder    payload; each tensor occupies `length` bytes starting at
//                payload byte `offset`, stored as row-major f32
//
// Writers lay tensors out contiguously in archive order.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stagekit/core.hpp"
#include "stagekit/error.hpp"
#include "stagekit/io.hpp"

namespace stagekit {

inline constexpr std::string_view kArchiveMagic = "SWA1";

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Entries keep their insertion order; names are unique.
struct TensorArchive {
  std::vector<Tensor> entries;

  const Tensor* find(std::string_view name) const {
    for (const auto& t : entries) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  friend bool operator==(const TensorArchive&, const TensorArchive&) = default;
};

inline std::string shape_string(std::span<const std::uint64_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Structural and numeric checks: unique names, positive dims, data length
// matching the shape, finite values.
inline void check_archive(const TensorArchive& a, const std::string& origin) {
  std::set<std::string_view> names;
  for (const auto& t : a.entries) {
    if (!names.insert(t.name).second) {
      throw ValidationError(origin + ": duplicate tensor name '" + t.name + "'");
    }
    for (auto d : t.shape) {
      if (d == 0) throw ValidationError(origin + ": tensor '" + t.name + "' has a zero dimension");
    }
    if (t.data.size() != t.element_count()) {
      throw ValidationError(origin + ": tensor '" + t.name + "' holds " +
                            std::to_string(t.data.size()) + " values, shape " +
                            shape_string(t.shape) + " needs " +
                            std::to_string(t.element_count()));
    }
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      if (!std::isfinite(t.data[i])) {
        throw ValidationError(origin + ": tensor '" + t.name + "' has a non-finite value at index " +
                              std::to_string(i));
      }
    }
  }
}

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string encode_archive(const TensorArchive& a) {
  check_archive(a, "archive");
  nlohmann::json header = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : a.entries) {
    const std::uint64_t length = 4 * static_cast<std::uint64_t>(t.data.size());
    header.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"length", length}});
    offset += length;
  }
  const std::string header_bytes = header.dump();
  std::string out(kArchiveMagic);
  detail::put_u64_le(out, header_bytes.size());
  out += header_bytes;
  out.reserve(out.size() + offset);
  for (const auto& t : a.entries) {
    for (float f : t.data) detail::put_f32_le(out, f);
  }
  return out;
}

inline TensorArchive decode_archive(std::string_view bytes, const std::string& origin) {
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12 || bytes.substr(0, 4) != kArchiveMagic) {
    throw IoError(origin + ": not an SWA1 archive (bad magic)");
  }
  const std::uint64_t header_len = detail::get_u64_le(raw + 4);
  if (header_len > bytes.size() - 12) {
    throw IoError(origin + ": malformed header: length " + std::to_string(header_len) +
                  " exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(origin + ": malformed header: " + e.what());
  }
  if (!header.is_array()) throw IoError(origin + ": malformed header: expected a list");

  const std::uint64_t payload_start = 12 + header_len;
  const std::uint64_t payload_size = bytes.size() - payload_start;
  TensorArchive a;
  a.entries.reserve(header.size());
  for (const auto& h : header) {
    std::string name;
    std::vector<std::uint64_t> shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    try {
      name = h.at("name").get<std::string>();
      shape = h.at("shape").get<std::vector<std::uint64_t>>();
      offset = h.at("offset").get<std::uint64_t>();
      length = h.at("length").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(origin + ": malformed header entry: " + e.what());
    }
    Tensor t{name, shape, {}};
    const std::uint64_t expected = 4 * t.element_count();
    if (length != expected) {
      throw IoError(origin + ": length mismatch for tensor '" + name + "': header says " +
                    std::to_string(length) + " bytes, shape " + shape_string(shape) +
                    " needs " + std::to_string(expected));
    }
    if (offset > payload_size || length > payload_size - offset) {
      throw IoError(origin + ": length mismatch for tensor '" + name + "': payload truncated (" +
                    std::to_string(payload_size) + " bytes available, tensor ends at " +
                    std::to_string(offset + length) + ")");
    }
    t.data.resize(length / 4);
    const unsigned char* p = raw + payload_start + offset;
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = detail::get_f32_le(p + 4 * i);
    a.entries.push_back(std::move(t));
  }
  check_archive(a, origin);
  return a;
}

inline TensorArchive read_archive(const std::filesystem::path& path) {
  return decode_archive(read_file(path), path.string());
}

inline void write_archive(const TensorArchive& a, const std::filesystem::path& path) {
  write_file_atomic(path, encode_archive(a));
}

// Elementwise uniform mean. Each element is accumulated in double over the
// values sorted ascending, so the result does not depend on archive order,
// then rounded once to f32.
inline TensorArchive average_archives(std::span<const TensorArchive> archives,
                                      std::size_t threads = 1) {
  if (archives.empty()) throw ValidationError("average_archives: no archives");
  const auto& ref = archives.front();
  for (std::size_t k = 1; k < archives.size(); ++k) {
    const auto& other = archives[k];
    std::set<std::string> a_names, b_names;
    for (const auto& t : ref.entries) a_names.insert(t.name);
    for (const auto& t : other.entries) b_names.insert(t.name);
    if (a_names != b_names) {
      std::string diff;
      for (const auto& n : a_names) {
        if (!b_names.count(n)) diff += (diff.empty() ? "" : ", ") + n;
      }
      for (const auto& n : b_names) {
        if (!a_names.count(n)) diff += (diff.empty() ? "" : ", ") + n;
      }
      throw ValidationError("tensor name sets differ between archive 0 and archive " +
                            std::to_string(k) + ": {" + diff + "}");
    }
    for (const auto& t : ref.entries) {
      const auto* o = other.find(t.name);
      if (o->shape != t.shape) {
        throw ValidationError("shape mismatch for tensor '" + t.name + "': " +
                              shape_string(t.shape) + " vs " + shape_string(o->shape));
      }
    }
  }
  if (archives.size() == 1) return ref;

  TensorArchive out;
  out.entries.resize(ref.entries.size());
  parallel_for(ref.entries.size(), threads, [&](std::size_t e) {
    const auto& t = ref.entries[e];
    std::vector<const Tensor*> sources;
    sources.reserve(archives.size());
    for (const auto& a : archives) sources.push_back(a.find(t.name));
    Tensor avg{t.name, t.shape, std::vector<float>(t.data.size())};
    std::vector<double> column(archives.size());
    const double k = static_cast<double>(archives.size());
    for (std::size_t i = 0; i < avg.data.size(); ++i) {
      for (std::size_t s = 0; s < sources.size(); ++s) column[s] = sources[s]->data[i];
      std::sort(column.begin(), column.end());
      double sum = 0.0;
      for (double v : column) sum += v;
      avg.data[i] = static_cast<float>(sum / k);
    }
    out.entries[e] = std::move(avg);
  });
  return out;
}

}  // namespace stagekit
