#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eqnet/tensor.hpp"

namespace eqnet {

static_assert(std::endian::native == std::endian::little,
              "EQT1 containers are little-endian; big-endian hosts are unsupported");

// EQT1 tensor container: "EQT1" magic, u8 dtype code, u8 rank,
// rank x u64 little-endian dims, raw little-endian payload.
enum class EqtDtype : uint8_t { U8 = 0, F32 = 1, F64 = 2 };

namespace detail {
template <class T>
constexpr EqtDtype eqt_dtype();
template <>
constexpr EqtDtype eqt_dtype<uint8_t>() {
  return EqtDtype::U8;
}
template <>
constexpr EqtDtype eqt_dtype<float>() {
  return EqtDtype::F32;
}
template <>
constexpr EqtDtype eqt_dtype<double>() {
  return EqtDtype::F64;
}

inline void write_eqt_stream(std::ostream& os, EqtDtype dtype, const Shape& shape,
                             const void* payload, size_t bytes) {
  os.write("EQT1", 4);
  const uint8_t code = static_cast<uint8_t>(dtype);
  const uint8_t rank = static_cast<uint8_t>(shape.size());
  os.write(reinterpret_cast<const char*>(&code), 1);
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int64_t d : shape) {
    const uint64_t u = static_cast<uint64_t>(d);
    os.write(reinterpret_cast<const char*>(&u), 8);
  }
  os.write(reinterpret_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
}

struct EqtHeader {
  EqtDtype dtype;
  Shape shape;
};

inline EqtHeader read_eqt_header(std::istream& is, const std::string& path) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "EQT1", 4) != 0)
    fail<IoError>(path, ": not an EQT1 container (bad magic)");
  uint8_t code = 0, rank = 0;
  is.read(reinterpret_cast<char*>(&code), 1);
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is || code > 2) fail<IoError>(path, ": unknown dtype code ", int(code));
  Shape shape(rank);
  for (auto& d : shape) {
    uint64_t u = 0;
    is.read(reinterpret_cast<char*>(&u), 8);
    d = static_cast<int64_t>(u);
  }
  if (!is) fail<IoError>(path, ": truncated header");
  return {static_cast<EqtDtype>(code), std::move(shape)};
}
}  // namespace detail

/// Minimal `key = value` text format used by manifests and run configs.
/// Lines starting with '#' and blank lines are ignored.
inline std::vector<std::pair<std::string, std::string>> read_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail<IoError>("cannot open ", path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      fail<IoError>(path, ":", lineno, ": expected 'key = value', got '", t, "'");
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

inline std::string kv_lookup(const std::vector<std::pair<std::string, std::string>>& kv,
                             const std::string& key, const std::string& path) {
  for (const auto& [k, v] : kv)
    if (k == key) return v;
  fail<IoError>(path, ": missing key '", key, "'");
}

/// Writes data through `fill` into a temp file, then renames into place, so
/// interrupted runs never leave truncated artifacts.
inline void atomic_write(const std::string& path,
                         const std::function<void(std::ostream&)>& fill) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail<IoError>("cannot open ", tmp.string(), " for writing");
    fill(os);
    if (!os) fail<IoError>("write failed on ", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail<IoError>("rename ", tmp.string(), " -> ", path, ": ", ec.message());
}

template <class T>
void write_eqt(const std::string& path, const Tensor<T>& t) {
  atomic_write(path, [&](std::ostream& os) {
    detail::write_eqt_stream(os, detail::eqt_dtype<T>(), t.shape(), t.data().data(),
                             t.data().size() * sizeof(T));
  });
}

inline void write_eqt_u8(const std::string& path, const Shape& shape,
                         std::span<const uint8_t> payload) {
  if (numel(shape) != static_cast<int64_t>(payload.size()))
    fail<DimensionError>("write_eqt_u8: shape ", shape_str(shape), " vs ", payload.size(),
                         " bytes");
  atomic_write(path, [&](std::ostream& os) {
    detail::write_eqt_stream(os, EqtDtype::U8, shape, payload.data(), payload.size());
  });
}

template <class T>
Tensor<T> read_eqt(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail<IoError>("cannot open ", path);
  const auto hdr = detail::read_eqt_header(is, path);
  if (hdr.dtype != detail::eqt_dtype<T>())
    fail<IoError>(path, ": dtype code ", int(static_cast<uint8_t>(hdr.dtype)),
                  " does not match requested element type");
  std::vector<T> payload(static_cast<size_t>(numel(hdr.shape)));
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(T)));
  if (!is) fail<IoError>(path, ": truncated payload, expected ", payload.size(), " values");
  return Tensor<T>(hdr.shape, std::move(payload));
}

inline std::pair<Shape, std::vector<uint8_t>> read_eqt_u8(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail<IoError>("cannot open ", path);
  const auto hdr = detail::read_eqt_header(is, path);
  if (hdr.dtype != EqtDtype::U8) fail<IoError>(path, ": expected u8 payload");
  std::vector<uint8_t> payload(static_cast<size_t>(numel(hdr.shape)));
  is.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!is) fail<IoError>(path, ": truncated payload, expected ", payload.size(), " bytes");
  return {hdr.shape, std::move(payload)};
}

}  // namespace eqnet
