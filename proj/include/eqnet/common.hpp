#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eqnet {

/// Tensor shape: one entry per axis, row-major layout throughout.
using Shape = std::vector<int64_t>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

/// API used outside its stated contract (wrong tape, non-scalar loss, ...).
struct ContractError : Error {
  using Error::Error;
};

/// Data carries values outside the documented domain (labels, pixels, ...).
struct ValidationError : Error {
  using Error::Error;
};

/// Bad run configuration (flags, presets, model geometry).
struct ConfigError : Error {
  using Error::Error;
};

/// File missing, unreadable, or structurally corrupt.
struct IoError : Error {
  using Error::Error;
};

/// A metric has no defined value on the given input (single-class AUC,
/// FROC with zero lesions).
struct UndefinedMetricError : Error {
  using Error::Error;
};

/// A numeric check exceeded its tolerance.
struct ToleranceError : Error {
  using Error::Error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}

template <class A, class... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <class Err, class... Args>
[[noreturn]] void fail(const Args&... args) {
  throw Err(cat(args...));
}

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// stride[k] = product of dims after k.
inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace eqnet
