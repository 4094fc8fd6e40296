#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynavox {

using Real = double;

// Thrown on malformed files, bad configs, inconsistent datasets. CLI maps it
// to exit code 2.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] inline void check_failed(const char* file, int line, const char* expr,
                                      const std::string& msg) {
  std::ostringstream os;
  os << file << ":" << line << " check failed: " << expr;
  if (!msg.empty()) os << " — " << msg;
  throw std::logic_error(os.str());
}
}  // namespace detail

#define DVX_CHECK(cond)                                                 \
  do {                                                                  \
    if (!(cond)) ::dynavox::detail::check_failed(__FILE__, __LINE__, #cond, ""); \
  } while (0)

#define DVX_CHECK_MSG(cond, msg)                                        \
  do {                                                                  \
    if (!(cond)) ::dynavox::detail::check_failed(__FILE__, __LINE__, #cond, (msg)); \
  } while (0)

// Dense row-major real array. The only tensor type in the project; shapes are
// small (<= 4 dims) and known at runtime.
struct Array {
  std::vector<int> shape;
  std::vector<Real> data;

  Array() = default;
  explicit Array(std::vector<int> s) : shape(std::move(s)), data(count(shape), Real(0)) {}
  Array(std::vector<int> s, Real fill) : shape(std::move(s)), data(count(shape), fill) {}
  Array(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
    DVX_CHECK(static_cast<int64_t>(data.size()) == count(shape));
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      DVX_CHECK_MSG(d >= 0, "negative dimension");
      n *= d;
    }
    return n;
  }

  static Array scalar(Real v) { return Array({1}, std::vector<Real>{v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(shape.size()); }

  Real& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  Real operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2-D accessors (row-major).
  Real& at(int r, int c) { return data[static_cast<size_t>(r) * dim(1) + c]; }
  Real at(int r, int c) const { return data[static_cast<size_t>(r) * dim(1) + c]; }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(Real(0)); }

  bool same_shape(const Array& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (Real v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// splitmix64: used to derive independent stream seeds from (seed, salt) pairs
// so results do not depend on call ordering elsewhere.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic RNG. Wraps xoshiro-style splitmix chains rather than
// std::uniform_* distributions so streams are stable across standard
// libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc909ULL)) {}
  Rng(uint64_t seed, uint64_t stream) : Rng(seed ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1)) {}

  uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // Uniform in [0, 1).
  Real uniform() { return Real(next_u64() >> 11) * 0x1.0p-53; }

  Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    DVX_CHECK(n > 0);
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  Real normal() {
    // Box-Muller; one value per call keeps the stream simple to reason about.
    Real u1 = uniform();
    Real u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t state_;
};

}  // namespace dynavox
