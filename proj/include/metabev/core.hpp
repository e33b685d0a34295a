#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace metabev {

using Shape = std::vector<int>;

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

inline long shape_size(const Shape& shape) {
  long n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Counter-based RNG used everywhere a seed appears in an interface.
// Deterministic across platforms, unlike std:: distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

  double gaussian() {
    // Box-Muller, always consumes two draws
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // n distinct values out of [0, pool) by partial Fisher-Yates
  std::vector<int> choose_distinct(int n, int pool) {
    if (n > pool) throw std::invalid_argument("choose_distinct: n > pool");
    std::vector<int> ids(pool);
    std::iota(ids.begin(), ids.end(), 0);
    for (int i = 0; i < n; ++i) {
      int j = i + uniform_int(pool - i);
      std::swap(ids[i], ids[j]);
    }
    ids.resize(n);
    return ids;
  }

  // derive an independent stream, e.g. per scene or per box
  Rng fork(std::uint64_t salt) const {
    Rng r(state_);
    r.state_ ^= salt * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
    return r;
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a(const void* data, size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace metabev
