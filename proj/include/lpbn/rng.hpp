#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace lpbn {

// Deterministic seedable generator. splitmix64 core with Box-Muller normals;
// self-contained because standard-library distributions are not bit-portable
// across implementations, and reproducibility contracts here are bitwise.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n), n > 0. Multiply-shift; bias is O(n/2^64), irrelevant here.
  std::uint64_t below(std::uint64_t n) {
    return std::uint64_t((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // u1 in (0,1] so the log is finite.
    double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = double(next_u64() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Student's t with 3 degrees of freedom: Z / sqrt(chi2(3)/3).
  double student_t3() {
    double z = normal();
    double a = normal(), b = normal(), c = normal();
    return z / std::sqrt((a * a + b * b + c * c) / 3.0);
  }

  // Independent stream derived from (this stream's seed, tag).
  Rng fork(std::uint64_t tag) const {
    Rng r(state_ ^ (0x6a09e667f3bcc909ull + tag * 0x9e3779b97f4a7c15ull));
    r.next_u64();
    return r;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = std::size_t(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lpbn
