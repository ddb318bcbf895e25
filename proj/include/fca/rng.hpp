#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace fca {

// SplitMix64: a 64-bit counter-based generator. The state is a plain counter
// advanced by a fixed odd increment; every output is a finalizer hash of the
// counter, so identical seeds give identical streams on every platform.
// Substreams are derived by hashing a tag into the seed (mix_seed below).
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1) with 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // standard normal via Box-Muller; the paired draw is cached
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // normal(0, stddev) restricted to +-2 stddev by rejection
  double truncated_normal(double stddev) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * stddev;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Independent substream for (seed, tag), e.g. one stream per epoch or per
// rendered sample.
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  SplitMix64 g(seed ^ (0x9e3779b97f4a7c15ULL * (tag + 1)));
  return g.next_u64();
}

}  // namespace fca
