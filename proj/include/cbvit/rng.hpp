#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace cbvit {

// Deterministic random source. std::mt19937_64 has a pinned spec, but the
// standard distributions are implementation-defined, so all transforms are
// done by hand here to keep runs reproducible across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform in (0, 1], safe as a log() argument
  double uniform_pos() { return static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive integer range, rejection sampled to stay unbiased
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("rng: empty integer range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi) - lo + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
  }

  bool coin() { return (gen_() & 1u) != 0; }

  // standard normal via Box-Muller (no caching, fixed draw count of 2)
  double normal() {
    const double u1 = uniform_pos();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // normal(0, std_dev) resampled until within clip standard deviations
  double trunc_normal(double std_dev, double clip = 2.0) {
    while (true) {
      const double z = normal();
      if (std::abs(z) <= clip) return z * std_dev;
    }
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      const int j = uniform_int(0, static_cast<int>(i));
      std::swap(first[i], first[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace cbvit
