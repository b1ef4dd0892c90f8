#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <utility>

namespace mtl {

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based generator: the n-th draw of a stream is mix64(key + n * gamma),
// so any draw can be reproduced from (key, n) alone. Substreams are keyed by
// seed ^ index, which keeps per-task and per-sample randomness independent of
// evaluation order and of the number of threads.
//
// Distributions are implemented here rather than with <random> so that
// artifacts are bit-identical across standard libraries.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t seed) noexcept : key_(mix64(seed)) {}

  static constexpr CounterRng substream(std::uint64_t seed, std::uint64_t index) noexcept {
    return CounterRng(seed ^ index);
  }
  constexpr CounterRng substream(std::uint64_t index) const noexcept {
    CounterRng child(0);
    child.key_ = mix64(key_ ^ mix64(index + kGamma));
    return child;
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept { return mix64(key_ + (++counter_) * kGamma); }

  constexpr std::uint64_t counter() const noexcept { return counter_; }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n), Lemire's multiply-and-reject.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>((*this)()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform01() < p; }

  // Standard normal via Box-Muller; consumes two draws, returns one value.
  double normal() noexcept {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace mtl
