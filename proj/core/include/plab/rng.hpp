#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace plab {

// All stochastic choices in the lab route through Rng. A stream is identified
// by (seed, purpose tag, index); distinct keys give statistically independent
// mt19937_64 states. The distribution helpers below are written out by hand
// because the std:: distributions are implementation-defined and would make
// datasets differ across standard libraries.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// FNV-1a over the tag bytes.
inline std::uint64_t hash_tag(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t stream_key(std::uint64_t seed, std::string_view tag,
                                std::uint64_t index = 0) {
  std::uint64_t s = seed;
  std::uint64_t a = splitmix64(s);
  s ^= hash_tag(tag);
  std::uint64_t b = splitmix64(s);
  s ^= index * 0xd6e8feb86659fd93ULL;
  std::uint64_t c = splitmix64(s);
  return a ^ (b << 1) ^ (c << 2) ^ c;
}

class Rng {
 public:
  explicit Rng(std::uint64_t key) : engine_(key) {}
  Rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0)
      : engine_(stream_key(seed, tag, index)) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n) by rejection; n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
    std::uint64_t x;
    do {
      x = next();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (one value per call, the pair is not cached
  // so that the stream position depends only on the call count).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> xs) {
    for (std::size_t i = xs.size(); i > 1; --i) {
      std::swap(xs[i - 1], xs[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace plab
