#pragma once

#include <cmath>
#include <cstdint>

namespace maple {

// One splitmix64 mixing step. Stateless, so it doubles as a counter-based
// generator: splitmix64(seed + i * golden) is the i-th value of the stream.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic random stream. Everything random in this codebase (parameter
// init, dropout masks, data synthesis, shuffling) draws from one of these, so
// runs are bit-reproducible across platforms. std::*_distribution is avoided
// on purpose: the standard does not pin its output sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // Uniform in [0, 1), 53 bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u in (0, 1] so the log never sees zero.
    double u = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    double a = 6.283185307179586476925287 * v;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Decorrelated child stream, so independent consumers (shuffling vs. dropout
// vs. init) can share one root seed without stepping on each other.
inline Rng seeded_stream(std::uint64_t root, std::uint64_t stream) {
  return Rng(splitmix64(root ^ splitmix64(stream + 0x51ed2701a39b86c1ULL)));
}

}  // namespace maple
