#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

// Counter-based random number generation. Every draw is a pure function of a
// seed plus counters, so generation is order-independent, replayable from a
// checkpoint without serialized engine state, and safe to call concurrently.

namespace cpm {

constexpr double kPi = 3.14159265358979323846;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stable per-component seed derivation: one master seed fans out to every
// subsystem by name.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view component) {
  return splitmix64(master ^ fnv1a(component));
}

namespace detail {
inline std::uint64_t mix(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                         std::uint64_t c) {
  std::uint64_t h = seed;
  h = splitmix64(h ^ (a * 0x9e3779b97f4a7c15ULL + 1));
  h = splitmix64(h ^ (b * 0xc2b2ae3d27d4eb4fULL + 2));
  h = splitmix64(h ^ (c * 0x165667b19e3779f9ULL + 3));
  return h;
}
}  // namespace detail

// Stateless generator: a fixed key plus user-supplied counters select a draw.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t bits(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    return detail::mix(seed_, a, b, c);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    return static_cast<double>(bits(a, b, c) >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n) via 128-bit multiply-shift.
  std::uint64_t uniform_int(std::uint64_t n, std::uint64_t a, std::uint64_t b = 0,
                            std::uint64_t c = 0) const {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(bits(a, b, c)) * n) >> 64);
  }

  // Standard normal via Box-Muller on two decorrelated substreams.
  double normal(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) const {
    double u1 = static_cast<double>(detail::mix(seed_, a, b, c * 2 + 11) >> 11) * 0x1.0p-53;
    double u2 = static_cast<double>(detail::mix(seed_, a, b, c * 2 + 12) >> 11) * 0x1.0p-53;
    if (u1 <= 0x1.0p-60) u1 = 0x1.0p-60;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

}  // namespace cpm
