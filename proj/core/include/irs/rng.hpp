#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace irs {

// All randomness in the library flows from one 64-bit run seed. Each consumer
// derives its own stream from (seed, purpose, index) so that adding a new
// consumer never shifts the numbers another one sees.
//
//   stream = mt19937_64(splitmix64(seed ^ fnv1a(purpose) ^ splitmix64(index)))

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

using Rng = std::mt19937_64;

inline Rng derive_stream(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(splitmix64(seed ^ fnv1a(purpose) ^ splitmix64(index)));
}

// Draw in [lo, hi] without relying on std::uniform_int_distribution, whose
// output is implementation-defined. Keeps artifacts identical across stdlibs.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // Lemire-style rejection; n > 0.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

inline std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

// 53-bit uniform in [0, 1).
inline double uniform_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Box-Muller; stateless so the stream position is easy to reason about.
double normal(Rng& rng, double mean, double stddev);

template <class T>
void shuffle(Rng& rng, T& container) {
  for (std::size_t i = container.size(); i > 1; --i) {
    std::size_t j = uniform_index(rng, i);
    using std::swap;
    swap(container[i - 1], container[j]);
  }
}

}  // namespace irs
