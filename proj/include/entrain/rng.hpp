#ifndef ENTRAIN_RNG_HPP_
#define ENTRAIN_RNG_HPP_

#include <cstdint>
#include <random>
#include <string_view>

namespace entrain {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a. Used for stable (platform independent) hashing of names,
/// words and config payloads.
constexpr std::uint64_t fnv1a(std::string_view text,
                              std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named substream of a root seed ("split", "templates", "random-words",
/// "gumbel", "tasks", ...). Each stage draws from its own stream so stages
/// stay reproducible independently of each other.
inline Rng substream(std::uint64_t root_seed, std::string_view name) {
  return Rng(splitmix64(root_seed ^ fnv1a(name)));
}

/// Uniform draw from the open interval (0, 1).
inline double open_uniform(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  double u = dist(rng);
  while (u <= 0.0) u = dist(rng);
  return u;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(rng);
}

}  // namespace entrain

#endif  // ENTRAIN_RNG_HPP_
