#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace foamqc {

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

// Order-sensitive seed derivation: mix_seed(a, b, c) differs from mix_seed(b, a, c).
template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t first, Rest... rest) {
  std::uint64_t h = splitmix64(first);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(rest))), ...);
  return h;
}

using Rng = std::mt19937_64;

}  // namespace foamqc
