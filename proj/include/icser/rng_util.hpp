#pragma once

#include <cstdint>
#include <initializer_list>

namespace icser {

/// splitmix64 finalizer; fans a master seed out into independent streams.
inline std::uint64_t seed_mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t seed_mix(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t acc = 0x243f6a8885a308d3ull;
  for (std::uint64_t p : parts) acc = seed_mix(acc ^ p);
  return acc;
}

}  // namespace icser
