#pragma once

#include <cstdint>

namespace pixsplat {

// Counter-based hashing: the same key always maps to the same value, so
// forward and backward passes draw identical decisions without storing them.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_key(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(a) ^ b) ^ c);
}

// Uniform in [0, 1) with 53 bits of resolution.
constexpr double unit_uniform(std::uint64_t bits) { return double(bits >> 11) * 0x1.0p-53; }

}  // namespace pixsplat
