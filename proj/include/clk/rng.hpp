#pragma once

#include <cstdint>
#include <random>

namespace clk {

/// splitmix64 step; used to turn (seed, index) pairs into well-separated
/// generator seeds so per-sample streams can run in any order.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(a) ^ (b + 0x9e3779b97f4a7c15ULL));
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix64(mix64(a, b) ^ (c + 0x517cc1b727220a95ULL));
}

/// Independent RNG stream for one (seed, index) pair. Results are identical
/// regardless of the order or thread the streams are consumed in.
inline std::mt19937_64 derive_stream(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(mix64(seed, index));
}

inline std::mt19937_64 derive_stream(std::uint64_t seed, std::uint64_t a,
                                     std::uint64_t b) {
  return std::mt19937_64(mix64(seed, a, b));
}

}  // namespace clk
