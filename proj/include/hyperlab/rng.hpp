#pragma once

#include <cstdint>
#include <random>

namespace hyperlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named streams keep unrelated consumers of one seed independent.
enum class Stream : std::uint64_t {
  Init = 1,
  TrainSamples = 2,
  TestSamples = 3,
  Shuffle = 4,
  PcGrad = 5,
  Probe = 6,
};

// Generator keyed by (seed, stream, index). Each key gives an independent
// sequence, so parallel consumers are order-independent.
inline std::mt19937_64 keyed_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
  std::uint64_t k = splitmix64(seed);
  k = splitmix64(k ^ static_cast<std::uint64_t>(stream));
  k = splitmix64(k ^ index);
  return std::mt19937_64(k);
}

}  // namespace hyperlab
