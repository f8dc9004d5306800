#pragma once

#include <cstdint>
#include <random>

namespace planeloc {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to decorrelate derived seeds.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic per-item seed, e.g. per query or per primitive.
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
  return mix_seed(base ^ mix_seed(index + 1));
}

inline Rng make_rng(uint64_t seed) { return Rng(mix_seed(seed)); }

} // namespace planeloc
