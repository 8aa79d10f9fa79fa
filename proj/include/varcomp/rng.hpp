#pragma once

// Keyed random substreams. A stream is a pure function of (seed, keys), so
// replicate b draws the same numbers whatever thread or order runs it.

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "varcomp/decomp.hpp"

namespace varcomp {

using Engine = std::mt19937_64;

inline Engine make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(2 * (keys.size() + 1));
  auto push = [&words](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v & 0xffffffffu));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(seed);
  for (auto k : keys) push(k);
  std::seed_seq seq(words.begin(), words.end());
  return Engine(seq);
}

/// SplitMix64 finalizer; derives child seeds from (seed, key).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t key) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (key + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Vector standard_normal(Engine& rng, Index n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

}  // namespace varcomp
