// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0
//
// Keyed random streams. Every (seed, tensor name, constituent index) triple maps
// to its own generator, so the values drawn for a tensor never depend on which
// other tensors were processed before it or on which thread ran it.
//
// Contract (fixed; changing it changes every DARE output):
//   key    = mix64(splitmix64(seed) ^ mix64(fnv1a64(name)) ^ mix64(index + 1))
//   engine = std::mt19937_64 seeded with key
//   u      = (engine() >> 11) * 2^-53   in [0, 1)

#ifndef MERGEBENCH_RNG_HPP
#define MERGEBENCH_RNG_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <utility>
#include <string_view>

namespace mergebench::rng {

inline constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t hash = 0xcbf29ce484222325ull;
  for (char c : text) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ull;
  }
  return hash;
}

// SplitMix64 output function.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t splitmix64(std::uint64_t seed) { return mix64(seed + 0x9e3779b97f4a7c15ull); }

inline constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view name, std::uint64_t index) {
  return mix64(splitmix64(seed) ^ mix64(fnv1a64(name)) ^ mix64(index + 1));
}

using Engine = std::mt19937_64;

inline Engine make_stream(std::uint64_t seed, std::string_view name, std::uint64_t index) {
  return Engine(stream_key(seed, name, index));
}

inline double uniform01(Engine& engine) { return static_cast<double>(engine() >> 11) * 0x1.0p-53; }

// Box-Muller on two uniform draws; written out so results do not depend on the
// standard library's distribution implementations.
inline double standard_normal(Engine& engine) {
  double u1 = uniform01(engine);
  while (u1 <= 0.0) u1 = uniform01(engine);
  const double u2 = uniform01(engine);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Fisher-Yates with uniform01 draws.
template <class Vec>
void shuffle(Vec& items, Engine& engine) {
  for (std::size_t i = items.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(uniform01(engine) * static_cast<double>(i));
    if (j >= i) j = i - 1;
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace mergebench::rng

#endif  // MERGEBENCH_RNG_HPP
