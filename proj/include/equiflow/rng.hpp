#pragma once

// Seeded streams. Every (seed, member, purpose) triple gets an independent
// std::mt19937_64 whose state is derived by splitmix64 mixing, so members and
// purposes can be replayed separately (e.g. two runs sharing a batch order
// while their group draws differ).

#include <array>
#include <cstdint>
#include <random>

#include "equiflow/group.hpp"

namespace equiflow {

enum class Stream : std::uint64_t {
  Init = 1,
  BatchOrder = 2,
  GroupDraws = 3,
  Data = 4,
  Probe = 5,
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Independent generator for one (seed, member, purpose).
inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t member, Stream purpose) {
  std::uint64_t s = seed;
  const std::uint64_t a = splitmix64(s);
  s ^= member * 0xd1b54a32d192ed03ULL;
  const std::uint64_t b = splitmix64(s);
  s ^= static_cast<std::uint64_t>(purpose) * 0x8cb92ba72f3d8dd7ULL;
  const std::uint64_t c = splitmix64(s);
  const std::uint64_t d = splitmix64(s);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(b >> 32), static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32),
                    static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(d >> 32)};
  return std::mt19937_64(seq);
}

/// Uniform (Haar) draw from a finite group.
template <class Rng>
Element draw_element(const FiniteGroup& g, Rng& rng) {
  return std::uniform_int_distribution<Element>(0, g.order() - 1)(rng);
}

}  // namespace equiflow
