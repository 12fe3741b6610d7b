#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pix4cap {

// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view text,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

// Every random stream in the project is seeded as `seed + fnv1a64(name)`,
// so a single user-facing seed fans out into independent named streams.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return seed + fnv1a64(name);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                 std::uint64_t index) {
  return derive_seed(seed, name) * 0x9e3779b97f4a7c15ULL + index;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::string_view name) {
  return Rng(derive_seed(seed, name));
}

}  // namespace pix4cap
