#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace metaforge {

using Rng = std::mt19937_64;

// splitmix64 finalizer over (seed, stream); derives independent substreams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

// 64-bit FNV-1a, stable across processes and platforms.
class StableHash {
 public:
  StableHash& add(std::uint64_t value);
  StableHash& add(std::string_view bytes);
  std::uint64_t value() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace metaforge
