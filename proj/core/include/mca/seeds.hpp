#pragma once

#include <cstdint>

namespace mca {

// Every random stream derives from the single run seed by a fixed offset.
inline constexpr std::uint64_t kBackboneSeedOffset = 0;
inline constexpr std::uint64_t kAttentionSeedOffset = 1;
inline constexpr std::uint64_t kShuffleSeedOffset = 2;
inline constexpr std::uint64_t kAugmentSeedOffset = 3;
inline constexpr std::uint64_t kSyntheticDataSeedOffset = 4;

/// Independent stream seed for item `index` (epoch, step...) of a subsystem.
inline constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t offset, std::uint64_t index = 0) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = seed + offset * 0x9E3779B97F4A7C15ull + index * 0xD1B54A32D192ED03ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace mca
