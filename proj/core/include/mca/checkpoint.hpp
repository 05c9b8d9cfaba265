#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "MCAW"            4 bytes magic
//   version           u32 (currently 1)
//   tensor count      u32
//   per tensor:
//     name length     u16, then UTF-8 name bytes
//     rank            u8 (1..4)
//     dims            u32 each
//     values          IEEE-754 binary32 each
//
// The training step and seed travel as a reserved tensor named
// "__meta__" of 8 values: four 16-bit chunks of the step followed by four of
// the seed, lowest chunk first. binary32 holds each chunk exactly.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mca/tensor.hpp"

namespace mca {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<NamedTensor<float>> tensors;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;

  const NamedTensor<float>* find(const std::string& name) const;
};

std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::byte>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Whole-file read; throws IoError when the file cannot be opened.
std::vector<std::byte> read_file(const std::filesystem::path& path);

}  // namespace mca
