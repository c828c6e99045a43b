#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "shharm/nn/tensor.hpp"

namespace shharm::nn {

// Binary layout, little-endian:
//   "SHHCKPT1" | u32 version | u64 architecture hash | u32 count |
//   count x (u32 name length | name | u32 rank | rank x i32 dims | f32 payload)
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t architecture_hash = 0;
  std::vector<CheckpointEntry> entries;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace shharm::nn
