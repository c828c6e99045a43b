#include "shharm/nn/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "shharm/error.hpp"

namespace shharm::nn {

namespace {

constexpr std::array<char, 8> kMagic{'S', 'H', 'H', 'C', 'K', 'P', 'T', '1'};

template <typename U>
void put(std::ostream& out, U value) {
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::filesystem::path& path) {
  std::array<unsigned char, sizeof(U)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), sizeof(U));
  if (!in) throw IoError("truncated checkpoint " + path.string());
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  return std::bit_cast<U>(bytes);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, ckpt.version);
  put<std::uint64_t>(out, ckpt.architecture_hash);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (numel(e.shape) != e.values.size()) throw ValidationError("checkpoint entry '" + e.name + "' has inconsistent shape");
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) put<std::int32_t>(out, d);
    for (float v : e.values) put<float>(out, v);
  }
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw IoError(path.string() + " is not a checkpoint file");
  Checkpoint ckpt;
  ckpt.version = get<std::uint32_t>(in, path);
  if (ckpt.version != 1) throw IoError("unsupported checkpoint version " + std::to_string(ckpt.version));
  ckpt.architecture_hash = get<std::uint64_t>(in, path);
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = get<std::uint32_t>(in, path);
    if (len > 4096) throw IoError("corrupt parameter name in " + path.string());
    e.name.resize(len);
    in.read(e.name.data(), len);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw IoError("corrupt parameter rank in " + path.string());
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get<std::int32_t>(in, path));
    e.values.resize(numel(e.shape));
    for (auto& v : e.values) v = get<float>(in, path);
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

}  // namespace shharm::nn
