#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace shharm {

using Vec3 = std::array<double, 3>;

// b-values at or below this are treated as non-diffusion-weighted.
inline constexpr double kB0Threshold = 1.0;

struct Grid {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * z);
  }
  std::array<int, 3> coords(std::size_t voxel) const {
    const int x = static_cast<int>(voxel % nx);
    const int y = static_cast<int>((voxel / nx) % ny);
    const int z = static_cast<int>(voxel / (static_cast<std::size_t>(nx) * ny));
    return {x, y, z};
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  friend bool operator==(const Grid&, const Grid&) = default;
};

// Dense 4D float image stored frame by frame, x fastest inside a frame. This
// is also the on-disk order of the raw container.
class Image4 {
 public:
  Image4() = default;
  Image4(Grid grid, int frames, float fill = 0.0f);

  const Grid& grid() const { return grid_; }
  int frames() const { return frames_; }
  std::size_t size() const { return data_.size(); }

  float& at(std::size_t voxel, int frame) { return data_[frame * grid_.voxels() + voxel]; }
  float at(std::size_t voxel, int frame) const { return data_[frame * grid_.voxels() + voxel]; }
  float& at(int x, int y, int z, int frame) { return at(grid_.index(x, y, z), frame); }
  float at(int x, int y, int z, int frame) const { return at(grid_.index(x, y, z), frame); }

  // Gathers all frames of one voxel.
  void read_voxel(std::size_t voxel, std::span<float> out) const;
  void write_voxel(std::size_t voxel, std::span<const float> values);

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::span<const float> frame(int f) const {
    return std::span<const float>(data_).subspan(f * grid_.voxels(), grid_.voxels());
  }

 private:
  Grid grid_;
  int frames_ = 0;
  std::vector<float> data_;
};

struct GradientTable {
  std::vector<double> bvals;  // s/mm^2
  std::vector<Vec3> bvecs;

  std::size_t size() const { return bvals.size(); }
  bool is_b0(std::size_t i) const { return bvals[i] <= kB0Threshold; }

  std::vector<int> b0_indices() const;
  std::vector<int> dw_indices() const;

  // Checks lengths, unit norms on weighted entries, and that at least one b0
  // and `min_weighted` weighted entries are present.
  void validate(std::size_t min_weighted = 15) const;

  // The diffusion-weighted rows only, in acquisition order.
  GradientTable diffusion_weighted() const;
  std::vector<Vec3> directions() const;
};

// FSL layout: one row of b-values, three rows (x, y, z) of vector components.
GradientTable read_fsl_gradients(const std::filesystem::path& bval, const std::filesystem::path& bvec);
void write_fsl_gradients(const std::filesystem::path& bval, const std::filesystem::path& bvec,
                         const GradientTable& table);

enum class Tissue : std::uint8_t { kBackground = 0, kGrey = 1, kWhite = 2 };

struct TissueMask {
  Grid grid;
  std::vector<std::uint8_t> labels;

  TissueMask() = default;
  explicit TissueMask(Grid g) : grid(g), labels(g.voxels(), 0) {}

  bool in_tissue(std::size_t voxel) const { return labels[voxel] == 1 || labels[voxel] == 2; }
  std::size_t count() const;
  std::size_t count(Tissue t) const;
};

struct DwiVolume {
  Image4 data;
  Vec3 voxel_size_mm{1.0, 1.0, 1.0};
  GradientTable table;

  void validate() const;
};

struct NormalizedDwi {
  Image4 signal;               // attenuations of the weighted entries
  std::vector<float> mean_b0;  // one per voxel
  GradientTable table;         // weighted entries only
  Vec3 voxel_size_mm{1.0, 1.0, 1.0};
};

// Raw container ---------------------------------------------------------------

enum class DType { kF32, kU8 };

struct VolumeFile {
  std::array<int, 4> dims{0, 0, 0, 0};
  DType dtype = DType::kF32;
  Vec3 voxel_size_mm{1.0, 1.0, 1.0};
  nlohmann::json sidecar;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
};

// Accepts the stem, the .raw payload or the .json sidecar path.
std::filesystem::path volume_stem(const std::filesystem::path& path);
std::filesystem::path payload_path(const std::filesystem::path& stem);
std::filesystem::path sidecar_path(const std::filesystem::path& stem);

VolumeFile read_volume_file(const std::filesystem::path& path);
void write_volume_file(const std::filesystem::path& path, const VolumeFile& file);

Image4 load_image(const std::filesystem::path& path, Vec3* voxel_size = nullptr,
                  nlohmann::json* sidecar = nullptr);
void save_image(const std::filesystem::path& path, const Image4& image, const Vec3& voxel_size,
                const nlohmann::json& extra = nlohmann::json::object());

TissueMask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const TissueMask& mask, const Vec3& voxel_size);

DwiVolume load_volume(const std::filesystem::path& path, GradientTable table);
void save_volume(const std::filesystem::path& path, const DwiVolume& volume);

// Preprocessing -----------------------------------------------------------------

NormalizedDwi normalize_b0(const DwiVolume& volume, const TissueMask& mask);

// Patches -----------------------------------------------------------------------

inline constexpr int kPatchSide = 3;
inline constexpr int kPatchTaps = 27;

// Tap index for neighbour offset (dx, dy, dz) in {-1, 0, 1}; z slowest.
constexpr int patch_tap(int dx, int dy, int dz) { return (dz + 1) * 9 + (dy + 1) * 3 + (dx + 1); }

struct Patch {
  std::array<int, 3> center{0, 0, 0};
  std::vector<float> values;  // [channel][tap]
};

// Tissue voxels (label 1 or 2) in raster order, x fastest.
std::vector<std::size_t> tissue_voxels(const TissueMask& mask);

// Writes the 3x3x3 neighbourhood of `voxel` into `out` ([channels][27]).
// Neighbours outside the grid or outside the tissue mask are zero.
void extract_patch(const Image4& channels, const TissueMask& mask, std::size_t voxel, std::span<float> out);

// Lazily yields one patch per tissue voxel in raster order.
class PatchStream {
 public:
  PatchStream(const Image4& channels, const TissueMask& mask);

  std::optional<Patch> next();
  std::size_t size() const { return voxels_.size(); }

 private:
  const Image4* channels_;
  const TissueMask* mask_;
  std::vector<std::size_t> voxels_;
  std::size_t cursor_ = 0;
};

PatchStream extract_patches(const Image4& channels, const TissueMask& mask);

}  // namespace shharm
