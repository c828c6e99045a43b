#include "shharm/dwi_core.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "shharm/error.hpp"

namespace shharm {

namespace fs = std::filesystem;

Image4::Image4(Grid grid, int frames, float fill)
    : grid_(grid), frames_(frames), data_(grid.voxels() * static_cast<std::size_t>(frames), fill) {}

void Image4::read_voxel(std::size_t voxel, std::span<float> out) const {
  const std::size_t stride = grid_.voxels();
  for (int f = 0; f < frames_; ++f) out[f] = data_[f * stride + voxel];
}

void Image4::write_voxel(std::size_t voxel, std::span<const float> values) {
  const std::size_t stride = grid_.voxels();
  for (int f = 0; f < frames_; ++f) data_[f * stride + voxel] = values[f];
}

// Gradient tables -----------------------------------------------------------

std::vector<int> GradientTable::b0_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < bvals.size(); ++i)
    if (is_b0(i)) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> GradientTable::dw_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < bvals.size(); ++i)
    if (!is_b0(i)) out.push_back(static_cast<int>(i));
  return out;
}

void GradientTable::validate(std::size_t min_weighted) const {
  if (bvals.empty()) throw ValidationError("gradient table is empty");
  if (bvals.size() != bvecs.size())
    throw ValidationError("gradient table has " + std::to_string(bvals.size()) + " b-values but " +
                          std::to_string(bvecs.size()) + " vectors");
  std::size_t weighted = 0;
  for (std::size_t i = 0; i < bvals.size(); ++i) {
    if (!std::isfinite(bvals[i]) || bvals[i] < 0.0)
      throw ValidationError("invalid b-value at entry " + std::to_string(i));
    if (is_b0(i)) continue;
    ++weighted;
    const auto& g = bvecs[i];
    const double norm = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    if (std::abs(norm - 1.0) > 1e-6)
      throw ValidationError("gradient direction " + std::to_string(i) + " is not unit length (norm " +
                            std::to_string(norm) + ")");
  }
  if (weighted == bvals.size()) throw ValidationError("gradient table has no b=0 entry");
  if (weighted < min_weighted)
    throw ValidationError("gradient table has " + std::to_string(weighted) +
                          " diffusion-weighted entries, need at least " + std::to_string(min_weighted));
}

GradientTable GradientTable::diffusion_weighted() const {
  GradientTable out;
  for (int i : dw_indices()) {
    out.bvals.push_back(bvals[i]);
    out.bvecs.push_back(bvecs[i]);
  }
  return out;
}

std::vector<Vec3> GradientTable::directions() const {
  std::vector<Vec3> out;
  for (int i : dw_indices()) out.push_back(bvecs[i]);
  return out;
}

namespace {

std::vector<std::vector<double>> read_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string token;
    while (ls >> token) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(token, &used));
        if (used != token.size()) throw std::invalid_argument(token);
      } catch (const std::exception&) {
        throw IoError("malformed number '" + token + "' in " + path.string());
      }
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

GradientTable read_fsl_gradients(const fs::path& bval, const fs::path& bvec) {
  const auto bval_rows = read_rows(bval);
  const auto bvec_rows = read_rows(bvec);
  if (bval_rows.size() != 1) throw IoError(bval.string() + ": expected a single row of b-values");
  if (bvec_rows.size() != 3) throw IoError(bvec.string() + ": expected three rows (x, y, z)");
  const std::size_t n = bval_rows[0].size();
  for (const auto& row : bvec_rows)
    if (row.size() != n) throw IoError(bvec.string() + ": row length does not match the b-value count");
  GradientTable table;
  table.bvals = bval_rows[0];
  table.bvecs.resize(n);
  for (std::size_t i = 0; i < n; ++i) table.bvecs[i] = {bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]};
  return table;
}

void write_fsl_gradients(const fs::path& bval, const fs::path& bvec, const GradientTable& table) {
  std::ofstream vals(bval);
  std::ofstream vecs(bvec);
  if (!vals || !vecs) throw IoError("cannot write gradient files " + bval.string());
  vals << std::setprecision(17);
  vecs << std::setprecision(17);
  for (std::size_t i = 0; i < table.size(); ++i) vals << (i ? " " : "") << table.bvals[i];
  vals << '\n';
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < table.size(); ++i) vecs << (i ? " " : "") << table.bvecs[i][axis];
    vecs << '\n';
  }
}

std::size_t TissueMask::count() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v == 1 || v == 2; }));
}

std::size_t TissueMask::count(Tissue t) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(t)));
}

void DwiVolume::validate() const {
  if (static_cast<std::size_t>(data.frames()) != table.size())
    throw ValidationError("volume has " + std::to_string(data.frames()) + " frames but the gradient table has " +
                          std::to_string(table.size()) + " entries");
}

// Raw container -------------------------------------------------------------

fs::path volume_stem(const fs::path& path) {
  const auto ext = path.extension();
  if (ext == ".raw" || ext == ".json") return fs::path(path).replace_extension();
  return path;
}

fs::path payload_path(const fs::path& stem) { return fs::path(stem.string() + ".raw"); }
fs::path sidecar_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }

namespace {

template <typename T>
void to_little_endian(std::span<T> values) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    for (auto& v : values) {
      auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
  }
}

}  // namespace

VolumeFile read_volume_file(const fs::path& path) {
  const auto stem = volume_stem(path);
  const auto side = sidecar_path(stem);
  const auto raw = payload_path(stem);
  if (!fs::exists(side)) throw IoError("missing sidecar " + side.string());
  if (!fs::exists(raw)) throw IoError("missing payload " + raw.string());

  VolumeFile file;
  try {
    std::ifstream in(side);
    file.sidecar = nlohmann::json::parse(in);
    const auto dims = file.sidecar.at("dims").get<std::vector<int>>();
    if (dims.size() < 3 || dims.size() > 4) throw IoError(side.string() + ": dims must have 3 or 4 entries");
    for (std::size_t i = 0; i < 4; ++i) file.dims[i] = i < dims.size() ? dims[i] : 1;
    const auto dtype = file.sidecar.at("dtype").get<std::string>();
    if (dtype == "f32")
      file.dtype = DType::kF32;
    else if (dtype == "u8")
      file.dtype = DType::kU8;
    else
      throw IoError(side.string() + ": unsupported dtype '" + dtype + "'");
    if (file.sidecar.contains("voxel_size_mm")) {
      const auto vs = file.sidecar.at("voxel_size_mm").get<std::vector<double>>();
      if (vs.size() != 3) throw IoError(side.string() + ": voxel_size_mm must have 3 entries");
      file.voxel_size_mm = {vs[0], vs[1], vs[2]};
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(side.string() + ": " + e.what());
  }
  for (int d : file.dims)
    if (d <= 0) throw IoError(side.string() + ": dims must be positive");

  const std::size_t count = static_cast<std::size_t>(file.dims[0]) * file.dims[1] * file.dims[2] * file.dims[3];
  const std::size_t elem = file.dtype == DType::kF32 ? 4 : 1;
  const auto bytes = fs::file_size(raw);
  if (bytes != count * elem)
    throw IoError("size mismatch: " + raw.string() + " holds " + std::to_string(bytes / elem) +
                  " elements, sidecar dims require " + std::to_string(count));

  std::ifstream in(raw, std::ios::binary);
  if (file.dtype == DType::kF32) {
    file.f32.resize(count);
    in.read(reinterpret_cast<char*>(file.f32.data()), static_cast<std::streamsize>(bytes));
    to_little_endian(std::span<float>(file.f32));
    const Grid g{file.dims[0], file.dims[1], file.dims[2]};
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::isfinite(file.f32[i])) {
        const auto c = g.coords(i % g.voxels());
        throw IoError("non-finite value in " + raw.string() + " at index (" + std::to_string(c[0]) + "," +
                      std::to_string(c[1]) + "," + std::to_string(c[2]) + "," +
                      std::to_string(i / g.voxels()) + ")");
      }
    }
  } else {
    file.u8.resize(count);
    in.read(reinterpret_cast<char*>(file.u8.data()), static_cast<std::streamsize>(bytes));
  }
  if (!in) throw IoError("short read on " + raw.string());
  return file;
}

void write_volume_file(const fs::path& path, const VolumeFile& file) {
  const auto stem = volume_stem(path);
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  nlohmann::json side = file.sidecar.is_object() ? file.sidecar : nlohmann::json::object();
  side["dims"] = file.dims;
  side["dtype"] = file.dtype == DType::kF32 ? "f32" : "u8";
  side["voxel_size_mm"] = file.voxel_size_mm;
  {
    std::ofstream out(sidecar_path(stem));
    if (!out) throw IoError("cannot write " + sidecar_path(stem).string());
    out << side.dump(2) << '\n';
  }
  std::ofstream out(payload_path(stem), std::ios::binary);
  if (!out) throw IoError("cannot write " + payload_path(stem).string());
  if (file.dtype == DType::kF32) {
    std::vector<float> le(file.f32);
    to_little_endian(std::span<float>(le));
    out.write(reinterpret_cast<const char*>(le.data()), static_cast<std::streamsize>(le.size() * 4));
  } else {
    out.write(reinterpret_cast<const char*>(file.u8.data()), static_cast<std::streamsize>(file.u8.size()));
  }
  if (!out) throw IoError("write failed for " + payload_path(stem).string());
}

Image4 load_image(const fs::path& path, Vec3* voxel_size, nlohmann::json* sidecar) {
  auto file = read_volume_file(path);
  if (file.dtype != DType::kF32) throw IoError(path.string() + ": expected f32 payload");
  Image4 image(Grid{file.dims[0], file.dims[1], file.dims[2]}, file.dims[3]);
  std::copy(file.f32.begin(), file.f32.end(), image.data().begin());
  if (voxel_size) *voxel_size = file.voxel_size_mm;
  if (sidecar) *sidecar = std::move(file.sidecar);
  return image;
}

void save_image(const fs::path& path, const Image4& image, const Vec3& voxel_size, const nlohmann::json& extra) {
  VolumeFile file;
  const auto& g = image.grid();
  file.dims = {g.nx, g.ny, g.nz, image.frames()};
  file.voxel_size_mm = voxel_size;
  file.sidecar = extra;
  file.f32.assign(image.data().begin(), image.data().end());
  write_volume_file(path, file);
}

TissueMask load_mask(const fs::path& path) {
  const auto file = read_volume_file(path);
  if (file.dtype != DType::kU8) throw IoError(path.string() + ": masks must be u8");
  if (file.dims[3] != 1) throw IoError(path.string() + ": masks must have a single frame");
  TissueMask mask(Grid{file.dims[0], file.dims[1], file.dims[2]});
  for (std::size_t i = 0; i < file.u8.size(); ++i) {
    if (file.u8[i] > 2) throw IoError(path.string() + ": label " + std::to_string(file.u8[i]) + " is not 0, 1 or 2");
    mask.labels[i] = file.u8[i];
  }
  return mask;
}

void save_mask(const fs::path& path, const TissueMask& mask, const Vec3& voxel_size) {
  VolumeFile file;
  file.dims = {mask.grid.nx, mask.grid.ny, mask.grid.nz, 1};
  file.dtype = DType::kU8;
  file.voxel_size_mm = voxel_size;
  file.u8 = mask.labels;
  write_volume_file(path, file);
}

DwiVolume load_volume(const fs::path& path, GradientTable table) {
  DwiVolume vol;
  vol.data = load_image(path, &vol.voxel_size_mm);
  vol.table = std::move(table);
  vol.validate();
  return vol;
}

void save_volume(const fs::path& path, const DwiVolume& volume) {
  volume.validate();
  save_image(path, volume.data, volume.voxel_size_mm);
}

// Preprocessing ---------------------------------------------------------------

NormalizedDwi normalize_b0(const DwiVolume& volume, const TissueMask& mask) {
  volume.validate();
  if (!(volume.data.grid() == mask.grid)) throw ValidationError("mask grid does not match the volume grid");
  const auto b0 = volume.table.b0_indices();
  const auto dw = volume.table.dw_indices();
  if (b0.empty()) throw ValidationError("normalization needs at least one b=0 entry");

  const Grid& g = mask.grid;
  NormalizedDwi out;
  out.signal = Image4(g, static_cast<int>(dw.size()));
  out.mean_b0.assign(g.voxels(), 0.0f);
  out.table = volume.table.diffusion_weighted();
  out.voxel_size_mm = volume.voxel_size_mm;

  std::size_t bad = 0;
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    double sum = 0.0;
    for (int i : b0) sum += volume.data.at(v, i);
    const double mean = sum / static_cast<double>(b0.size());
    out.mean_b0[v] = static_cast<float>(mean);
    if (!mask.in_tissue(v)) continue;
    if (!(mean > 0.0)) {
      ++bad;
      continue;
    }
    for (std::size_t k = 0; k < dw.size(); ++k)
      out.signal.at(v, static_cast<int>(k)) = static_cast<float>(volume.data.at(v, dw[k]) / mean);
  }
  if (bad > 0)
    throw ValidationError("b0 normalization failed: mean b0 <= 0 in " + std::to_string(bad) + " masked voxels");
  return out;
}

// Patches ---------------------------------------------------------------------

std::vector<std::size_t> tissue_voxels(const TissueMask& mask) {
  std::vector<std::size_t> out;
  out.reserve(mask.labels.size());
  for (std::size_t v = 0; v < mask.labels.size(); ++v)
    if (mask.in_tissue(v)) out.push_back(v);
  return out;
}

void extract_patch(const Image4& channels, const TissueMask& mask, std::size_t voxel, std::span<float> out) {
  const Grid& g = channels.grid();
  const int nc = channels.frames();
  std::fill(out.begin(), out.end(), 0.0f);
  const auto [cx, cy, cz] = g.coords(voxel);
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = cx + dx, y = cy + dy, z = cz + dz;
        if (!g.contains(x, y, z)) continue;
        const std::size_t n = g.index(x, y, z);
        if (!mask.in_tissue(n)) continue;
        const int tap = patch_tap(dx, dy, dz);
        for (int c = 0; c < nc; ++c) out[c * kPatchTaps + tap] = channels.at(n, c);
      }
    }
  }
}

PatchStream::PatchStream(const Image4& channels, const TissueMask& mask)
    : channels_(&channels), mask_(&mask), voxels_(tissue_voxels(mask)) {
  if (!(channels.grid() == mask.grid)) throw ValidationError("mask grid does not match the coefficient grid");
  if (voxels_.empty()) throw ValidationError("tissue mask is empty");
}

std::optional<Patch> PatchStream::next() {
  if (cursor_ >= voxels_.size()) return std::nullopt;
  const std::size_t v = voxels_[cursor_++];
  Patch p;
  p.center = channels_->grid().coords(v);
  p.values.resize(static_cast<std::size_t>(channels_->frames()) * kPatchTaps);
  extract_patch(*channels_, *mask_, v, p.values);
  return p;
}

PatchStream extract_patches(const Image4& channels, const TissueMask& mask) { return PatchStream(channels, mask); }

}  // namespace shharm
