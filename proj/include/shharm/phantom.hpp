#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shharm/dti_metrics.hpp"
#include "shharm/dwi_core.hpp"

namespace shharm {

// Synthetic two-scanner acquisitions of the same "brain". Scanner B sees the
// same microstructure with compressed anisotropy, a smooth multiplicative
// bias on the attenuations and its own Rician noise.
struct PhantomConfig {
  std::array<int, 3> dims{16, 16, 16};
  int n_subjects = 10;
  double bval = 1200.0;
  int n_directions = 30;
  int n_b0 = 4;
  double voxel_size_mm = 2.4;
  double s0 = 1000.0;
  // Scanner B eigenvalues: md + anisotropy_scale * (lambda - md).
  double anisotropy_scale = 0.8;
  double bias_amplitude = 0.12;
  // Noise standard deviation as a fraction of s0.
  double noise_sigma_a = 0.01;
  double noise_sigma_b = 0.01;
  std::uint64_t seed = 2019;

  void validate() const;
  nlohmann::json to_json() const;
  static PhantomConfig from_json(const nlohmann::json& j);
};

struct Compartment {
  double fraction = 1.0;
  DiffusionTensor tensor;
};

struct VoxelModel {
  std::vector<Compartment> compartments;
  double s0 = 0.0;
};

struct PhantomSubject {
  std::string id;
  DwiVolume scanner_a;
  DwiVolume scanner_b;
  // Scanner B without noise: the reference harmonized data is scored against.
  DwiVolume scanner_b_clean;
  TissueMask mask;
  // Ground-truth microstructure per voxel (empty models outside the mask).
  std::vector<VoxelModel> truth_a;
  std::vector<VoxelModel> truth_b;
  // Worst relative RMS residual of an unregularized order-4 SH fit to the
  // noise-free signals.
  double max_sh_residual = 0.0;
};

// Trace-preserving anisotropy scaling of a tensor.
DiffusionTensor scale_anisotropy(const DiffusionTensor& d, double factor);

// Deterministic, well-spread unit directions (antipodal electrostatic
// repulsion), z >= 0.
std::vector<Vec3> electrostatic_directions(int n, std::uint64_t seed, int iterations = 400);

// Acquisition shared by both scanners: n_b0 b=0 rows then the directions.
GradientTable phantom_gradient_table(const PhantomConfig& cfg);

std::uint64_t subject_seed(const PhantomConfig& cfg, int index);

PhantomSubject generate_subject(const PhantomConfig& cfg, std::uint64_t subject_seed);

// Writes every subject plus `manifest.json` under `out_dir`.
void write_phantom(const PhantomConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace shharm
