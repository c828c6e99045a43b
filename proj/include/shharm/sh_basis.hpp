#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "shharm/dwi_core.hpp"

namespace shharm {

// Even-order real spherical harmonic basis with Laplace-Beltrami
// regularization weight `lambda`.
struct ShBasisSpec {
  int order = 4;
  double lambda = 0.006;

  int n_coef() const { return (order + 1) * (order + 2) / 2; }
  int n_orders() const { return order / 2 + 1; }
  void validate() const;
};

using ShCoefficients = Eigen::VectorXd;

// Flat index of (l, m) for even l, m in [-l, l].
constexpr int sh_index(int l, int m) { return l * (l + 1) / 2 + m; }
// First flat index of order l's block.
constexpr int sh_block_start(int l) { return l * (l - 1) / 2; }
constexpr int sh_block_size(int l) { return 2 * l + 1; }

// Real symmetric basis function (l, m) at polar angle theta, azimuth phi.
double real_sh(int l, int m, double theta, double phi);

Eigen::MatrixXd design_matrix(const ShBasisSpec& spec, std::span<const Vec3> dirs);

// diag(l^2 (l+1)^2) over the coefficient layout.
Eigen::VectorXd laplace_beltrami_weights(const ShBasisSpec& spec);

// Precomputes the regularized least-squares solve for one direction set so
// that per-voxel fits reduce to a small matrix-vector product.
class ShFitter {
 public:
  ShFitter(const ShBasisSpec& spec, std::span<const Vec3> dirs);

  ShCoefficients fit(std::span<const double> signal) const;
  void fit(std::span<const float> signal, std::span<float> coeffs) const;

  const Eigen::MatrixXd& basis() const { return basis_; }
  const Eigen::MatrixXd& solve_matrix() const { return solve_; }
  const ShBasisSpec& spec() const { return spec_; }

 private:
  ShBasisSpec spec_;
  Eigen::MatrixXd basis_;  // [n_dirs, n_coef]
  Eigen::MatrixXd solve_;  // [n_coef, n_dirs]
};

ShCoefficients fit_sh(std::span<const double> signal, std::span<const Vec3> dirs, const ShBasisSpec& spec);

Eigen::VectorXd reconstruct(const ShCoefficients& coeffs, std::span<const Vec3> dirs, int order);

struct ShVolume {
  Image4 coeffs;  // frames = n_coef
  std::vector<float> mean_b0;
  TissueMask mask;
  ShBasisSpec spec;
  Vec3 voxel_size_mm{1.0, 1.0, 1.0};
};

// Fits every tissue voxel; voxels outside the mask get zero coefficients.
ShVolume fit_sh_volume(const NormalizedDwi& dwi, const TissueMask& mask, const ShBasisSpec& spec);

PatchStream extract_patches(const ShVolume& sh);

// Container persistence: coefficients at `path`, mean b0 at `<path>_meanb0`.
void save_sh_volume(const std::filesystem::path& path, const ShVolume& sh);
ShVolume load_sh_volume(const std::filesystem::path& path, const TissueMask& mask);

}  // namespace shharm
