#pragma once

#include <array>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "shharm/dwi_core.hpp"

namespace shharm {

// Attenuations are clamped to at least this value before the log.
inline constexpr double kMinAttenuation = 1e-6;

// Unique elements of a symmetric tensor, mm^2/s.
struct DiffusionTensor {
  double xx = 0, yy = 0, zz = 0, xy = 0, xz = 0, yz = 0;

  Eigen::Matrix3d matrix() const;
  static DiffusionTensor from_matrix(const Eigen::Matrix3d& m);
  // Ascending.
  Eigen::Vector3d eigenvalues() const;
};

// Unweighted log-linear least squares over a fixed set of weighted
// measurements; the pseudo-inverse is computed once.
class TensorFitter {
 public:
  TensorFitter(std::span<const double> bvals, std::span<const Vec3> bvecs);
  explicit TensorFitter(const GradientTable& weighted);

  DiffusionTensor fit(std::span<const double> attenuations) const;
  DiffusionTensor fit(std::span<const float> attenuations) const;

  std::size_t size() const { return static_cast<std::size_t>(design_.rows()); }

 private:
  Eigen::MatrixXd design_;  // [n, 6]
  Eigen::MatrixXd pinv_;    // [6, n]
};

DiffusionTensor fit_tensor(std::span<const double> attenuations, const GradientTable& weighted);

// Noise-free single-tensor signal exp(-b g^T D g).
std::vector<double> tensor_attenuations(const DiffusionTensor& d, std::span<const double> bvals,
                                        std::span<const Vec3> bvecs);

double fa(const DiffusionTensor& d);
double md(const DiffusionTensor& d);

struct DtiMaps {
  std::vector<double> fa;
  std::vector<double> md;
  std::size_t negative_eigenvalue_voxels = 0;
};

// FA/MD for each row of `attenuations` ([n_voxels][n_dirs], row-major).
DtiMaps dti_maps(std::span<const float> attenuations, const TensorFitter& fitter);

}  // namespace shharm
