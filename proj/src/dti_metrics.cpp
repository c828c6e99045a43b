#include "shharm/dti_metrics.hpp"

#include <algorithm>
#include <cmath>

#include "shharm/error.hpp"

namespace shharm {

Eigen::Matrix3d DiffusionTensor::matrix() const {
  Eigen::Matrix3d m;
  m << xx, xy, xz, xy, yy, yz, xz, yz, zz;
  return m;
}

DiffusionTensor DiffusionTensor::from_matrix(const Eigen::Matrix3d& m) {
  return {m(0, 0), m(1, 1), m(2, 2), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)), 0.5 * (m(1, 2) + m(2, 1))};
}

Eigen::Vector3d DiffusionTensor::eigenvalues() const {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(matrix(), Eigen::EigenvaluesOnly);
  return es.eigenvalues();
}

TensorFitter::TensorFitter(std::span<const double> bvals, std::span<const Vec3> bvecs) {
  if (bvals.size() != bvecs.size()) throw ValidationError("b-value and direction counts differ");
  const auto n = static_cast<Eigen::Index>(bvals.size());
  if (n < 6) throw ValidationError("tensor fit needs at least 6 weighted measurements");
  design_.resize(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& g = bvecs[static_cast<std::size_t>(i)];
    const double b = bvals[static_cast<std::size_t>(i)];
    design_.row(i) << -b * g[0] * g[0], -b * g[1] * g[1], -b * g[2] * g[2], -2 * b * g[0] * g[1],
        -2 * b * g[0] * g[2], -2 * b * g[1] * g[2];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design_);
  if (qr.rank() < 6) throw NumericalError("direction set is rank deficient for a tensor fit");
  pinv_ = qr.solve(Eigen::MatrixXd::Identity(n, n));
}

TensorFitter::TensorFitter(const GradientTable& weighted) : TensorFitter(weighted.bvals, weighted.bvecs) {}

DiffusionTensor TensorFitter::fit(std::span<const double> attenuations) const {
  if (attenuations.size() != size()) throw ValidationError("attenuation count does not match the fitter");
  Eigen::VectorXd y(design_.rows());
  for (Eigen::Index i = 0; i < y.size(); ++i)
    y(i) = std::log(std::max(attenuations[static_cast<std::size_t>(i)], kMinAttenuation));
  const Eigen::Matrix<double, 6, 1> d = pinv_ * y;
  return {d(0), d(1), d(2), d(3), d(4), d(5)};
}

DiffusionTensor TensorFitter::fit(std::span<const float> attenuations) const {
  std::vector<double> a(attenuations.begin(), attenuations.end());
  return fit(std::span<const double>(a));
}

DiffusionTensor fit_tensor(std::span<const double> attenuations, const GradientTable& weighted) {
  return TensorFitter(weighted).fit(attenuations);
}

std::vector<double> tensor_attenuations(const DiffusionTensor& d, std::span<const double> bvals,
                                        std::span<const Vec3> bvecs) {
  const Eigen::Matrix3d m = d.matrix();
  std::vector<double> out(bvals.size());
  for (std::size_t i = 0; i < bvals.size(); ++i) {
    const Eigen::Vector3d g(bvecs[i][0], bvecs[i][1], bvecs[i][2]);
    out[i] = std::exp(-bvals[i] * g.dot(m * g));
  }
  return out;
}

double fa(const DiffusionTensor& d) {
  const Eigen::Vector3d ev = d.eigenvalues();
  const double norm = ev.norm();
  if (norm == 0.0) return 0.0;
  const double mean = ev.mean();
  const double value = std::sqrt(1.5) * (ev.array() - mean).matrix().norm() / norm;
  return std::clamp(value, 0.0, 1.0);
}

double md(const DiffusionTensor& d) { return (d.xx + d.yy + d.zz) / 3.0; }

DtiMaps dti_maps(std::span<const float> attenuations, const TensorFitter& fitter) {
  const std::size_t nd = fitter.size();
  const std::size_t nv = attenuations.size() / nd;
  DtiMaps maps;
  maps.fa.resize(nv);
  maps.md.resize(nv);
  for (std::size_t v = 0; v < nv; ++v) {
    const auto tensor = fitter.fit(attenuations.subspan(v * nd, nd));
    if (tensor.eigenvalues().minCoeff() < 0.0) ++maps.negative_eigenvalue_voxels;
    maps.fa[v] = fa(tensor);
    maps.md[v] = md(tensor);
  }
  return maps;
}

}  // namespace shharm
