#include "shharm/sh_basis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "shharm/error.hpp"

namespace shharm {

void ShBasisSpec::validate() const {
  if (order < 0 || order % 2 != 0)
    throw ValidationError("spherical harmonic order must be even and non-negative, got " + std::to_string(order));
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ValidationError("regularization weight must be finite and >= 0");
}

namespace {

// Associated Legendre P_l^m(x), m >= 0, including the Condon-Shortley phase.
double assoc_legendre_cs(int l, int m, double x) {
  double pmm = 1.0;
  if (m > 0) {
    const double s = std::sqrt(std::max(0.0, (1.0 - x) * (1.0 + x)));
    double fact = 1.0;
    for (int i = 1; i <= m; ++i) {
      pmm *= -fact * s;
      fact += 2.0;
    }
  }
  if (l == m) return pmm;
  double pmmp1 = x * (2.0 * m + 1.0) * pmm;
  if (l == m + 1) return pmmp1;
  double pll = 0.0;
  for (int ll = m + 2; ll <= l; ++ll) {
    pll = ((2.0 * ll - 1.0) * x * pmmp1 - (ll + m - 1.0) * pmm) / (ll - m);
    pmm = pmmp1;
    pmmp1 = pll;
  }
  return pll;
}

double sh_norm(int l, int m) {
  // sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!)
  double ratio = 1.0;
  for (int k = l - m + 1; k <= l + m; ++k) ratio /= k;
  return std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) * ratio);
}

void check_unit(std::span<const Vec3> dirs) {
  for (std::size_t j = 0; j < dirs.size(); ++j) {
    const auto& g = dirs[j];
    const double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
    if (std::abs(n - 1.0) > 1e-6)
      throw ValidationError("direction " + std::to_string(j) + " is not unit length (norm " + std::to_string(n) + ")");
  }
}

}  // namespace

double real_sh(int l, int m, double theta, double phi) {
  const int am = std::abs(m);
  const double base = sh_norm(l, am) * assoc_legendre_cs(l, am, std::cos(theta));
  if (m == 0) return base;
  const double sign = (am % 2 == 0) ? 1.0 : -1.0;
  if (m > 0) return std::numbers::sqrt2 * sign * base * std::cos(am * phi);
  return std::numbers::sqrt2 * sign * base * std::sin(am * phi);
}

Eigen::MatrixXd design_matrix(const ShBasisSpec& spec, std::span<const Vec3> dirs) {
  spec.validate();
  check_unit(dirs);
  Eigen::MatrixXd b(static_cast<Eigen::Index>(dirs.size()), spec.n_coef());
  for (std::size_t j = 0; j < dirs.size(); ++j) {
    const auto& g = dirs[j];
    const double theta = std::acos(std::clamp(g[2], -1.0, 1.0));
    const double phi = std::atan2(g[1], g[0]);
    for (int l = 0; l <= spec.order; l += 2)
      for (int m = -l; m <= l; ++m) b(static_cast<Eigen::Index>(j), sh_index(l, m)) = real_sh(l, m, theta, phi);
  }
  return b;
}

Eigen::VectorXd laplace_beltrami_weights(const ShBasisSpec& spec) {
  Eigen::VectorXd r(spec.n_coef());
  for (int l = 0; l <= spec.order; l += 2) {
    const double w = static_cast<double>(l) * l * (l + 1) * (l + 1);
    for (int m = -l; m <= l; ++m) r(sh_index(l, m)) = w;
  }
  return r;
}

ShFitter::ShFitter(const ShBasisSpec& spec, std::span<const Vec3> dirs) : spec_(spec), basis_(design_matrix(spec, dirs)) {
  const int n = spec.n_coef();
  if (basis_.rows() < n)
    throw ValidationError("order " + std::to_string(spec.order) + " needs at least " + std::to_string(n) +
                          " directions, got " + std::to_string(basis_.rows()));
  if (spec.lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(basis_);
    qr.setThreshold(1e-10);
    if (qr.rank() < n)
      throw NumericalError("spherical harmonic normal matrix is singular with lambda = 0; use lambda > 0");
  }
  Eigen::MatrixXd normal = basis_.transpose() * basis_;
  normal.diagonal() += spec.lambda * laplace_beltrami_weights(spec);
  const Eigen::MatrixXd rhs = basis_.transpose();
  Eigen::LLT<Eigen::MatrixXd> llt(normal);
  if (llt.info() == Eigen::Success) {
    solve_ = llt.solve(rhs);
  } else {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(normal);
    if (!qr.isInvertible()) throw NumericalError("regularized spherical harmonic normal matrix is singular");
    solve_ = qr.solve(rhs);
  }
}

ShCoefficients ShFitter::fit(std::span<const double> signal) const {
  if (static_cast<Eigen::Index>(signal.size()) != basis_.rows())
    throw ValidationError("signal length does not match the direction count");
  return solve_ * Eigen::Map<const Eigen::VectorXd>(signal.data(), static_cast<Eigen::Index>(signal.size()));
}

void ShFitter::fit(std::span<const float> signal, std::span<float> coeffs) const {
  const Eigen::Index nd = basis_.rows();
  const Eigen::Index nc = solve_.rows();
  for (Eigen::Index k = 0; k < nc; ++k) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < nd; ++j) acc += solve_(k, j) * signal[j];
    coeffs[k] = static_cast<float>(acc);
  }
}

ShCoefficients fit_sh(std::span<const double> signal, std::span<const Vec3> dirs, const ShBasisSpec& spec) {
  return ShFitter(spec, dirs).fit(signal);
}

Eigen::VectorXd reconstruct(const ShCoefficients& coeffs, std::span<const Vec3> dirs, int order) {
  ShBasisSpec spec{order, 0.0};
  if (coeffs.size() != spec.n_coef())
    throw ValidationError("coefficient vector has " + std::to_string(coeffs.size()) + " entries, order " +
                          std::to_string(order) + " needs " + std::to_string(spec.n_coef()));
  return design_matrix(spec, dirs) * coeffs;
}

ShVolume fit_sh_volume(const NormalizedDwi& dwi, const TissueMask& mask, const ShBasisSpec& spec) {
  if (!(dwi.signal.grid() == mask.grid)) throw ValidationError("mask grid does not match the signal grid");
  const auto dirs = dwi.table.directions();
  const ShFitter fitter(spec, dirs);
  ShVolume out;
  out.spec = spec;
  out.mask = mask;
  out.mean_b0 = dwi.mean_b0;
  out.voxel_size_mm = dwi.voxel_size_mm;
  out.coeffs = Image4(mask.grid, spec.n_coef());
  std::vector<float> signal(dirs.size());
  std::vector<float> c(static_cast<std::size_t>(spec.n_coef()));
  for (std::size_t v = 0; v < mask.grid.voxels(); ++v) {
    if (!mask.in_tissue(v)) continue;
    dwi.signal.read_voxel(v, signal);
    fitter.fit(signal, c);
    out.coeffs.write_voxel(v, c);
  }
  return out;
}

PatchStream extract_patches(const ShVolume& sh) { return PatchStream(sh.coeffs, sh.mask); }

void save_sh_volume(const std::filesystem::path& path, const ShVolume& sh) {
  nlohmann::json extra;
  extra["sh_order"] = sh.spec.order;
  extra["sh_lambda"] = sh.spec.lambda;
  extra["n_coef"] = sh.spec.n_coef();
  const auto stem = volume_stem(path);
  save_image(stem, sh.coeffs, sh.voxel_size_mm, extra);
  Image4 b0(sh.mask.grid, 1);
  std::copy(sh.mean_b0.begin(), sh.mean_b0.end(), b0.data().begin());
  save_image(stem.string() + "_meanb0", b0, sh.voxel_size_mm);
}

ShVolume load_sh_volume(const std::filesystem::path& path, const TissueMask& mask) {
  const auto stem = volume_stem(path);
  ShVolume sh;
  nlohmann::json side;
  sh.coeffs = load_image(stem, &sh.voxel_size_mm, &side);
  sh.spec.order = side.value("sh_order", 4);
  sh.spec.lambda = side.value("sh_lambda", 0.006);
  sh.spec.validate();
  if (sh.coeffs.frames() != sh.spec.n_coef())
    throw IoError(stem.string() + ": " + std::to_string(sh.coeffs.frames()) + " coefficients for order " +
                  std::to_string(sh.spec.order));
  if (!(sh.coeffs.grid() == mask.grid)) throw ValidationError("mask grid does not match the coefficient grid");
  const Image4 b0 = load_image(stem.string() + "_meanb0");
  sh.mean_b0.assign(b0.data().begin(), b0.data().end());
  sh.mask = mask;
  return sh;
}

}  // namespace shharm
