#include <doctest.h>

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

#include "shharm/error.hpp"
#include "shharm/sh_basis.hpp"
#include "support.hpp"

using namespace shharm;

namespace {

constexpr double kPi = std::numbers::pi;

// Gauss-Legendre nodes/weights on [-1, 1] via Newton iteration on P_n.
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < n; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = z;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (z * p1 - p0) / (z * z - 1.0);
      const double dz = p1 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    x[i] = z;
    w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
  }
}

Vec3 from_angles(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

}  // namespace

TEST_CASE("coefficient layout") {
  CHECK(ShBasisSpec{4, 0.0}.n_coef() == 15);
  CHECK(ShBasisSpec{0, 0.0}.n_coef() == 1);
  CHECK(ShBasisSpec{8, 0.0}.n_coef() == 45);
  CHECK(sh_index(0, 0) == 0);
  CHECK(sh_index(2, -2) == 1);
  CHECK(sh_index(2, 2) == 5);
  CHECK(sh_index(4, -4) == 6);
  CHECK(sh_index(4, 4) == 14);
  CHECK(sh_block_start(2) == 1);
  CHECK(sh_block_start(4) == 6);
  CHECK_THROWS_AS(ShBasisSpec({3, 0.0}).validate(), ValidationError);
  CHECK_THROWS_AS(ShBasisSpec({4, -1.0}).validate(), ValidationError);
}

TEST_CASE("order 0 and 2 basis functions match their Cartesian closed forms") {
  const auto dirs = test_support::random_directions(25, 3);
  const auto b = design_matrix(ShBasisSpec{2, 0.0}, dirs);
  const double c0 = 0.5 / std::sqrt(kPi);
  const double c2 = 0.5 * std::sqrt(15.0 / kPi);
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const double x = dirs[i][0], y = dirs[i][1], z = dirs[i][2];
    const auto r = static_cast<Eigen::Index>(i);
    CHECK(b(r, sh_index(0, 0)) == doctest::Approx(c0).epsilon(1e-13));
    CHECK(b(r, sh_index(2, -2)) == doctest::Approx(c2 * x * y).epsilon(1e-12));
    CHECK(b(r, sh_index(2, -1)) == doctest::Approx(c2 * y * z).epsilon(1e-12));
    CHECK(b(r, sh_index(2, 0)) == doctest::Approx(0.25 * std::sqrt(5.0 / kPi) * (3 * z * z - 1)).epsilon(1e-12));
    CHECK(b(r, sh_index(2, 1)) == doctest::Approx(c2 * x * z).epsilon(1e-12));
    CHECK(b(r, sh_index(2, 2)) == doctest::Approx(0.5 * c2 * (x * x - y * y)).epsilon(1e-12));
  }
}

TEST_CASE("basis is orthonormal under exact product quadrature") {
  std::vector<double> t, wt;
  gauss_legendre(18, t, wt);
  const int nphi = 36;
  std::vector<Vec3> dirs;
  std::vector<double> weights;
  for (int i = 0; i < 18; ++i)
    for (int k = 0; k < nphi; ++k) {
      dirs.push_back(from_angles(std::acos(t[i]), 2.0 * kPi * k / nphi));
      weights.push_back(wt[i] * 2.0 * kPi / nphi);
    }
  const auto b = design_matrix(ShBasisSpec{4, 0.0}, dirs);
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Eigen::Index>(weights.size()));
  const Eigen::MatrixXd gram = b.transpose() * w.asDiagonal() * b;
  CHECK((gram - Eigen::MatrixXd::Identity(15, 15)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("even basis is antipodally symmetric") {
  auto dirs = test_support::random_directions(30, 5);
  auto flipped = dirs;
  for (auto& d : flipped) d = {-d[0], -d[1], -d[2]};
  const auto a = design_matrix(ShBasisSpec{4, 0.0}, dirs);
  const auto b = design_matrix(ShBasisSpec{4, 0.0}, flipped);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Laplace-Beltrami weights are l^2 (l+1)^2 per block") {
  const auto w = laplace_beltrami_weights(ShBasisSpec{4, 0.006});
  CHECK(w(0) == 0.0);
  for (int k = 1; k < 6; ++k) CHECK(w(k) == 36.0);
  for (int k = 6; k < 15; ++k) CHECK(w(k) == 400.0);
}

TEST_CASE("unregularized fit recovers band-limited coefficients") {
  const auto dirs = test_support::random_directions(60, 7);
  std::mt19937 gen(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd c(15);
    for (int k = 0; k < 15; ++k) c(k) = u(gen);
    const Eigen::VectorXd s = reconstruct(c, dirs, 4);
    const auto fit = fit_sh(std::vector<double>(s.data(), s.data() + s.size()), dirs, ShBasisSpec{4, 0.0});
    CHECK((fit - c).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("constant signal gives c0 = 2 sqrt(pi)") {
  const auto dirs = test_support::random_directions(40, 9);
  const std::vector<double> ones(dirs.size(), 1.0);
  for (double lambda : {0.0, 0.006}) {
    const auto c = fit_sh(ones, dirs, ShBasisSpec{4, lambda});
    CHECK(c(0) == doctest::Approx(2.0 * std::sqrt(kPi)).epsilon(1e-12));
    CHECK(c.tail(14).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("regularized fit solves the penalized normal equations") {
  const auto dirs = test_support::random_directions(30, 13);
  const ShBasisSpec spec{4, 0.006};
  std::mt19937 gen(2);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> s(dirs.size());
  for (auto& v : s) v = 0.5 + 0.2 * nd(gen);
  const auto c = fit_sh(s, dirs, spec);

  // Independent route: SVD least squares on the stacked system [B; sqrt(lambda L)].
  const Eigen::MatrixXd b = design_matrix(spec, dirs);
  Eigen::MatrixXd stacked(b.rows() + 15, 15);
  stacked.topRows(b.rows()) = b;
  stacked.bottomRows(15) = (spec.lambda * laplace_beltrami_weights(spec)).cwiseSqrt().asDiagonal();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(b.rows() + 15);
  for (std::size_t i = 0; i < s.size(); ++i) rhs(static_cast<Eigen::Index>(i)) = s[i];
  const Eigen::VectorXd oracle = stacked.jacobiSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rhs);
  CHECK((c - oracle).cwiseAbs().maxCoeff() < 1e-10);

  // The penalty never grows with lambda.
  const auto c0 = fit_sh(s, dirs, ShBasisSpec{4, 0.0});
  const auto lb = laplace_beltrami_weights(spec);
  CHECK(c.dot(lb.asDiagonal() * c) <= c0.dot(lb.asDiagonal() * c0) + 1e-12);
}

TEST_CASE("ill-posed fits are rejected") {
  CHECK_THROWS_AS(ShFitter(ShBasisSpec{4, 0.0}, test_support::random_directions(10, 1)), ValidationError);
  std::vector<Vec3> ring;
  for (int k = 0; k < 20; ++k) ring.push_back(from_angles(kPi / 2, kPi * k / 20));
  CHECK_THROWS_AS(ShFitter(ShBasisSpec{4, 0.0}, ring), NumericalError);
  CHECK_NOTHROW(ShFitter(ShBasisSpec{4, 0.006}, ring));
  std::vector<Vec3> bad = test_support::random_directions(20, 1);
  bad[3] = {1.0, 1.0, 0.0};
  CHECK_THROWS_AS(design_matrix(ShBasisSpec{4, 0.0}, bad), ValidationError);
}

TEST_CASE("volume fit matches per-voxel fits and zeros the background") {
  const auto dirs = test_support::random_directions(30, 17);
  NormalizedDwi dwi;
  const Grid g{3, 2, 2};
  dwi.signal = Image4(g, 30);
  dwi.mean_b0.assign(g.voxels(), 100.0f);
  for (const auto& d : dirs) {
    dwi.table.bvals.push_back(1000.0);
    dwi.table.bvecs.push_back(d);
  }
  std::mt19937 gen(3);
  std::uniform_real_distribution<float> u(0.1f, 0.9f);
  for (auto& v : dwi.signal.data()) v = u(gen);
  TissueMask mask(g);
  mask.labels = {1, 2, 0, 1, 1, 0, 2, 2, 0, 0, 1, 2};
  const ShBasisSpec spec{};
  const auto sh = fit_sh_volume(dwi, mask, spec);
  CHECK(sh.coeffs.frames() == 15);
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    if (!mask.in_tissue(v)) {
      for (int k = 0; k < 15; ++k) CHECK(sh.coeffs.at(v, k) == 0.0f);
      continue;
    }
    std::vector<double> s(30);
    for (int k = 0; k < 30; ++k) s[k] = dwi.signal.at(v, k);
    const auto c = fit_sh(s, dirs, spec);
    for (int k = 0; k < 15; ++k) CHECK(sh.coeffs.at(v, k) == doctest::Approx(c(k)).epsilon(1e-5));
  }

  const auto dir = test_support::scratch_dir("shvol");
  save_sh_volume(dir / "sh", sh);
  const auto back = load_sh_volume(dir / "sh", mask);
  CHECK(back.spec.order == 4);
  CHECK(back.spec.lambda == 0.006);
  for (std::size_t i = 0; i < sh.coeffs.size(); ++i) CHECK(back.coeffs.data()[i] == sh.coeffs.data()[i]);
  CHECK(back.mean_b0 == sh.mean_b0);
}
