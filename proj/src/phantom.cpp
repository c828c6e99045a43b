#include "shharm/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "shharm/error.hpp"
#include "shharm/manifest.hpp"
#include "shharm/random.hpp"
#include "shharm/sh_basis.hpp"

namespace shharm {

void PhantomConfig::validate() const {
  for (int d : dims)
    if (d < 8) throw ValidationError("phantom grid must be at least 8 voxels along every axis");
  if (n_subjects < 1) throw ValidationError("n_subjects must be at least 1");
  if (!(bval > 0.0)) throw ValidationError("phantom b-value must be positive");
  if (n_directions < 15) throw ValidationError("phantom needs at least 15 directions for an order-4 fit");
  if (n_b0 < 1) throw ValidationError("phantom needs at least one b=0 measurement");
  if (!(voxel_size_mm > 0.0) || !(s0 > 0.0)) throw ValidationError("voxel size and s0 must be positive");
  if (!(anisotropy_scale > 0.0)) throw ValidationError("anisotropy_scale must be positive");
  if (!(bias_amplitude >= 0.0)) throw ValidationError("bias_amplitude must be >= 0");
  if (!(noise_sigma_a >= 0.0) || !(noise_sigma_b >= 0.0)) throw ValidationError("noise sigma must be >= 0");
}

nlohmann::json PhantomConfig::to_json() const {
  return {{"dims", dims},
          {"n_subjects", n_subjects},
          {"bval", bval},
          {"n_directions", n_directions},
          {"n_b0", n_b0},
          {"voxel_size_mm", voxel_size_mm},
          {"s0", s0},
          {"anisotropy_scale", anisotropy_scale},
          {"bias_amplitude", bias_amplitude},
          {"noise_sigma_a", noise_sigma_a},
          {"noise_sigma_b", noise_sigma_b},
          {"seed", seed}};
}

PhantomConfig PhantomConfig::from_json(const nlohmann::json& j) {
  PhantomConfig c;
  try {
    if (j.contains("dims")) c.dims = j.at("dims").get<std::array<int, 3>>();
    c.n_subjects = j.value("n_subjects", c.n_subjects);
    c.bval = j.value("bval", c.bval);
    c.n_directions = j.value("n_directions", c.n_directions);
    c.n_b0 = j.value("n_b0", c.n_b0);
    c.voxel_size_mm = j.value("voxel_size_mm", c.voxel_size_mm);
    c.s0 = j.value("s0", c.s0);
    c.anisotropy_scale = j.value("anisotropy_scale", c.anisotropy_scale);
    c.bias_amplitude = j.value("bias_amplitude", c.bias_amplitude);
    c.noise_sigma_a = j.value("noise_sigma_a", c.noise_sigma_a);
    c.noise_sigma_b = j.value("noise_sigma_b", c.noise_sigma_b);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed phantom config: ") + e.what());
  }
  c.validate();
  return c;
}

DiffusionTensor scale_anisotropy(const DiffusionTensor& d, double factor) {
  if (factor == 1.0) return d;
  const Eigen::Matrix3d m = d.matrix();
  const double mean = m.trace() / 3.0;
  const Eigen::Matrix3d iso = mean * Eigen::Matrix3d::Identity();
  return DiffusionTensor::from_matrix(iso + factor * (m - iso));
}

namespace {

Eigen::Vector3d to_eigen(const Vec3& v) { return {v[0], v[1], v[2]}; }

DiffusionTensor cylinder(const Eigen::Vector3d& axis, double parallel, double perpendicular) {
  const Eigen::Vector3d a = axis.normalized();
  const Eigen::Matrix3d m = perpendicular * Eigen::Matrix3d::Identity() + (parallel - perpendicular) * a * a.transpose();
  return DiffusionTensor::from_matrix(m);
}

DiffusionTensor oriented(const Eigen::Vector3d& axis, double l1, double l2, double l3, double roll) {
  const Eigen::Vector3d a = axis.normalized();
  Eigen::Vector3d helper = std::abs(a.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  Eigen::Vector3d b = a.cross(helper).normalized();
  Eigen::Vector3d c = a.cross(b);
  const Eigen::Vector3d b2 = std::cos(roll) * b + std::sin(roll) * c;
  const Eigen::Vector3d c2 = a.cross(b2);
  const Eigen::Matrix3d m = l1 * a * a.transpose() + l2 * b2 * b2.transpose() + l3 * c2 * c2.transpose();
  return DiffusionTensor::from_matrix(m);
}

double attenuation(const VoxelModel& model, double b, const Eigen::Vector3d& g) {
  double s = 0.0;
  for (const auto& comp : model.compartments) s += comp.fraction * std::exp(-b * g.dot(comp.tensor.matrix() * g));
  return s;
}

double rician(double signal, double sigma, Rng& rng) {
  if (sigma == 0.0) return signal;
  const double re = signal + sigma * rng.normal();
  const double im = sigma * rng.normal();
  return std::sqrt(re * re + im * im);
}

// Smooth field in [0, 1] over normalized coordinates; depends on the config
// seed only, so every subject sees the same scanner-B bias.
double bias_shape(const Eigen::Vector3d& u, const Eigen::Vector3d& tilt) {
  const double radial = std::min(u.squaredNorm(), 1.0);
  const double wave = 0.5 * (1.0 + std::sin(0.5 * std::numbers::pi * u.dot(tilt)));
  return 0.6 * radial + 0.4 * wave;
}

}  // namespace

std::vector<Vec3> electrostatic_directions(int n, std::uint64_t seed, int iterations) {
  if (n < 1) throw ValidationError("need at least one direction");
  Rng rng(seed);
  std::vector<Eigen::Vector3d> p(static_cast<std::size_t>(n));
  for (auto& v : p) {
    do {
      v = {rng.normal(), rng.normal(), rng.normal()};
    } while (v.norm() < 1e-6);
    v.normalize();
  }
  double step = 0.1;
  for (int it = 0; it < iterations; ++it) {
    std::vector<Eigen::Vector3d> force(p.size(), Eigen::Vector3d::Zero());
    for (std::size_t i = 0; i < p.size(); ++i) {
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (i == j) continue;
        for (double s : {1.0, -1.0}) {
          const Eigen::Vector3d d = p[i] - s * p[j];
          const double r = std::max(d.norm(), 1e-9);
          force[i] += d / (r * r * r);
        }
      }
    }
    double max_force = 0.0;
    for (const auto& f : force) max_force = std::max(max_force, f.norm());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const Eigen::Vector3d tangent = force[i] - force[i].dot(p[i]) * p[i];
      p[i] = (p[i] + step * tangent / std::max(max_force, 1e-12)).normalized();
    }
    step *= 0.99;
  }
  std::vector<Vec3> out;
  for (auto v : p) {
    if (v.z() < 0) v = -v;
    out.push_back({v.x(), v.y(), v.z()});
  }
  return out;
}

GradientTable phantom_gradient_table(const PhantomConfig& cfg) {
  GradientTable t;
  for (int i = 0; i < cfg.n_b0; ++i) {
    t.bvals.push_back(0.0);
    t.bvecs.push_back({0.0, 0.0, 0.0});
  }
  for (const auto& d : electrostatic_directions(cfg.n_directions, mix_seed(cfg.seed, 0xD1))) {
    t.bvals.push_back(cfg.bval);
    t.bvecs.push_back(d);
  }
  return t;
}

std::uint64_t subject_seed(const PhantomConfig& cfg, int index) {
  return mix_seed(cfg.seed, static_cast<std::uint64_t>(index) + 1);
}

PhantomSubject generate_subject(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Grid grid{cfg.dims[0], cfg.dims[1], cfg.dims[2]};
  const GradientTable table = phantom_gradient_table(cfg);
  const auto dw = table.dw_indices();

  Rng layout(mix_seed(seed, 1));
  const Eigen::Vector3d radii(0.9 + layout.uniform(-0.04, 0.04), 0.9 + layout.uniform(-0.04, 0.04),
                              0.88 + layout.uniform(-0.04, 0.04));
  const double wm_radius = 0.62 + layout.uniform(-0.03, 0.03);
  const double angle_a = layout.uniform(-0.15, 0.15);
  const double angle_b = layout.uniform(-0.15, 0.15);
  const double split_x = layout.uniform(-0.15, 0.0);
  const double split_y = layout.uniform(0.0, 0.15);
  const double wm_parallel = 1.7e-3 * (1.0 + layout.uniform(-0.04, 0.04));
  const double wm_perp = 0.3e-3 * (1.0 + layout.uniform(-0.04, 0.04));

  Rng config_rng(mix_seed(cfg.seed, 0xB1A5));
  const Eigen::Vector3d tilt =
      Eigen::Vector3d(config_rng.normal(), config_rng.normal(), config_rng.normal()).normalized();

  PhantomSubject s;
  char id[32];
  std::snprintf(id, sizeof(id), "sub-%016llx", static_cast<unsigned long long>(seed));
  s.id = id;
  s.mask = TissueMask(grid);
  s.truth_a.resize(grid.voxels());
  s.truth_b.resize(grid.voxels());
  std::vector<double> bias(grid.voxels(), 1.0);

  for (int z = 0; z < grid.nz; ++z) {
    for (int y = 0; y < grid.ny; ++y) {
      for (int x = 0; x < grid.nx; ++x) {
        const std::size_t v = grid.index(x, y, z);
        const Eigen::Vector3d u((x + 0.5 - 0.5 * grid.nx) / (0.5 * grid.nx), (y + 0.5 - 0.5 * grid.ny) / (0.5 * grid.ny),
                                (z + 0.5 - 0.5 * grid.nz) / (0.5 * grid.nz));
        const double r = u.cwiseQuotient(radii).norm();
        if (r >= 1.0) continue;
        VoxelModel model;
        const double jitter = 1.0 + layout.uniform(-0.03, 0.03);
        if (r < wm_radius) {
          s.mask.labels[v] = static_cast<std::uint8_t>(Tissue::kWhite);
          model.s0 = 0.85 * cfg.s0;
          const bool in_a = u.y() < split_y;
          const bool in_b = u.x() > split_x;
          const Eigen::Vector3d dir_a(std::cos(angle_a + 0.3 * u.z()), std::sin(angle_a + 0.3 * u.z()), 0.0);
          const Eigen::Vector3d dir_b(-std::sin(angle_b), std::cos(angle_b), 0.25 * u.z());
          const Eigen::Vector3d dir_c(0.2 * u.x(), 0.2 * u.y(), 1.0);
          const double par = wm_parallel * jitter;
          if (in_a && in_b) {
            model.compartments = {{0.5, cylinder(dir_a, par, wm_perp)}, {0.5, cylinder(dir_b, par, wm_perp)}};
          } else if (in_a) {
            model.compartments = {{1.0, cylinder(dir_a, par, wm_perp)}};
          } else if (in_b) {
            model.compartments = {{1.0, cylinder(dir_b, par, wm_perp)}};
          } else {
            model.compartments = {{1.0, cylinder(dir_c, par, wm_perp)}};
          }
        } else {
          s.mask.labels[v] = static_cast<std::uint8_t>(Tissue::kGrey);
          model.s0 = cfg.s0;
          const Eigen::Vector3d axis(layout.normal(), layout.normal(), layout.normal());
          model.compartments = {{1.0, oriented(axis.norm() > 1e-9 ? axis : Eigen::Vector3d::UnitZ(), 1.0e-3 * jitter,
                                               0.8e-3 * jitter, 0.75e-3 * jitter, layout.uniform(0.0, 3.0))}};
        }
        s.truth_a[v] = model;
        VoxelModel model_b = model;
        for (auto& comp : model_b.compartments) comp.tensor = scale_anisotropy(comp.tensor, cfg.anisotropy_scale);
        s.truth_b[v] = model_b;
        bias[v] = 1.0 + cfg.bias_amplitude * bias_shape(u, tilt);
      }
    }
  }

  const auto dirs = table.directions();
  const ShFitter fitter(ShBasisSpec{4, 0.0}, dirs);
  auto render = [&](const std::vector<VoxelModel>& truth, bool scanner_b, double sigma_frac, std::uint64_t noise_seed) {
    DwiVolume vol;
    vol.table = table;
    vol.voxel_size_mm = {cfg.voxel_size_mm, cfg.voxel_size_mm, cfg.voxel_size_mm};
    vol.data = Image4(grid, static_cast<int>(table.size()));
    Rng noise(noise_seed);
    const double sigma = sigma_frac * cfg.s0;
    std::vector<double> att(dw.size());
    for (std::size_t v = 0; v < grid.voxels(); ++v) {
      const auto& model = truth[v];
      const double s0 = model.compartments.empty() ? 0.0 : model.s0;
      if (!model.compartments.empty()) {
        for (std::size_t k = 0; k < dw.size(); ++k)
          att[k] = attenuation(model, table.bvals[dw[k]], to_eigen(table.bvecs[dw[k]])) * (scanner_b ? bias[v] : 1.0);
        const auto c = fitter.fit(att);
        const Eigen::VectorXd res = fitter.basis() * c - Eigen::Map<const Eigen::VectorXd>(att.data(), static_cast<Eigen::Index>(att.size()));
        const double rel = std::sqrt(res.squaredNorm() / Eigen::Map<const Eigen::VectorXd>(att.data(), static_cast<Eigen::Index>(att.size())).squaredNorm());
        s.max_sh_residual = std::max(s.max_sh_residual, rel);
      }
      for (std::size_t i = 0; i < table.size(); ++i) {
        double clean = s0;
        if (!table.is_b0(i)) {
          const auto k = static_cast<std::size_t>(std::find(dw.begin(), dw.end(), static_cast<int>(i)) - dw.begin());
          clean = model.compartments.empty() ? 0.0 : s0 * att[k];
        }
        vol.data.at(v, static_cast<int>(i)) = static_cast<float>(rician(clean, sigma, noise));
      }
    }
    return vol;
  };
  s.scanner_a = render(s.truth_a, false, cfg.noise_sigma_a, mix_seed(seed, 0xA));
  s.scanner_b = render(s.truth_b, true, cfg.noise_sigma_b, mix_seed(seed, 0xB));
  s.scanner_b_clean = render(s.truth_b, true, 0.0, 0);
  if (s.max_sh_residual > 0.02)
    throw ValidationError("phantom tensors are not band-limited enough: order-4 residual " +
                          std::to_string(s.max_sh_residual) + " exceeds 2% RMS");
  return s;
}

void write_phantom(const PhantomConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  Manifest manifest;
  manifest.config = cfg.to_json();
  for (int i = 0; i < cfg.n_subjects; ++i) {
    const auto subject = generate_subject(cfg, subject_seed(cfg, i));
    char name[16];
    std::snprintf(name, sizeof(name), "sub-%02d", i);
    const fs::path dir = out_dir / name;
    fs::create_directories(dir);
    ManifestEntry e;
    e.id = name;
    e.source = {fs::path(name) / "scannerA_dwi", fs::path(name) / "scannerA.bval", fs::path(name) / "scannerA.bvec"};
    e.target = {fs::path(name) / "scannerB_dwi", fs::path(name) / "scannerB.bval", fs::path(name) / "scannerB.bvec"};
    e.mask = fs::path(name) / "mask";
    e.target_truth = fs::path(name) / "scannerB_truth_dwi";
    save_volume(out_dir / e.source.dwi, subject.scanner_a);
    write_fsl_gradients(out_dir / e.source.bval, out_dir / e.source.bvec, subject.scanner_a.table);
    save_volume(out_dir / e.target.dwi, subject.scanner_b);
    write_fsl_gradients(out_dir / e.target.bval, out_dir / e.target.bvec, subject.scanner_b.table);
    save_volume(out_dir / e.target_truth, subject.scanner_b_clean);
    save_mask(out_dir / e.mask, subject.mask, subject.scanner_a.voxel_size_mm);
    manifest.subjects.push_back(std::move(e));
  }
  manifest.write(out_dir / "manifest.json");
}

}  // namespace shharm
