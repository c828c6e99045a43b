#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <omp.h>

#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shharm/dti_metrics.hpp"
#include "shharm/error.hpp"
#include "shharm/evaluation.hpp"
#include "shharm/harmonize.hpp"
#include "shharm/manifest.hpp"
#include "shharm/phantom.hpp"
#include "shharm/rish.hpp"
#include "shharm/sh_basis.hpp"
#include "shharm/shresnet.hpp"
#include "shharm/training.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace shharm;

namespace {

using Dirs = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

std::vector<Vec3> to_dirs(const Dirs& d) {
  std::vector<Vec3> out(static_cast<std::size_t>(d.rows()));
  for (Eigen::Index i = 0; i < d.rows(); ++i) out[i] = {d(i, 0), d(i, 1), d(i, 2)};
  return out;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  if (o.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

DiffusionTensor tensor_from(const Eigen::Matrix3d& m) { return DiffusionTensor::from_matrix(m); }

TrainConfig train_config(const py::object& overrides, std::optional<int> max_epochs, std::uint64_t seed) {
  TrainConfig c = overrides.is_none() ? TrainConfig{} : TrainConfig::from_json(from_py(overrides));
  if (max_epochs) c.max_epochs = *max_epochs;
  c.seed = seed;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Spherical-harmonic harmonization of diffusion MRI";

  // Translators run newest first, so the base class goes in first.
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("set_num_threads", [](int n) { omp_set_num_threads(n); }, py::arg("n"));

  // Spherical harmonics.
  m.def("real_sh", &real_sh, py::arg("l"), py::arg("m"), py::arg("theta"), py::arg("phi"));
  m.def(
      "design_matrix",
      [](const Dirs& dirs, int order, double lam) {
        const ShBasisSpec spec{order, lam};
        spec.validate();
        return design_matrix(spec, to_dirs(dirs));
      },
      py::arg("dirs"), py::arg("order") = 4, py::arg("lam") = 0.0);
  m.def(
      "fit_sh",
      [](const std::vector<double>& signal, const Dirs& dirs, int order, double lam) {
        const ShBasisSpec spec{order, lam};
        spec.validate();
        return fit_sh(signal, to_dirs(dirs), spec);
      },
      py::arg("signal"), py::arg("dirs"), py::arg("order") = 4, py::arg("lam") = 0.006);
  m.def(
      "reconstruct",
      [](const Eigen::VectorXd& coeffs, const Dirs& dirs, int order) { return reconstruct(coeffs, to_dirs(dirs), order); },
      py::arg("coeffs"), py::arg("dirs"), py::arg("order") = 4);

  // RISH.
  m.def(
      "rish_features", [](const Eigen::VectorXd& c, int order) { return rish_features(c, order).energy; },
      py::arg("coeffs"), py::arg("order") = 4);
  m.def(
      "rish_project",
      [](const Eigen::VectorXd& input, const Eigen::VectorXd& harmonized, int order) {
        const auto r = rish_project(input, harmonized, order);
        return py::make_tuple(r.coeffs, r.degenerate_orders);
      },
      py::arg("input"), py::arg("harmonized"), py::arg("order") = 4,
      "Returns (projected coefficients, number of degenerate orders).");

  // Tensors.
  m.def(
      "fit_tensor",
      [](const std::vector<double>& att, const std::vector<double>& bvals, const Dirs& bvecs) {
        return fit_tensor(att, GradientTable{bvals, to_dirs(bvecs)}).matrix();
      },
      py::arg("attenuations"), py::arg("bvals"), py::arg("bvecs"));
  m.def(
      "tensor_attenuations",
      [](const Eigen::Matrix3d& d, const std::vector<double>& bvals, const Dirs& bvecs) {
        return tensor_attenuations(tensor_from(d), bvals, to_dirs(bvecs));
      },
      py::arg("tensor"), py::arg("bvals"), py::arg("bvecs"));
  m.def("fa", [](const Eigen::Matrix3d& d) { return fa(tensor_from(d)); }, py::arg("tensor"));
  m.def("md", [](const Eigen::Matrix3d& d) { return md(tensor_from(d)); }, py::arg("tensor"));

  // Statistics.
  m.def(
      "nmse", [](const std::vector<double>& y, const std::vector<double>& y_hat) { return nmse(y, y_hat); },
      py::arg("y"), py::arg("y_hat"));
  m.def(
      "wilcoxon",
      [](const std::vector<double>& a, const std::vector<double>& b) { return to_py(wilcoxon_signed_rank(a, b).to_json()); },
      py::arg("a"), py::arg("b"));

  // File-level pipeline.
  m.def(
      "write_phantom",
      [](const fs::path& out_dir, const py::object& config) {
        const PhantomConfig cfg = PhantomConfig::from_json(from_py(config));
        py::gil_scoped_release release;
        write_phantom(cfg, out_dir);
      },
      py::arg("out_dir"), py::arg("config") = py::none(),
      "Writes a paired phantom; `config` is a dict of PhantomConfig fields.");

  m.def(
      "train",
      [](const fs::path& manifest, const std::string& val, const fs::path& out, const std::vector<std::string>& exclude,
         const std::string& model, int resblocks, int hidden, std::uint64_t seed, std::optional<int> max_epochs,
         const py::object& train_overrides) {
        const TrainConfig cfg = train_config(train_overrides, max_epochs, seed);
        NetworkSpec spec;
        spec.kind = parse_model_kind(model);
        spec.n_resblocks = resblocks;
        spec.hidden_channels = hidden;
        spec.seed = seed;
        std::string log;
        {
          py::gil_scoped_release release;
          const Manifest mf = Manifest::read(manifest);
          const std::size_t v = mf.find(val);
          std::vector<bool> held(mf.subjects.size(), false);
          for (const auto& id : exclude) held[mf.find(id)] = true;
          std::vector<PreparedSubject> subjects;
          std::vector<std::size_t> train_idx;
          std::size_t val_idx = 0;
          for (std::size_t i = 0; i < mf.subjects.size(); ++i) {
            if (held[i] && i != v) continue;
            subjects.push_back(prepare_subject(load_pair(mf, i), ShBasisSpec{}));
            if (i == v)
              val_idx = subjects.size() - 1;
            else
              train_idx.push_back(subjects.size() - 1);
          }
          if (train_idx.empty()) throw ValidationError("no training subjects left after excluding validation/test ids");
          const std::size_t vi[] = {val_idx};
          const auto result = shharm::train(spec, pooled_training_data(subjects, train_idx),
                                            pooled_training_data(subjects, vi), target_basis(subjects[val_idx], 4), cfg);
          if (out.has_parent_path()) fs::create_directories(out.parent_path());
          save_network(out, result.params);
          log = result.log.to_jsonl();
        }
        auto records = nlohmann::json::array();
        std::istringstream lines(log);
        for (std::string line; std::getline(lines, line);)
          if (!line.empty()) records.push_back(nlohmann::json::parse(line));
        return to_py(records);
      },
      py::arg("manifest"), py::arg("val"), py::arg("out"), py::arg("exclude") = std::vector<std::string>{},
      py::arg("model") = "shresnet", py::arg("resblocks") = 2, py::arg("hidden") = 32, py::arg("seed") = 0,
      py::arg("max_epochs") = py::none(), py::arg("train_config") = py::none(),
      "Trains on every manifest subject except `val` and `exclude`; saves the best checkpoint and returns the log.");

  m.def(
      "harmonize",
      [](const fs::path& checkpoint, const fs::path& dwi, const fs::path& bval, const fs::path& bvec,
         const fs::path& mask, const fs::path& out, double lam) {
        py::gil_scoped_release release;
        const auto model = load_network(checkpoint);
        const auto table = read_fsl_gradients(bval, bvec);
        const auto volume = load_volume(dwi, table);
        const auto tissue = load_mask(mask);
        HarmonizeOptions opts;
        opts.basis = ShBasisSpec{model.spec.sh_order, lam};
        const auto r = harmonize_volume(model, normalize_b0(volume, tissue), tissue, table, opts);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        save_volume(out, r.volume);
        write_fsl_gradients(out.string() + ".bval", out.string() + ".bvec", table);
        return r.degenerate_orders;
      },
      py::arg("checkpoint"), py::arg("dwi"), py::arg("bval"), py::arg("bvec"), py::arg("mask"), py::arg("out"),
      py::arg("lam") = 0.006, "Harmonizes one volume; returns the number of degenerate voxel orders.");

  m.def(
      "evaluate",
      [](const fs::path& manifest, std::size_t folds, const std::vector<std::string>& models, int resblocks, int hidden,
         std::uint64_t seed, std::optional<int> max_epochs, const py::object& train_overrides) {
        CvConfig cfg;
        cfg.folds = folds;
        cfg.models.clear();
        for (const auto& name : models) cfg.models.push_back(parse_model_kind(name));
        cfg.shresnet.n_resblocks = resblocks;
        cfg.shresnet.hidden_channels = hidden;
        cfg.train = train_config(train_overrides, max_epochs, seed);
        std::string report;
        {
          py::gil_scoped_release release;
          const Manifest mf = Manifest::read(manifest);
          std::vector<PreparedSubject> subjects;
          for (std::size_t i = 0; i < mf.subjects.size(); ++i)
            subjects.push_back(prepare_subject(load_pair(mf, i), cfg.basis));
          report = cross_validate(subjects, cfg).to_json().dump();
        }
        return to_py(nlohmann::json::parse(report));
      },
      py::arg("manifest"), py::arg("folds") = 0, py::arg("models") = std::vector<std::string>{"shresnet", "golkov"},
      py::arg("resblocks") = 2, py::arg("hidden") = 32, py::arg("seed") = 0, py::arg("max_epochs") = py::none(),
      py::arg("train_config") = py::none(), "Cross-validated NMSE report as a dict.");
}
