#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "shharm/dwi_core.hpp"
#include "shharm/error.hpp"
#include "shharm/evaluation.hpp"
#include "shharm/harmonize.hpp"
#include "shharm/manifest.hpp"
#include "shharm/phantom.hpp"
#include "shharm/sh_basis.hpp"
#include "shharm/shresnet.hpp"
#include "shharm/training.hpp"

namespace fs = std::filesystem;
using namespace shharm;

namespace {

void report_error(const char* kind, const std::string& message, int code) {
  nlohmann::json j{{"error", kind}, {"message", message}, {"exit_code", code}};
  std::cerr << j.dump() << std::endl;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void progress(const std::string& msg) { std::cerr << msg << std::endl; }

struct TrainingFlags {
  std::string config;
  int resblocks = 2;
  int hidden = 32;
  std::uint64_t seed = 0;
  std::optional<int> max_epochs;
  std::optional<int> stage1_epochs;

  void add(CLI::App* cmd) {
    cmd->add_option("--train-config", config, "TrainConfig JSON (unset fields keep their defaults)");
    cmd->add_option("--resblocks", resblocks, "Number of ResBlocks")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--hidden", hidden, "Hidden channels per functional unit")->capture_default_str()->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed, "Seed for initialization and shuffling")->capture_default_str();
    cmd->add_option("--max-epochs", max_epochs, "Upper bound on epochs (default 200)");
    cmd->add_option("--stage1-epochs", stage1_epochs, "Adam epochs before switching to SGD (default 5)");
  }

  TrainConfig train_config() const {
    TrainConfig c = config.empty() ? TrainConfig{} : TrainConfig::from_json(read_json(config));
    if (max_epochs) c.max_epochs = *max_epochs;
    if (stage1_epochs) c.stage1_epochs = *stage1_epochs;
    c.seed = seed;
    c.validate();
    return c;
  }
};

ShBasisSpec basis_spec(int order, double lambda) {
  if (order < 0 || order % 2 != 0) throw UsageError("--order must be even and non-negative, got " + std::to_string(order));
  ShBasisSpec s{order, lambda};
  s.validate();
  return s;
}

std::vector<PreparedSubject> prepare_all(const Manifest& m, const ShBasisSpec& basis) {
  std::vector<PreparedSubject> out;
  for (std::size_t i = 0; i < m.subjects.size(); ++i) out.push_back(prepare_subject(load_pair(m, i), basis));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spherical-harmonic residual network harmonization of diffusion MRI"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = all available cores)")->capture_default_str()->check(CLI::NonNegativeNumber);

  // phantom ------------------------------------------------------------------
  auto* phantom = app.add_subcommand("phantom", "Generate paired synthetic two-scanner datasets");
  std::string phantom_config, phantom_out;
  std::optional<int> phantom_subjects;
  std::optional<std::uint64_t> phantom_seed;
  phantom->add_option("--config", phantom_config, "PhantomConfig JSON (unset fields keep their defaults)");
  phantom->add_option("--out", phantom_out, "Output directory")->required();
  phantom->add_option("--subjects", phantom_subjects, "Override n_subjects (default 10)");
  phantom->add_option("--seed", phantom_seed, "Override the phantom seed (default 2019)");

  // fit-sh -------------------------------------------------------------------
  auto* fit = app.add_subcommand("fit-sh", "Fit spherical harmonics to a DWI volume");
  std::string fit_dwi, fit_bval, fit_bvec, fit_mask, fit_out;
  int fit_order = 4;
  double fit_lambda = 0.006;
  fit->add_option("--dwi", fit_dwi, "DWI volume")->required();
  fit->add_option("--bval", fit_bval, "FSL bval file")->required();
  fit->add_option("--bvec", fit_bvec, "FSL bvec file")->required();
  fit->add_option("--mask", fit_mask, "Tissue mask volume")->required();
  fit->add_option("--order", fit_order, "Even SH order")->capture_default_str();
  fit->add_option("--lambda", fit_lambda, "Laplace-Beltrami regularization weight")->capture_default_str();
  fit->add_option("--out", fit_out, "Output coefficient volume")->required();

  // train --------------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train a harmonization network on manifest pairs");
  std::string tr_pairs, tr_val, tr_model = "shresnet", tr_out;
  std::vector<std::string> tr_exclude;
  TrainingFlags tr_flags;
  tr->add_option("--pairs", tr_pairs, "Manifest JSON")->required();
  tr->add_option("--val", tr_val, "Validation subject id")->required();
  tr->add_option("--exclude", tr_exclude, "Subject ids held out from training (test subjects)");
  tr->add_option("--model", tr_model, "shresnet | golkov")->capture_default_str();
  tr->add_option("--out", tr_out, "Checkpoint path")->required();
  tr_flags.add(tr);

  // harmonize ----------------------------------------------------------------
  auto* hm = app.add_subcommand("harmonize", "Apply a trained network to a DWI volume");
  std::string hm_ckpt, hm_dwi, hm_bval, hm_bvec, hm_mask, hm_tbval, hm_tbvec, hm_out;
  double hm_lambda = 0.006;
  hm->add_option("--checkpoint", hm_ckpt, "Checkpoint path")->required();
  hm->add_option("--dwi", hm_dwi, "Source DWI volume")->required();
  hm->add_option("--bval", hm_bval, "Source FSL bval file")->required();
  hm->add_option("--bvec", hm_bvec, "Source FSL bvec file")->required();
  hm->add_option("--mask", hm_mask, "Tissue mask volume")->required();
  hm->add_option("--target-bval", hm_tbval, "Output acquisition bval (default: the source's)");
  hm->add_option("--target-bvec", hm_tbvec, "Output acquisition bvec (default: the source's)");
  hm->add_option("--lambda", hm_lambda, "Laplace-Beltrami regularization weight")->capture_default_str();
  hm->add_option("--out", hm_out, "Output volume; <out>.bval and <out>.bvec are written alongside")->required();

  // evaluate -----------------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "Cross-validated comparison against the unharmonized data");
  std::string ev_pairs, ev_out, ev_csv;
  std::size_t ev_folds = 0;
  std::vector<std::string> ev_models{"shresnet", "golkov"};
  TrainingFlags ev_flags;
  ev->add_option("--pairs", ev_pairs, "Manifest JSON")->required();
  ev->add_option("--folds", ev_folds, "Number of folds (0 = one per subject)")->capture_default_str();
  ev->add_option("--models", ev_models, "Models to train per fold")->capture_default_str();
  ev->add_option("--out", ev_out, "Report JSON")->required();
  ev->add_option("--csv", ev_csv, "Flat CSV of every NMSE value");
  ev_flags.add(ev);

  // sweep --------------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "Mean cross-validation loss for several ResBlock counts");
  std::string sw_pairs, sw_out;
  std::size_t sw_folds = 0;
  std::vector<int> sw_values = kResblockPreset;
  TrainingFlags sw_flags;
  sw->add_option("--pairs", sw_pairs, "Manifest JSON")->required();
  sw->add_option("--folds", sw_folds, "Number of folds (0 = one per subject)")->capture_default_str();
  sw->add_option("--resblocks", sw_values, "ResBlock counts")->capture_default_str();
  sw->add_option("--out", sw_out, "Table JSON");
  sw->add_option("--seed", sw_flags.seed, "Seed for initialization and shuffling")->capture_default_str();
  sw->add_option("--train-config", sw_flags.config, "TrainConfig JSON");
  sw->add_option("--max-epochs", sw_flags.max_epochs, "Upper bound on epochs (default 200)");
  sw->add_option("--hidden", sw_flags.hidden, "Hidden channels per functional unit")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what(), 2);
    return 2;
  }

  try {
    if (threads > 0) omp_set_num_threads(threads);

    if (*phantom) {
      PhantomConfig cfg = phantom_config.empty() ? PhantomConfig{} : PhantomConfig::from_json(read_json(phantom_config));
      if (phantom_subjects) cfg.n_subjects = *phantom_subjects;
      if (phantom_seed) cfg.seed = *phantom_seed;
      cfg.validate();
      try {
        write_phantom(cfg, phantom_out);
      } catch (const fs::filesystem_error& e) {
        throw IoError(e.what());
      }
    } else if (*fit) {
      const ShBasisSpec spec = basis_spec(fit_order, fit_lambda);
      const auto volume = load_volume(fit_dwi, read_fsl_gradients(fit_bval, fit_bvec));
      const auto mask = load_mask(fit_mask);
      const auto sh = fit_sh_volume(normalize_b0(volume, mask), mask, spec);
      save_sh_volume(fit_out, sh);
    } else if (*tr) {
      const Manifest m = Manifest::read(tr_pairs);
      const std::size_t val = m.find(tr_val);
      std::vector<bool> held(m.subjects.size(), false);
      held[val] = true;
      for (const auto& id : tr_exclude) held[m.find(id)] = true;
      const ShBasisSpec basis{};
      std::vector<PreparedSubject> subjects;
      std::vector<std::size_t> train_idx;
      std::size_t val_idx = 0;
      for (std::size_t i = 0; i < m.subjects.size(); ++i) {
        const bool is_val = i == val;
        if (held[i] && !is_val) continue;
        subjects.push_back(prepare_subject(load_pair(m, i), basis));
        if (is_val)
          val_idx = subjects.size() - 1;
        else
          train_idx.push_back(subjects.size() - 1);
      }
      if (train_idx.empty()) throw ValidationError("no training subjects left after excluding validation/test ids");
      NetworkSpec spec;
      spec.kind = parse_model_kind(tr_model);
      spec.n_resblocks = tr_flags.resblocks;
      spec.hidden_channels = tr_flags.hidden;
      spec.seed = tr_flags.seed;
      const TrainConfig cfg = tr_flags.train_config();
      const std::size_t v[] = {val_idx};
      TrainHooks hooks;
      hooks.on_epoch = [](const EpochRecord& e) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "epoch %d stage %d lr %.6g train %.6g val %.6g%s", e.epoch, e.stage, e.lr,
                      e.train_loss, e.val_loss, e.improved ? " *" : "");
        progress(buf);
      };
      const auto result = train(spec, pooled_training_data(subjects, train_idx), pooled_training_data(subjects, v),
                                target_basis(subjects[val_idx], basis.order), cfg, hooks);
      const fs::path out(tr_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_network(out, result.params);
      write_text(out.string() + ".trainlog.jsonl", result.log.to_jsonl());
    } else if (*hm) {
      const auto model = load_network(hm_ckpt);
      const auto source_table = read_fsl_gradients(hm_bval, hm_bvec);
      const auto volume = load_volume(hm_dwi, source_table);
      const auto mask = load_mask(hm_mask);
      if (hm_tbval.empty() != hm_tbvec.empty())
        throw UsageError("--target-bval and --target-bvec must be given together");
      const GradientTable out_table = hm_tbval.empty() ? source_table : read_fsl_gradients(hm_tbval, hm_tbvec);
      HarmonizeOptions opts;
      opts.basis = ShBasisSpec{model.spec.sh_order, hm_lambda};
      opts.basis.validate();
      const auto result = harmonize_volume(model, normalize_b0(volume, mask), mask, out_table, opts);
      if (result.degenerate_orders > 0)
        progress("warning: " + std::to_string(result.degenerate_orders) +
                 " voxel orders had zero input energy and were left at zero");
      const fs::path out(hm_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      save_volume(out, result.volume);
      write_fsl_gradients(out.string() + ".bval", out.string() + ".bvec", out_table);
    } else if (*ev) {
      const Manifest m = Manifest::read(ev_pairs);
      CvConfig cfg;
      cfg.folds = ev_folds;
      cfg.models.clear();
      for (const auto& name : ev_models) cfg.models.push_back(parse_model_kind(name));
      cfg.shresnet.n_resblocks = ev_flags.resblocks;
      cfg.shresnet.hidden_channels = ev_flags.hidden;
      cfg.train = ev_flags.train_config();
      cfg.progress = progress;
      const auto report = cross_validate(prepare_all(m, cfg.basis), cfg);
      write_text(ev_out, report.to_json().dump(2) + "\n");
      if (!ev_csv.empty()) write_text(ev_csv, report.to_csv());
      for (const auto& r : report.reductions)
        if (r.quantity == "signal") {
          char buf[160];
          std::snprintf(buf, sizeof(buf), "%-6s %-8s signal NMSE %.5f vs %.5f unharmonized (%.1f%% reduction)",
                        r.tissue.c_str(), r.method.c_str(), r.mean_nmse, r.mean_nmse_baseline, r.percent);
          std::cout << buf << '\n';
        }
    } else if (*sw) {
      const Manifest m = Manifest::read(sw_pairs);
      CvConfig cfg;
      cfg.folds = sw_folds;
      cfg.shresnet.hidden_channels = sw_flags.hidden;
      cfg.train = sw_flags.train_config();
      cfg.progress = progress;
      const auto table = resblock_sweep(sw_values, prepare_all(m, cfg.basis), cfg);
      std::cout << table.format();
      if (!sw_out.empty()) write_text(sw_out, table.to_json().dump(2) + "\n");
    }
  } catch (const Error& e) {
    report_error(e.kind(), e.what(), e.exit_code());
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    report_error("data", e.what(), 3);
    return 3;
  } catch (const std::exception& e) {
    report_error("internal", e.what(), 1);
    return 1;
  }
  return 0;
}
