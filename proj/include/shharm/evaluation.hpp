#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shharm/dwi_core.hpp"
#include "shharm/manifest.hpp"
#include "shharm/sh_basis.hpp"
#include "shharm/shresnet.hpp"
#include "shharm/training.hpp"

namespace shharm {

// ||y - y_hat||^2 / ||y||^2.
double nmse(std::span<const double> y, std::span<const double> y_hat);
double nmse(std::span<const float> y, std::span<const float> y_hat);

struct WilcoxonResult {
  std::size_t n = 0;      // non-zero differences
  double statistic = 0;   // min(W+, W-)
  double w_plus = 0;
  double w_minus = 0;
  double p_value = 1.0;   // two-sided
  bool exact = false;
  bool degenerate = false;  // every difference was zero

  nlohmann::json to_json() const;
};

// Paired two-sided signed-rank test on a - b. Exact null distribution up to
// kWilcoxonExactMax non-zero differences (ties handled through average
// ranks), normal approximation with tie and continuity correction above.
inline constexpr std::size_t kWilcoxonExactMax = 25;
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

// "**" for p <= 0.01, "*" for p <= 0.05, otherwise empty.
std::string significance_stars(double p);

struct Fold {
  int index = 0;
  std::vector<std::size_t> test;
  std::size_t validation = 0;
  std::vector<std::size_t> train;
};

// k contiguous test blocks (sizes differ by at most one); the validation
// subject is the one following the block cyclically; everything else trains.
// k = 0 means one fold per subject.
std::vector<Fold> make_folds(std::size_t n_subjects, std::size_t k);

// One subject normalized and SH-fitted on both scanners.
struct PreparedSubject {
  std::string id;
  TissueMask mask;
  NormalizedDwi source;
  NormalizedDwi target;
  ShVolume source_sh;
  ShVolume target_sh;
  // Noise-free target when the data set provides one; NMSE is computed
  // against it instead of the measured target.
  std::optional<NormalizedDwi> target_truth;
};

PreparedSubject prepare_subject(const PairedSubject& pair, const ShBasisSpec& basis);

struct CvConfig {
  std::size_t folds = 0;
  std::vector<ModelKind> models{ModelKind::kShResNet, ModelKind::kGolkovMlp};
  NetworkSpec shresnet{};
  NetworkSpec golkov{.kind = ModelKind::kGolkovMlp};
  TrainConfig train;
  ShBasisSpec basis;
  std::function<void(const std::string&)> progress;

  nlohmann::json to_json() const;
};

inline const std::vector<std::string> kTissueNames{"grey", "white"};
inline const std::vector<std::string> kQuantityNames{"signal", "fa", "md"};
inline constexpr const char* kUnharmonized = "unharmonized";

struct NmseEntry {
  std::string subject;
  std::string tissue;
  std::string quantity;
  std::string method;
  double nmse = 0.0;
};

struct Comparison {
  std::string tissue;
  std::string quantity;
  std::string method;
  std::string baseline;
  WilcoxonResult test;
  std::string stars;
};

struct Reduction {
  std::string tissue;
  std::string quantity;
  std::string method;
  double mean_nmse = 0.0;
  double mean_nmse_baseline = 0.0;
  double percent = 0.0;  // 100 (baseline - method) / baseline
};

struct FoldSummary {
  int index = 0;
  std::vector<std::string> test;
  std::string validation;
  std::vector<std::string> train;
  std::map<std::string, double> best_val_loss;
  std::map<std::string, int> epochs;
  std::map<std::string, long> degenerate_orders;
};

struct EvalReport {
  std::vector<std::string> subjects;
  std::vector<std::string> methods;
  std::vector<NmseEntry> entries;
  std::vector<Comparison> comparisons;
  std::vector<Reduction> reductions;
  std::vector<FoldSummary> folds;
  // FNV-1a of the evaluated voxel indices per subject and tissue.
  std::map<std::string, std::string> voxel_set_hash;
  std::map<std::string, std::size_t> voxel_count;
  std::size_t negative_eigenvalue_voxels = 0;
  nlohmann::json config;

  // NMSE of one subject/tissue/quantity/method; throws if absent.
  double value(const std::string& subject, const std::string& tissue, const std::string& quantity,
               const std::string& method) const;
  std::vector<double> values(const std::string& tissue, const std::string& quantity, const std::string& method) const;
  double mean(const std::string& tissue, const std::string& quantity, const std::string& method) const;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Per-subject NMSE for every tissue and quantity given harmonized SH volumes
// keyed by method name (the unharmonized source is added automatically).
// Appends to `report`.
void score_subject(const PreparedSubject& subject, const std::map<std::string, const ShVolume*>& harmonized,
                   EvalReport& report);

// Fills comparisons and reductions from the entries.
void summarize(EvalReport& report);

EvalReport cross_validate(const std::vector<PreparedSubject>& subjects, const CvConfig& cfg);

// Paired samples for one fold, pooled over subjects in subject order.
TrainingData pooled_training_data(const std::vector<PreparedSubject>& subjects, std::span<const std::size_t> indices);

// Reconstruction matrix at the target scanner's weighted directions.
Eigen::MatrixXd target_basis(const PreparedSubject& subject, int sh_order);

inline const std::vector<int> kResblockPreset{1, 2, 3, 6, 7, 9, 11};

struct SweepCell {
  int n_resblocks = 0;
  std::vector<double> fold_losses;  // best validation loss per fold
  std::optional<double> mean_loss_x100;
  std::string error;  // non-empty when training failed
};

struct SweepTable {
  std::vector<SweepCell> cells;
  nlohmann::json to_json() const;
  // Two rows: the ResBlock counts and the mean validation loss scaled by 100.
  std::string format() const;
};

SweepTable resblock_sweep(std::span<const int> n_values, const std::vector<PreparedSubject>& subjects,
                          const CvConfig& cfg);

}  // namespace shharm
