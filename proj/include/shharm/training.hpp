#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "shharm/error.hpp"
#include "shharm/sh_basis.hpp"
#include "shharm/shresnet.hpp"

namespace shharm {

struct TrainConfig {
  int stage1_epochs = 5;
  double stage1_lr = 0.001;
  int stage1_batch = 256;
  int stage2_batch = 128;
  // Initial SGD learning rate; the stage-1 rate when unset.
  std::optional<double> stage2_lr;
  double lr_decay_factor = 0.9;
  int decay_patience_epochs = 5;
  int stop_patience_epochs = 10;
  // Hard cap on epochs in case validation keeps creeping down.
  int max_epochs = 200;
  // A validation loss counts as a new best only when it is lower than the
  // best so far by at least this fraction of the best.
  double improvement_rel_tol = 1e-7;
  std::uint64_t seed = 0;

  double stage2_initial_lr() const { return stage2_lr.value_or(stage1_lr); }
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  int epoch = 0;
  int stage = 1;
  std::string optimizer;
  double lr = 0.0;       // used during this epoch
  double next_lr = 0.0;  // after this epoch's schedule decision
  int batch_size = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool improved = false;
  bool lr_decayed = false;
  bool stopped = false;
  std::uint64_t param_checksum = 0;

  nlohmann::json to_json() const;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool early_stopped = false;
  double stage2_initial_lr = 0.0;

  // One JSON object per line: every epoch, then a summary record.
  std::string to_jsonl() const;
};

// Validation-driven learning-rate decay and early stopping. Epochs are
// numbered from 1; decay and stopping only act in stage 2 but the
// non-improvement counters run from the first epoch.
class Schedule {
 public:
  explicit Schedule(const TrainConfig& cfg);

  int stage(int epoch) const { return epoch <= cfg_.stage1_epochs ? 1 : 2; }
  int batch_size(int epoch) const { return stage(epoch) == 1 ? cfg_.stage1_batch : cfg_.stage2_batch; }
  nn::OptimizerKind optimizer(int epoch) const {
    return stage(epoch) == 1 ? nn::OptimizerKind::kAdam : nn::OptimizerKind::kSgd;
  }
  // Learning rate for `epoch` given the decisions observed so far.
  double learning_rate(int epoch) const { return stage(epoch) == 1 ? cfg_.stage1_lr : stage2_lr_; }

  struct Outcome {
    bool improved = false;
    bool decayed = false;
    bool stop = false;
  };
  Outcome observe(int epoch, double val_loss);

  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  TrainConfig cfg_;
  double stage2_lr_;
  bool has_best_ = false;
  double best_loss_ = 0.0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  int since_reset_ = 0;
};

// Paired samples: source patches [n][C][27] and target centre coefficients
// [n][C].
struct TrainingData {
  int n_coef = 15;
  std::vector<float> inputs;
  std::vector<float> targets;

  std::size_t size() const { return targets.size() / static_cast<std::size_t>(n_coef); }
  void append(const TrainingData& other);
};

// One sample per tissue voxel of the source mask, raster order.
TrainingData make_training_data(const ShVolume& source, const ShVolume& target);

// Mean over samples and directions of (B pred - B target)^2. pred/target are
// [C, batch] graph values; basis is [n_dirs, C].
template <typename T>
nn::Var<T> signal_mse_loss(const nn::Var<T>& pred, const nn::Var<T>& target, const nn::RowMatrix<T>& basis);

// Same quantity on sample-major [batch][C] buffers.
double signal_mse_loss(std::span<const double> pred, std::span<const double> target, int batch,
                       const Eigen::MatrixXd& basis);
double signal_mse_loss(std::span<const double> pred, std::span<const double> target, int batch,
                       std::span<const Vec3> dirs, int sh_order);

// Validation loss of `params` on `data`.
double evaluate_loss(const NetworkParams<float>& params, const TrainingData& data, const Eigen::MatrixXd& basis);

struct TrainHooks {
  // Replaces the computed validation loss (used to drive the schedule in tests).
  std::function<double(int epoch)> validation_override;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  NetworkParams<float> params;  // best-validation parameters
  TrainLog log;
};

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(const std::string& what, TrainLog log) : NumericalError(what), log_(std::move(log)) {}
  const TrainLog& log() const { return log_; }

 private:
  TrainLog log_;
};

// Two-stage training (Adam, then SGD with decay and early stopping).
// `basis` is the reconstruction matrix on the target scanner's weighted
// directions, [n_dirs, C].
TrainResult train(const NetworkSpec& spec, const TrainingData& train_data, const TrainingData& val_data,
                  const Eigen::MatrixXd& basis, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace shharm
