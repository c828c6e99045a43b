#include "shharm/training.hpp"

#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>

#include "shharm/random.hpp"

namespace shharm {

using nn::Var;

void TrainConfig::validate() const {
  if (stage1_epochs < 1 || stage1_batch < 1 || stage2_batch < 1 || decay_patience_epochs < 1 ||
      stop_patience_epochs < 1 || max_epochs < 1)
    throw ValidationError("training epochs, batch sizes and patience values must be positive");
  if (!(stage1_lr > 0.0) || !(stage2_initial_lr() > 0.0)) throw ValidationError("learning rates must be positive");
  if (!(lr_decay_factor > 0.0) || lr_decay_factor > 1.0) throw ValidationError("lr_decay_factor must be in (0, 1]");
  if (decay_patience_epochs > stop_patience_epochs)
    throw ValidationError("decay patience must not exceed stop patience");
  if (!(improvement_rel_tol >= 0.0)) throw ValidationError("improvement_rel_tol must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage1_epochs", stage1_epochs},
          {"stage1_lr", stage1_lr},
          {"stage1_batch", stage1_batch},
          {"stage2_batch", stage2_batch},
          {"stage2_lr", stage2_initial_lr()},
          {"lr_decay_factor", lr_decay_factor},
          {"decay_patience_epochs", decay_patience_epochs},
          {"stop_patience_epochs", stop_patience_epochs},
          {"max_epochs", max_epochs},
          {"improvement_rel_tol", improvement_rel_tol},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
    c.stage1_lr = j.value("stage1_lr", c.stage1_lr);
    c.stage1_batch = j.value("stage1_batch", c.stage1_batch);
    c.stage2_batch = j.value("stage2_batch", c.stage2_batch);
    if (j.contains("stage2_lr")) c.stage2_lr = j.at("stage2_lr").get<double>();
    c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
    c.decay_patience_epochs = j.value("decay_patience_epochs", c.decay_patience_epochs);
    c.stop_patience_epochs = j.value("stop_patience_epochs", c.stop_patience_epochs);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.improvement_rel_tol = j.value("improvement_rel_tol", c.improvement_rel_tol);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed training config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"type", "epoch"},         {"epoch", epoch},       {"stage", stage},
          {"optimizer", optimizer},  {"lr", lr},             {"next_lr", next_lr},
          {"batch_size", batch_size}, {"train_loss", train_loss}, {"val_loss", val_loss},
          {"improved", improved},    {"lr_decayed", lr_decayed}, {"stopped", stopped},
          {"param_checksum", param_checksum}};
}

std::string TrainLog::to_jsonl() const {
  std::ostringstream out;
  for (const auto& e : epochs) out << e.to_json().dump() << '\n';
  nlohmann::json summary = {{"type", "summary"},
                            {"best_epoch", best_epoch},
                            {"best_val_loss", best_val_loss},
                            {"early_stopped", early_stopped},
                            {"epochs", epochs.size()},
                            {"stage2_initial_lr", stage2_initial_lr}};
  out << summary.dump() << '\n';
  return out.str();
}

Schedule::Schedule(const TrainConfig& cfg) : cfg_(cfg), stage2_lr_(cfg.stage2_initial_lr()) { cfg_.validate(); }

Schedule::Outcome Schedule::observe(int epoch, double val_loss) {
  Outcome out;
  out.improved = !has_best_ || val_loss < best_loss_ - cfg_.improvement_rel_tol * std::abs(best_loss_);
  if (out.improved) {
    has_best_ = true;
    best_loss_ = val_loss;
    best_epoch_ = epoch;
    since_best_ = 0;
    since_reset_ = 0;
    return out;
  }
  ++since_best_;
  ++since_reset_;
  if (stage(epoch) == 2) {
    if (since_best_ >= cfg_.stop_patience_epochs) {
      out.stop = true;
    } else if (since_reset_ >= cfg_.decay_patience_epochs) {
      stage2_lr_ *= cfg_.lr_decay_factor;
      since_reset_ = 0;
      out.decayed = true;
    }
  }
  return out;
}

void TrainingData::append(const TrainingData& other) {
  if (other.n_coef != n_coef) throw ValidationError("cannot mix training data with different coefficient counts");
  inputs.insert(inputs.end(), other.inputs.begin(), other.inputs.end());
  targets.insert(targets.end(), other.targets.begin(), other.targets.end());
}

TrainingData make_training_data(const ShVolume& source, const ShVolume& target) {
  if (!(source.coeffs.grid() == target.coeffs.grid())) throw ValidationError("source and target grids differ");
  if (source.spec.n_coef() != target.spec.n_coef()) throw ValidationError("source and target bases differ");
  TrainingData d;
  d.n_coef = source.spec.n_coef();
  const auto voxels = tissue_voxels(source.mask);
  if (voxels.empty()) throw ValidationError("training subject has an empty tissue mask");
  const std::size_t stride = static_cast<std::size_t>(d.n_coef) * kPatchTaps;
  d.inputs.resize(voxels.size() * stride);
  d.targets.resize(voxels.size() * d.n_coef);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    extract_patch(source.coeffs, source.mask, voxels[i], std::span<float>(d.inputs).subspan(i * stride, stride));
    target.coeffs.read_voxel(voxels[i], std::span<float>(d.targets).subspan(i * d.n_coef, d.n_coef));
  }
  return d;
}

template <typename T>
Var<T> signal_mse_loss(const Var<T>& pred, const Var<T>& target, const nn::RowMatrix<T>& basis) {
  if (pred.shape() != target.shape()) throw ValidationError("prediction and target shapes differ");
  if (pred.shape().size() != 2 || pred.dim(1) == 0) throw ValidationError("signal loss needs a non-empty [C, batch] input");
  return nn::mean_square(nn::matmul_const(basis, nn::sub(pred, target)));
}

template Var<float> signal_mse_loss<float>(const Var<float>&, const Var<float>&, const nn::RowMatrix<float>&);
template Var<double> signal_mse_loss<double>(const Var<double>&, const Var<double>&, const nn::RowMatrix<double>&);

double signal_mse_loss(std::span<const double> pred, std::span<const double> target, int batch,
                       const Eigen::MatrixXd& basis) {
  if (batch <= 0) throw ValidationError("signal loss of an empty batch");
  const auto c = basis.cols();
  if (pred.size() != static_cast<std::size_t>(batch * c) || target.size() != pred.size())
    throw ValidationError("signal loss: buffers do not hold batch x coefficients values");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>> p(pred.data(), c, batch);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic>> t(target.data(), c, batch);
  const Eigen::MatrixXd s = basis * (p - t);
  return s.squaredNorm() / static_cast<double>(s.size());
}

double signal_mse_loss(std::span<const double> pred, std::span<const double> target, int batch,
                       std::span<const Vec3> dirs, int sh_order) {
  return signal_mse_loss(pred, target, batch, design_matrix(ShBasisSpec{sh_order, 0.0}, dirs));
}

double evaluate_loss(const NetworkParams<float>& params, const TrainingData& data, const Eigen::MatrixXd& basis) {
  const int n = static_cast<int>(data.size());
  if (n == 0) throw ValidationError("validation set is empty");
  const auto pred = predict<float>(params, data.inputs, n);
  const int c = data.n_coef;
  double total = 0.0;
  Eigen::VectorXd diff(c);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < c; ++k)
      diff(k) = static_cast<double>(pred[static_cast<std::size_t>(i) * c + k]) - data.targets[static_cast<std::size_t>(i) * c + k];
    total += (basis * diff).squaredNorm();
  }
  return total / (static_cast<double>(n) * static_cast<double>(basis.rows()));
}

namespace {

constexpr int kTrainChunk = 32;

Var<float> gather_input(const NetworkSpec& spec, const TrainingData& data, std::span<const std::size_t> idx) {
  const int c = data.n_coef;
  const int n = static_cast<int>(idx.size());
  const std::size_t stride = static_cast<std::size_t>(c) * kPatchTaps;
  if (spec.kind == ModelKind::kShResNet) {
    std::vector<float> packed(static_cast<std::size_t>(n) * stride);
    for (int b = 0; b < n; ++b)
      for (std::size_t k = 0; k < stride; ++k) packed[k * n + b] = data.inputs[idx[b] * stride + k];
    return Var<float>::constant({c, 3, 3, 3, n}, std::move(packed));
  }
  std::vector<float> centers(static_cast<std::size_t>(c) * n);
  const int center = patch_tap(0, 0, 0);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      centers[static_cast<std::size_t>(ch) * n + b] = data.inputs[idx[b] * stride + ch * kPatchTaps + center];
  return Var<float>::constant({c, n}, std::move(centers));
}

Var<float> gather_target(const TrainingData& data, std::span<const std::size_t> idx) {
  const int c = data.n_coef;
  const int n = static_cast<int>(idx.size());
  std::vector<float> t(static_cast<std::size_t>(c) * n);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) t[static_cast<std::size_t>(ch) * n + b] = data.targets[idx[b] * c + ch];
  return Var<float>::constant({c, n}, std::move(t));
}

// Loss and gradient of one minibatch. The batch is split into fixed-size
// chunks whose gradients are summed in chunk order, so the result does not
// depend on how many threads run the chunks.
double batch_gradient(NetworkParams<float>& params, const TrainingData& data, std::span<const std::size_t> idx,
                      const nn::RowMatrix<float>& basis) {
  const int bs = static_cast<int>(idx.size());
  const int chunks = (bs + kTrainChunk - 1) / kTrainChunk;
  std::vector<std::vector<std::vector<float>>> grads(static_cast<std::size_t>(chunks));
  std::vector<double> losses(static_cast<std::size_t>(chunks), 0.0);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static)
  for (int k = 0; k < chunks; ++k) {
    try {
      const int start = k * kTrainChunk;
      const int n = std::min(kTrainChunk, bs - start);
      const auto sub_idx = idx.subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(n));
      const BoundNetwork<float> net(params, true);
      const auto pred = net.forward(gather_input(params.spec, data, sub_idx));
      const auto loss = nn::scale(signal_mse_loss(pred, gather_target(data, sub_idx), basis),
                                  static_cast<float>(n) / static_cast<float>(bs));
      nn::backward(loss);
      losses[k] = loss.item();
      grads[k] = net.gradients();
    } catch (...) {
      errors[k] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  params.zero_grad();
  double total = 0.0;
  for (int k = 0; k < chunks; ++k) {
    total += losses[k];
    for (std::size_t p = 0; p < params.params.size(); ++p) {
      auto& g = params.params[p].grad;
      const auto& src = grads[k][p];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
    }
  }
  return total;
}

}  // namespace

TrainResult train(const NetworkSpec& spec, const TrainingData& train_data, const TrainingData& val_data,
                  const Eigen::MatrixXd& basis, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  spec.validate();
  if (train_data.size() == 0) throw ValidationError("training set is empty");
  if (val_data.size() == 0 && !hooks.validation_override) throw ValidationError("validation set is empty");
  if (train_data.n_coef != spec.n_coef() || basis.cols() != spec.n_coef())
    throw ValidationError("training data, loss basis and network disagree on the coefficient count");

  TrainResult result;
  result.params = build_network<float>(spec, spec.seed);
  NetworkParams<float>& params = result.params;
  NetworkParams<float> best = params;
  const nn::RowMatrix<float> basis_f = basis.cast<float>();

  Schedule schedule(cfg);
  nn::OptimizerState adam;
  adam.learning_rate = cfg.stage1_lr;
  nn::OptimizerState sgd;
  sgd.kind = nn::OptimizerKind::kSgd;
  sgd.learning_rate = cfg.stage2_initial_lr();
  TrainLog& log = result.log;
  log.stage2_initial_lr = cfg.stage2_initial_lr();

  Rng rng(mix_seed(cfg.seed, 0x7261696eULL));
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = schedule.stage(epoch);
    rec.batch_size = schedule.batch_size(epoch);
    rec.lr = schedule.learning_rate(epoch);
    nn::OptimizerState& opt = rec.stage == 1 ? adam : sgd;
    opt.learning_rate = rec.lr;
    rec.optimizer = opt.kind == nn::OptimizerKind::kAdam ? "adam" : "sgd";

    rng.shuffle(std::span<std::size_t>(order));
    double weighted = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(rec.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(rec.batch_size), order.size() - start);
      const auto idx = std::span<const std::size_t>(order).subspan(start, n);
      const double loss = batch_gradient(params, train_data, idx, basis_f);
      if (!std::isfinite(loss)) {
        log.epochs.push_back(rec);
        throw TrainingDiverged("training diverged: non-finite loss in epoch " + std::to_string(epoch), log);
      }
      weighted += loss * static_cast<double>(n);
      nn::optimizer_step<float>(params.params, opt);
    }
    rec.train_loss = weighted / static_cast<double>(order.size());
    rec.val_loss = hooks.validation_override ? hooks.validation_override(epoch) : evaluate_loss(params, val_data, basis);
    if (!std::isfinite(rec.val_loss)) {
      log.epochs.push_back(rec);
      throw TrainingDiverged("training diverged: non-finite validation loss in epoch " + std::to_string(epoch), log);
    }
    const auto outcome = schedule.observe(epoch, rec.val_loss);
    rec.improved = outcome.improved;
    rec.lr_decayed = outcome.decayed;
    rec.stopped = outcome.stop;
    rec.next_lr = schedule.learning_rate(epoch + 1);
    rec.param_checksum = params.checksum();
    if (outcome.improved) best = params;
    log.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (outcome.stop) {
      log.early_stopped = true;
      break;
    }
  }
  log.best_epoch = schedule.best_epoch();
  log.best_val_loss = schedule.best_loss();
  for (auto& p : best.params) p.grad.clear();
  result.params = std::move(best);
  return result;
}

}  // namespace shharm
