#pragma once

#include <span>
#include <string>
#include <vector>

#include "shharm/nn/tensor.hpp"

namespace shharm::nn {

template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;

  void zero_grad() { grad.assign(value.size(), T(0)); }
};

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Bias-corrected Adam. Rejects the whole step (parameters and state left
// untouched) if any gradient is non-finite.
template <typename T>
void adam_step(std::span<Parameter<T>> params, OptimizerState& state);

// Plain gradient descent, no momentum. Same rejection rule as adam_step.
template <typename T>
void sgd_step(std::span<Parameter<T>> params, OptimizerState& state);

template <typename T>
void optimizer_step(std::span<Parameter<T>> params, OptimizerState& state) {
  if (state.kind == OptimizerKind::kAdam)
    adam_step(params, state);
  else
    sgd_step(params, state);
}

}  // namespace shharm::nn
