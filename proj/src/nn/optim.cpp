#include "shharm/nn/optim.hpp"

#include <cmath>

#include "shharm/error.hpp"

namespace shharm::nn {

namespace {

template <typename T>
void check_gradients(std::span<Parameter<T>> params) {
  for (const auto& p : params) {
    if (p.grad.size() != p.value.size())
      throw ValidationError("gradient of '" + p.name + "' has " + std::to_string(p.grad.size()) + " entries, expected " +
                            std::to_string(p.value.size()));
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (!std::isfinite(p.grad[i]))
        throw NumericalError("non-finite gradient in '" + p.name + "' at element " + std::to_string(i) +
                             "; optimizer step rejected");
  }
}

}  // namespace

template <typename T>
void adam_step(std::span<Parameter<T>> params, OptimizerState& state) {
  check_gradients(params);
  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), {});
    state.second_moment.assign(params.size(), {});
    for (std::size_t k = 0; k < params.size(); ++k) {
      state.first_moment[k].assign(params[k].value.size(), 0.0);
      state.second_moment[k].assign(params[k].value.size(), 0.0);
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != p.value.size()) throw ValidationError("optimizer state does not match parameter '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] = static_cast<T>(p.value[i] - state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

template <typename T>
void sgd_step(std::span<Parameter<T>> params, OptimizerState& state) {
  check_gradients(params);
  ++state.step;
  for (auto& p : params)
    for (std::size_t i = 0; i < p.value.size(); ++i)
      p.value[i] = static_cast<T>(p.value[i] - state.learning_rate * p.grad[i]);
}

template void adam_step<float>(std::span<Parameter<float>>, OptimizerState&);
template void adam_step<double>(std::span<Parameter<double>>, OptimizerState&);
template void sgd_step<float>(std::span<Parameter<float>>, OptimizerState&);
template void sgd_step<double>(std::span<Parameter<double>>, OptimizerState&);

}  // namespace shharm::nn
