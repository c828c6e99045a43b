#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "shharm/nn/checkpoint.hpp"
#include "shharm/nn/ops.hpp"
#include "shharm/nn/optim.hpp"

namespace shharm {

enum class ModelKind { kShResNet, kGolkovMlp };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct NetworkSpec {
  ModelKind kind = ModelKind::kShResNet;
  int n_resblocks = 2;
  int sh_order = 4;
  int hidden_channels = 32;  // width of the first two convs of each functional unit
  int golkov_hidden = 150;
  int pre_layers = 1;
  int post_layers = 1;
  int reduction_layers = 1;
  // "kaiming": every weight random. "identity": SHResNet starts as the
  // identity on the centre voxel (Dirac pre/reduction, zero post and zero
  // last conv in each functional unit); other weights stay Kaiming.
  std::string init = "identity";
  std::uint64_t seed = 0;

  int n_coef() const { return (sh_order + 1) * (sh_order + 2) / 2; }
  // Output width of each order's functional unit: 1, 5, 9, ...
  std::vector<int> order_sizes() const;
  void validate() const;

  nlohmann::json to_json() const;
  static NetworkSpec from_json(const nlohmann::json& j);
  // Hash of the architecture fields (the seed is excluded).
  std::uint64_t architecture_hash() const;
};

template <typename T>
struct NetworkParams {
  NetworkSpec spec;
  std::vector<nn::Parameter<T>> params;

  std::size_t scalar_count() const;
  const nn::Parameter<T>& at(std::string_view name) const;
  nn::Parameter<T>& at(std::string_view name);
  void zero_grad();
  std::uint64_t checksum() const;

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    out.spec = spec;
    for (const auto& p : params) out.params.push_back({p.name, p.shape, std::vector<U>(p.value.begin(), p.value.end()), {}});
    return out;
  }
};

// Kaiming-uniform (fan-in) weights, zero biases, all drawn from `seed`.
template <typename T>
NetworkParams<T> build_network(const NetworkSpec& spec, std::uint64_t seed);

// Parameters bound as leaves of a fresh graph.
template <typename T>
class BoundNetwork {
 public:
  BoundNetwork(const NetworkParams<T>& params, bool requires_grad);

  // SHResNet: [C, 3, 3, 3, B] -> [C, B]. Golkov: [C, B] -> [C, B].
  nn::Var<T> forward(const nn::Var<T>& input) const;

  // One ResBlock: h - concat(unit_l(h) for each order).
  nn::Var<T> resblock(int block, const nn::Var<T>& h) const;

  // Adds the leaves' gradients into `into` (same layout as the bound params).
  void accumulate_grads(NetworkParams<T>& into) const;
  std::vector<std::vector<T>> gradients() const;

 private:
  const nn::Var<T>& leaf(const std::string& name) const;
  nn::Var<T> conv(const std::string& prefix, const nn::Var<T>& x, int padding) const;
  nn::Var<T> conv_stack(const std::string& prefix, int layers, const nn::Var<T>& x) const;

  NetworkSpec spec_;
  std::vector<std::string> names_;
  std::vector<nn::Var<T>> leaves_;
};

// Sample-major patches [B][C][27] -> network input [C][27][B].
template <typename T>
std::vector<T> pack_patches(std::span<const float> samples, int batch, int channels);

// Batched inference on sample-major patches [B][C][27]; returns [B][C].
// Golkov models read only the centre tap of each patch.
template <typename T>
std::vector<T> predict(const NetworkParams<T>& params, std::span<const float> patches, int batch);

// Single-sample convenience wrappers.
template <typename T>
std::vector<T> forward(const NetworkParams<T>& params, std::span<const T> patch);
template <typename T>
std::vector<T> golkov_forward(const NetworkParams<T>& params, std::span<const T> center_coeffs);

// Checkpoint + JSON descriptor (`<path>.json`).
void save_network(const std::filesystem::path& path, const NetworkParams<float>& params);
NetworkParams<float> load_network(const std::filesystem::path& path);

}  // namespace shharm
