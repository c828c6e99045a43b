#include "shharm/shresnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <omp.h>

#include "shharm/dwi_core.hpp"
#include "shharm/error.hpp"
#include "shharm/random.hpp"

namespace shharm {

using nn::Shape;
using nn::Var;

std::string to_string(ModelKind kind) { return kind == ModelKind::kShResNet ? "shresnet" : "golkov"; }

ModelKind parse_model_kind(std::string_view name) {
  if (name == "shresnet") return ModelKind::kShResNet;
  if (name == "golkov") return ModelKind::kGolkovMlp;
  throw UsageError("unknown model kind '" + std::string(name) + "' (expected shresnet or golkov)");
}

std::vector<int> NetworkSpec::order_sizes() const {
  std::vector<int> out;
  for (int l = 0; l <= sh_order; l += 2) out.push_back(2 * l + 1);
  return out;
}

void NetworkSpec::validate() const {
  if (sh_order < 0 || sh_order % 2 != 0) throw ValidationError("network sh_order must be even and >= 0");
  if (kind == ModelKind::kShResNet) {
    if (n_resblocks < 1) throw ValidationError("SHResNet needs at least one ResBlock");
    if (hidden_channels < 1) throw ValidationError("hidden_channels must be positive");
    if (pre_layers < 1 || post_layers < 1 || reduction_layers < 1)
      throw ValidationError("pre/post/reduction layer counts must be positive");
    if (init != "kaiming" && init != "identity") throw ValidationError("init must be kaiming or identity, got '" + init + "'");
  } else if (golkov_hidden < 1) {
    throw ValidationError("golkov_hidden must be positive");
  }
}

nlohmann::json NetworkSpec::to_json() const {
  return {{"model_kind", to_string(kind)},   {"n_resblocks", n_resblocks}, {"sh_order", sh_order},
          {"hidden_channels", hidden_channels}, {"golkov_hidden", golkov_hidden}, {"pre_layers", pre_layers},
          {"post_layers", post_layers},       {"reduction_layers", reduction_layers}, {"init", init}, {"seed", seed}};
}

NetworkSpec NetworkSpec::from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.kind = parse_model_kind(j.at("model_kind").get<std::string>());
    s.n_resblocks = j.value("n_resblocks", s.n_resblocks);
    s.sh_order = j.value("sh_order", s.sh_order);
    s.hidden_channels = j.value("hidden_channels", s.hidden_channels);
    s.golkov_hidden = j.value("golkov_hidden", s.golkov_hidden);
    s.pre_layers = j.value("pre_layers", s.pre_layers);
    s.post_layers = j.value("post_layers", s.post_layers);
    s.reduction_layers = j.value("reduction_layers", s.reduction_layers);
    s.init = j.value("init", std::string("kaiming"));
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed network descriptor: ") + e.what());
  }
  s.validate();
  return s;
}

std::uint64_t NetworkSpec::architecture_hash() const {
  auto j = to_json();
  j.erase("seed");
  j.erase("init");
  if (kind == ModelKind::kGolkovMlp) {
    for (const char* k : {"n_resblocks", "hidden_channels", "pre_layers", "post_layers", "reduction_layers"}) j.erase(k);
  } else {
    j.erase("golkov_hidden");
  }
  return nn::fnv1a64(j.dump());
}

template <typename T>
std::size_t NetworkParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

template <typename T>
const nn::Parameter<T>& NetworkParams<T>::at(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return p;
  throw ValidationError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
nn::Parameter<T>& NetworkParams<T>::at(std::string_view name) {
  return const_cast<nn::Parameter<T>&>(std::as_const(*this).at(name));
}

template <typename T>
void NetworkParams<T>::zero_grad() {
  for (auto& p : params) p.zero_grad();
}

template <typename T>
std::uint64_t NetworkParams<T>::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    h = nn::fnv1a64(p.name, h);
    h = nn::fnv1a64(std::string_view(reinterpret_cast<const char*>(p.value.data()), p.value.size() * sizeof(T)), h);
  }
  return h;
}

namespace {

template <typename T>
void add_conv(NetworkParams<T>& net, const std::string& prefix, int cout, int cin) {
  net.params.push_back({prefix + ".weight", {cout, cin, 3, 3, 3}, std::vector<T>(static_cast<std::size_t>(cout) * cin * 27), {}});
  net.params.push_back({prefix + ".bias", {cout}, std::vector<T>(static_cast<std::size_t>(cout)), {}});
}

template <typename T>
void add_linear(NetworkParams<T>& net, const std::string& prefix, int nout, int nin) {
  net.params.push_back({prefix + ".weight", {nout, nin}, std::vector<T>(static_cast<std::size_t>(nout) * nin), {}});
  net.params.push_back({prefix + ".bias", {nout}, std::vector<T>(static_cast<std::size_t>(nout)), {}});
}

std::string unit_prefix(int block, int l, int j) {
  return "block." + std::to_string(block) + ".l" + std::to_string(l) + ".conv" + std::to_string(j);
}

// Whether the layer's output goes straight into a ReLU.
bool feeds_relu(const NetworkSpec& spec, const std::string& name) {
  const auto stack_inner = [&](const std::string& stack, int layers) {
    for (int i = 0; i + 1 < layers; ++i)
      if (name == stack + "." + std::to_string(i) + ".weight") return true;
    return false;
  };
  if (name.find(".conv0.") != std::string::npos || name.find(".conv1.") != std::string::npos) return true;
  if (name == "fc0.weight" || name == "fc1.weight") return true;
  return stack_inner("pre", spec.pre_layers) || stack_inner("post", spec.post_layers) ||
         stack_inner("reduce", spec.reduction_layers);
}

}  // namespace

template <typename T>
NetworkParams<T> build_network(const NetworkSpec& spec_in, std::uint64_t seed) {
  NetworkSpec spec = spec_in;
  spec.seed = seed;
  spec.validate();
  NetworkParams<T> net;
  net.spec = spec;
  const int c = spec.n_coef();
  if (spec.kind == ModelKind::kShResNet) {
    const int h = spec.hidden_channels;
    for (int i = 0; i < spec.pre_layers; ++i) add_conv(net, "pre." + std::to_string(i), c, c);
    for (int b = 0; b < spec.n_resblocks; ++b) {
      for (int l = 0; l <= spec.sh_order; l += 2) {
        add_conv(net, unit_prefix(b, l, 0), h, c);
        add_conv(net, unit_prefix(b, l, 1), h, h);
        add_conv(net, unit_prefix(b, l, 2), 2 * l + 1, h);
      }
    }
    for (int i = 0; i < spec.post_layers; ++i) add_conv(net, "post." + std::to_string(i), c, c);
    for (int i = 0; i < spec.reduction_layers; ++i) add_conv(net, "reduce." + std::to_string(i), c, c);
  } else {
    const int h = spec.golkov_hidden;
    add_linear(net, "fc0", h, c);
    add_linear(net, "fc1", h, h);
    add_linear(net, "fc2", c, h);
  }

  std::uint64_t k = 0;
  for (auto& p : net.params) {
    ++k;
    if (p.shape.size() == 1) continue;  // biases stay zero
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < p.shape.size(); ++d) fan_in *= static_cast<std::size_t>(p.shape[d]);
    // gain^2 = 2 in front of a ReLU, 1 for layers with a linear output
    const double gain2 = feeds_relu(spec, p.name) ? 2.0 : 1.0;
    const double bound = std::sqrt(3.0 * gain2 / static_cast<double>(fan_in));
    Rng rng(mix_seed(seed, k));
    for (auto& v : p.value) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  if (spec.kind == ModelKind::kShResNet && spec.init == "identity") {
    const auto dirac = [&](const std::string& prefix) {
      auto& w = net.at(prefix + ".weight").value;
      std::fill(w.begin(), w.end(), T(0));
      for (int o = 0; o < c; ++o) w[(static_cast<std::size_t>(o) * c + o) * 27 + 13] = T(1);
    };
    const auto zero = [&](const std::string& prefix) {
      auto& w = net.at(prefix + ".weight").value;
      std::fill(w.begin(), w.end(), T(0));
    };
    for (int i = 0; i < spec.pre_layers; ++i) dirac("pre." + std::to_string(i));
    for (int i = 0; i < spec.reduction_layers; ++i) dirac("reduce." + std::to_string(i));
    for (int i = 0; i + 1 < spec.post_layers; ++i) dirac("post." + std::to_string(i));
    zero("post." + std::to_string(spec.post_layers - 1));
    for (int b = 0; b < spec.n_resblocks; ++b)
      for (int l = 0; l <= spec.sh_order; l += 2) zero(unit_prefix(b, l, 2));
  }
  return net;
}

template <typename T>
BoundNetwork<T>::BoundNetwork(const NetworkParams<T>& params, bool requires_grad) : spec_(params.spec) {
  for (const auto& p : params.params) {
    names_.push_back(p.name);
    leaves_.push_back(requires_grad ? Var<T>::parameter(p.shape, p.value) : Var<T>::constant(p.shape, p.value));
  }
}

template <typename T>
const Var<T>& BoundNetwork<T>::leaf(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return leaves_[i];
  throw ValidationError("network has no parameter '" + name + "'");
}

template <typename T>
Var<T> BoundNetwork<T>::conv(const std::string& prefix, const Var<T>& x, int padding) const {
  return nn::conv3d(x, leaf(prefix + ".weight"), leaf(prefix + ".bias"), padding);
}

template <typename T>
Var<T> BoundNetwork<T>::conv_stack(const std::string& prefix, int layers, const Var<T>& x) const {
  Var<T> h = x;
  for (int i = 0; i < layers; ++i) {
    if (i > 0) h = nn::relu(h);
    h = conv(prefix + "." + std::to_string(i), h, 1);
  }
  return h;
}

template <typename T>
Var<T> BoundNetwork<T>::resblock(int block, const Var<T>& h) const {
  std::vector<Var<T>> outputs;
  for (int l = 0; l <= spec_.sh_order; l += 2) {
    Var<T> u = nn::relu(conv(unit_prefix(block, l, 0), h, 1));
    u = nn::relu(conv(unit_prefix(block, l, 1), u, 1));
    outputs.push_back(conv(unit_prefix(block, l, 2), u, 1));
  }
  return nn::sub(h, nn::concat(outputs));
}

template <typename T>
Var<T> BoundNetwork<T>::forward(const Var<T>& input) const {
  const int c = spec_.n_coef();
  if (spec_.kind == ModelKind::kGolkovMlp) {
    if (input.shape().size() != 2 || input.dim(0) != c)
      throw ValidationError("Golkov input must be [" + std::to_string(c) + ", B], got " + nn::to_string(input.shape()));
    Var<T> h = nn::relu(nn::linear(input, leaf("fc0.weight"), leaf("fc0.bias")));
    h = nn::relu(nn::linear(h, leaf("fc1.weight"), leaf("fc1.bias")));
    return nn::linear(h, leaf("fc2.weight"), leaf("fc2.bias"));
  }
  const auto& s = input.shape();
  if (s.size() != 5 || s[0] != c || s[1] != kPatchSide || s[2] != kPatchSide || s[3] != kPatchSide)
    throw ValidationError("SHResNet input must be [" + std::to_string(c) + ", 3, 3, 3, B], got " + nn::to_string(s));
  const int batch = s[4];
  const Var<T> pre = conv_stack("pre", spec_.pre_layers, input);
  Var<T> h = pre;
  for (int b = 0; b < spec_.n_resblocks; ++b) h = resblock(b, h);
  const Var<T> post = conv_stack("post", spec_.post_layers, h);
  Var<T> r = nn::sub(pre, post);
  r = conv("reduce.0", r, 0);
  for (int i = 1; i < spec_.reduction_layers; ++i) r = conv("reduce." + std::to_string(i), nn::relu(r), 1);
  return nn::reshape(r, {c, batch});
}

template <typename T>
void BoundNetwork<T>::accumulate_grads(NetworkParams<T>& into) const {
  for (std::size_t i = 0; i < leaves_.size(); ++i) {
    auto& p = into.params[i];
    if (p.grad.size() != p.value.size()) p.zero_grad();
    const auto g = leaves_[i].grad();
    for (std::size_t k = 0; k < g.size(); ++k) p.grad[k] += g[k];
  }
}

template <typename T>
std::vector<std::vector<T>> BoundNetwork<T>::gradients() const {
  std::vector<std::vector<T>> out;
  for (const auto& l : leaves_) {
    const auto g = l.grad();
    out.emplace_back(g.begin(), g.end());
    out.back().resize(l.size(), T(0));
  }
  return out;
}

template <typename T>
std::vector<T> pack_patches(std::span<const float> samples, int batch, int channels) {
  std::vector<T> out(static_cast<std::size_t>(batch) * channels * kPatchTaps);
  for (int b = 0; b < batch; ++b)
    for (int c = 0; c < channels; ++c)
      for (int k = 0; k < kPatchTaps; ++k)
        out[(static_cast<std::size_t>(c) * kPatchTaps + k) * batch + b] =
            static_cast<T>(samples[(static_cast<std::size_t>(b) * channels + c) * kPatchTaps + k]);
  return out;
}

namespace {

constexpr int kInferenceChunk = 64;

template <typename T>
void predict_chunk(const BoundNetwork<T>& net, const NetworkSpec& spec, std::span<const float> patches, int batch,
                   std::span<T> out) {
  const int c = spec.n_coef();
  Var<T> input;
  if (spec.kind == ModelKind::kShResNet) {
    input = Var<T>::constant({c, 3, 3, 3, batch}, pack_patches<T>(patches, batch, c));
  } else {
    std::vector<T> centers(static_cast<std::size_t>(c) * batch);
    const int center = patch_tap(0, 0, 0);
    for (int b = 0; b < batch; ++b)
      for (int ch = 0; ch < c; ++ch)
        centers[static_cast<std::size_t>(ch) * batch + b] =
            static_cast<T>(patches[(static_cast<std::size_t>(b) * c + ch) * kPatchTaps + center]);
    input = Var<T>::constant({c, batch}, std::move(centers));
  }
  const Var<T> result = net.forward(input);
  const auto y = result.value();
  for (int b = 0; b < batch; ++b)
    for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(b) * c + ch] = y[static_cast<std::size_t>(ch) * batch + b];
}

}  // namespace

template <typename T>
std::vector<T> predict(const NetworkParams<T>& params, std::span<const float> patches, int batch) {
  const int c = params.spec.n_coef();
  if (patches.size() != static_cast<std::size_t>(batch) * c * kPatchTaps)
    throw ValidationError("predict: expected " + std::to_string(batch) + " patches of " + std::to_string(c * kPatchTaps) +
                          " values");
  std::vector<T> out(static_cast<std::size_t>(batch) * c);
  const BoundNetwork<T> net(params, false);
  const int chunks = (batch + kInferenceChunk - 1) / kInferenceChunk;
#pragma omp parallel for schedule(static)
  for (int k = 0; k < chunks; ++k) {
    const int start = k * kInferenceChunk;
    const int n = std::min(kInferenceChunk, batch - start);
    const std::size_t stride = static_cast<std::size_t>(c) * kPatchTaps;
    predict_chunk(net, params.spec, patches.subspan(start * stride, n * stride), n,
                  std::span<T>(out).subspan(static_cast<std::size_t>(start) * c, static_cast<std::size_t>(n) * c));
  }
  return out;
}

template <typename T>
std::vector<T> forward(const NetworkParams<T>& params, std::span<const T> patch) {
  const int c = params.spec.n_coef();
  if (params.spec.kind != ModelKind::kShResNet) throw ValidationError("forward() expects an SHResNet");
  if (patch.size() != static_cast<std::size_t>(c) * kPatchTaps)
    throw ValidationError("patch must hold " + std::to_string(c * kPatchTaps) + " values");
  const BoundNetwork<T> net(params, false);
  const Var<T> result = net.forward(Var<T>::constant({c, 3, 3, 3, 1}, std::vector<T>(patch.begin(), patch.end())));
  const auto y = result.value();
  return {y.begin(), y.end()};
}

template <typename T>
std::vector<T> golkov_forward(const NetworkParams<T>& params, std::span<const T> center_coeffs) {
  const int c = params.spec.n_coef();
  if (params.spec.kind != ModelKind::kGolkovMlp) throw ValidationError("golkov_forward() expects a Golkov model");
  if (center_coeffs.size() != static_cast<std::size_t>(c))
    throw ValidationError("Golkov input must hold " + std::to_string(c) + " coefficients");
  const BoundNetwork<T> net(params, false);
  const Var<T> result = net.forward(Var<T>::constant({c, 1}, std::vector<T>(center_coeffs.begin(), center_coeffs.end())));
  const auto y = result.value();
  return {y.begin(), y.end()};
}

void save_network(const std::filesystem::path& path, const NetworkParams<float>& params) {
  nn::Checkpoint ckpt;
  ckpt.architecture_hash = params.spec.architecture_hash();
  for (const auto& p : params.params) ckpt.entries.push_back({p.name, p.shape, p.value});
  nn::write_checkpoint(path, ckpt);
  nlohmann::json desc = params.spec.to_json();
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(ckpt.architecture_hash));
  desc["architecture_hash"] = hex;
  std::ofstream out(path.string() + ".json");
  if (!out) throw IoError("cannot write network descriptor for " + path.string());
  out << desc.dump(2) << '\n';
}

NetworkParams<float> load_network(const std::filesystem::path& path) {
  const std::filesystem::path desc_path = path.string() + ".json";
  std::ifstream in(desc_path);
  if (!in) throw IoError("missing network descriptor " + desc_path.string());
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(desc_path.string() + ": " + e.what());
  }
  const NetworkSpec spec = NetworkSpec::from_json(desc);
  const auto ckpt = nn::read_checkpoint(path);
  if (ckpt.architecture_hash != spec.architecture_hash())
    throw ValidationError("checkpoint architecture hash does not match its descriptor " + desc_path.string());
  auto params = build_network<float>(spec, spec.seed);
  if (ckpt.entries.size() != params.params.size())
    throw ValidationError("checkpoint holds " + std::to_string(ckpt.entries.size()) + " parameters, architecture needs " +
                          std::to_string(params.params.size()));
  for (std::size_t i = 0; i < ckpt.entries.size(); ++i) {
    auto& p = params.params[i];
    const auto& e = ckpt.entries[i];
    if (e.name != p.name || e.shape != p.shape)
      throw ValidationError("checkpoint parameter '" + e.name + "' does not match architecture slot '" + p.name + "'");
    p.value = e.values;
  }
  return params;
}

#define SHHARM_INSTANTIATE(T)                                                                       \
  template struct NetworkParams<T>;                                                                 \
  template NetworkParams<T> build_network<T>(const NetworkSpec&, std::uint64_t);                    \
  template class BoundNetwork<T>;                                                                   \
  template std::vector<T> pack_patches<T>(std::span<const float>, int, int);                        \
  template std::vector<T> predict<T>(const NetworkParams<T>&, std::span<const float>, int);         \
  template std::vector<T> forward<T>(const NetworkParams<T>&, std::span<const T>);                  \
  template std::vector<T> golkov_forward<T>(const NetworkParams<T>&, std::span<const T>);

SHHARM_INSTANTIATE(float)
SHHARM_INSTANTIATE(double)

#undef SHHARM_INSTANTIATE

}  // namespace shharm
