#include "skipat/params.hpp"

#include <numeric>

namespace skipat {

std::string layer_prefix(std::size_t layer) { return "blocks." + std::to_string(layer) + "."; }

std::string phi_prefix(const ModelConfig& config, std::size_t layer) {
  return config.phi_shared ? std::string("phi.") : layer_prefix(layer) + "phi.";
}

bool decays(ParamRole role) { return role == ParamRole::weight; }

namespace {

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
                std::size_t outd) {
  out.push_back({prefix + "weight", {in, outd}, ParamRole::weight});
  out.push_back({prefix + "bias", {outd}, ParamRole::bias});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + "weight", {d}, ParamRole::norm_scale});
  out.push_back({prefix + "bias", {d}, ParamRole::norm_shift});
}

void add_phi(std::vector<ParamSpec>& out, const ModelConfig& c, const std::string& prefix) {
  const std::size_t d = c.embed_dim;
  const std::size_t r = c.dwc_kernel;
  switch (c.phi_kind) {
    case PhiKind::skipat: {
      const std::size_t e = c.expanded_dim();
      add_linear(out, prefix + "fc1.", d, e);
      out.push_back({prefix + "dwc.weight", {e, r, r}, ParamRole::weight});
      out.push_back({prefix + "dwc.bias", {e}, ParamRole::bias});
      add_linear(out, prefix + "fc2.", e, d);
      out.push_back({prefix + "eca.weight", {c.eca_kernel()}, ParamRole::weight});
      break;
    }
    case PhiKind::dwc:
      out.push_back({prefix + "dwc.weight", {d, r, r}, ParamRole::weight});
      out.push_back({prefix + "dwc.bias", {d}, ParamRole::bias});
      break;
    case PhiKind::conv:
      out.push_back({prefix + "conv.weight", {d, d, r, r}, ParamRole::weight});
      out.push_back({prefix + "conv.bias", {d}, ParamRole::bias});
      break;
    default:
      break;
  }
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.embed_dim;
  std::vector<ParamSpec> out;
  add_linear(out, "patch_embed.", c.patch_dim(), d);
  if (c.use_cls_token) out.push_back({"cls_token", {d}, ParamRole::embedding});
  out.push_back({"pos_embed", {c.tokens(), d}, ParamRole::embedding});

  const bool phi_has_params = !phi_is_parameter_free(c.phi_kind);
  bool shared_emitted = false;
  for (std::size_t l = 1; l <= c.depth; ++l) {
    const std::string p = layer_prefix(l);
    // norm1 stays in the census at skipped layers so that a vanilla
    // checkpoint and its skip-enabled variants share the same layout.
    add_norm(out, p + "norm1.", d);
    if (!c.is_skipped(l)) {
      add_linear(out, p + "attn.q.", d, d);
      add_linear(out, p + "attn.k.", d, d);
      add_linear(out, p + "attn.v.", d, d);
      add_linear(out, p + "attn.proj.", d, d);
    } else if (c.phi_kind == PhiKind::attn_reuse) {
      add_linear(out, p + "attn.v.", d, d);
      add_linear(out, p + "attn.proj.", d, d);
    } else if (phi_has_params && !(c.phi_shared && shared_emitted)) {
      add_phi(out, c, phi_prefix(c, l));
      shared_emitted = true;
    }
    add_norm(out, p + "norm2.", d);
    add_linear(out, p + "mlp.fc1.", d, c.mlp_hidden());
    add_linear(out, p + "mlp.fc2.", c.mlp_hidden(), d);
  }
  add_norm(out, "norm.", d);
  add_linear(out, "head.", d, c.num_classes);
  return out;
}

std::size_t parameter_census(const ModelConfig& config) {
  std::size_t total = 0;
  for (const auto& s : parameter_specs(config)) total += dims_product(s.dims);
  return total;
}

template <typename T>
void ParameterStore<T>::add(std::string name, Tensor<T> value, ParamRole role) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), role, GradPair<T>{std::move(value), std::nullopt}});
}

template <typename T>
typename ParameterStore<T>::Entry& ParameterStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw MissingTensorError("missing tensor: " + name);
  return entries_[it->second];
}

template <typename T>
const typename ParameterStore<T>::Entry& ParameterStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw MissingTensorError("missing tensor: " + name);
  return entries_[it->second];
}

template <typename T>
std::size_t ParameterStore<T>::element_count() const {
  return std::accumulate(entries_.begin(), entries_.end(), std::size_t{0},
                         [](std::size_t acc, const Entry& e) { return acc + e.param.value.size(); });
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& e : entries_) e.param.zero_grad();
}

template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& config, Rng& rng) {
  ParameterStore<T> store;
  for (const auto& spec : parameter_specs(config)) {
    switch (spec.role) {
      case ParamRole::weight:
      case ParamRole::embedding:
        store.add(spec.name, rand_trunc_normal<T>(rng, spec.dims, 0.0, 0.02, -0.04, 0.04),
                  spec.role);
        break;
      case ParamRole::norm_scale:
        store.add(spec.name, Tensor<T>(spec.dims, T(1)), spec.role);
        break;
      case ParamRole::bias:
      case ParamRole::norm_shift:
        store.add(spec.name, Tensor<T>(spec.dims), spec.role);
        break;
    }
  }
  return store;
}

template <typename T>
ParameterStore<T> constant_parameters(const ModelConfig& config, T value) {
  ParameterStore<T> store;
  for (const auto& spec : parameter_specs(config)) {
    store.add(spec.name, Tensor<T>(spec.dims, value), spec.role);
  }
  return store;
}

template <typename T>
ParameterStore<T> bind_parameters(const ModelConfig& config, const ParameterStore<T>& source) {
  ParameterStore<T> out;
  for (const auto& spec : parameter_specs(config)) {
    if (!source.contains(spec.name)) throw MissingTensorError("missing tensor: " + spec.name);
    const auto& t = source.value(spec.name);
    if (t.dims() != spec.dims) {
      throw MissingTensorError("tensor " + spec.name + " has dims " + dims_to_string(t.dims()) +
                               ", config needs " + dims_to_string(spec.dims));
    }
    out.add(spec.name, t, spec.role);
  }
  return out;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template ParameterStore<float> init_parameters(const ModelConfig&, Rng&);
template ParameterStore<double> init_parameters(const ModelConfig&, Rng&);
template ParameterStore<float> constant_parameters(const ModelConfig&, float);
template ParameterStore<double> constant_parameters(const ModelConfig&, double);
template ParameterStore<float> bind_parameters(const ModelConfig&, const ParameterStore<float>&);
template ParameterStore<double> bind_parameters(const ModelConfig&, const ParameterStore<double>&);

}  // namespace skipat
