#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "skipat/config.hpp"
#include "skipat/rng.hpp"
#include "skipat/tensor.hpp"

namespace skipat {

/// How a parameter is initialized and whether weight decay applies to it.
enum class ParamRole { weight, bias, norm_scale, norm_shift, embedding };

struct ParamSpec {
  std::string name;
  Dims dims;
  ParamRole role;
};

/// Parameter names, shapes and roles for a config, in canonical order. The
/// name set is a pure function of the config; shared Φ weights appear once.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

/// Total scalar count of parameter_specs(config).
std::size_t parameter_census(const ModelConfig& config);

/// Prefix under which the Φ weights used by `layer` live.
std::string phi_prefix(const ModelConfig& config, std::size_t layer);
std::string layer_prefix(std::size_t layer);

bool decays(ParamRole role);

/// Missing or mis-shaped tensor when binding parameters to a config.
class MissingTensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered name -> (value, grad) map.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ParamRole role = ParamRole::weight;
    GradPair<T> param;
  };

  void add(std::string name, Tensor<T> value, ParamRole role = ParamRole::weight);

  bool contains(const std::string& name) const { return index_.contains(name); }
  const Tensor<T>& value(const std::string& name) const { return at(name).param.value; }
  Tensor<T>& value(const std::string& name) { return at(name).param.value; }
  /// Gradient slot, zero-initialized on first access.
  Tensor<T>& grad(const std::string& name) { return at(name).param.grad_slot(); }

  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t element_count() const;

  void zero_grad();

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.param.value.template cast<U>(), e.role);
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Truncated-normal(0.02) weights, zero biases, unit LN scales.
template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& config, Rng& rng);

/// All parameters set to `value` (LN scales included).
template <typename T>
ParameterStore<T> constant_parameters(const ModelConfig& config, T value);

/// Selects the tensors `config` needs from `source`, in canonical order.
/// Extra tensors are ignored; a missing or mis-shaped one raises
/// MissingTensorError naming the first offender.
template <typename T>
ParameterStore<T> bind_parameters(const ModelConfig& config, const ParameterStore<T>& source);

}  // namespace skipat
