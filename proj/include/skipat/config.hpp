#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace skipat {

/// Invalid model or training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// What replaces the MSA branch at a skipped layer.
enum class PhiKind { none, identity, conv, dwc, skipat, attn_reuse };

const char* phi_kind_name(PhiKind kind);
PhiKind parse_phi_kind(const std::string& name);

/// Parameter-free variants can run from a vanilla checkpoint.
bool phi_is_parameter_free(PhiKind kind);

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t in_channels = 3;
  std::size_t embed_dim = 192;
  std::size_t depth = 12;
  std::size_t heads = 3;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 1000;
  std::vector<std::size_t> skip_layers;  // 1-based, sorted
  PhiKind phi_kind = PhiKind::none;
  std::size_t dwc_kernel = 5;
  double expansion = 2.0;
  bool phi_shared = false;
  bool use_cls_token = true;

  /// Patches per side.
  std::size_t grid() const { return image_size / patch_size; }
  /// Patch tokens n.
  std::size_t num_patches() const { return grid() * grid(); }
  /// Sequence length N (n + 1 with a CLS token).
  std::size_t tokens() const { return num_patches() + (use_cls_token ? 1 : 0); }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }
  std::size_t mlp_hidden() const;
  /// ⌈e·d⌉, at least 1.
  std::size_t expanded_dim() const;
  /// ECA kernel for the d output channels of Φ.
  std::size_t eca_kernel() const;

  bool is_skipped(std::size_t layer) const;
  /// True when `layer` replaces its MSA branch with a Φ variant other than attention reuse.
  bool uses_phi(std::size_t layer) const {
    return is_skipped(layer) && phi_kind != PhiKind::attn_reuse;
  }

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json config_to_json(const ModelConfig& config);
/// Strict: unknown keys and type mismatches are rejected.
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig parse_config(const std::string& text);
ModelConfig load_config(const std::filesystem::path& path);
std::string config_dump(const ModelConfig& config);
/// FNV-1a of the canonical JSON, 16 hex digits.
std::string config_fingerprint(const ModelConfig& config);

namespace presets {
ModelConfig vit_tiny();   // d=192, L=12, h=3, p=16, 224²
ModelConfig vit_small();  // d=384, h=6
ModelConfig vit_base();   // d=768, h=12
/// Copy of `base` with the given skip set and Φ settings.
ModelConfig with_skip(ModelConfig base, std::vector<std::size_t> layers, PhiKind kind,
                      std::size_t kernel = 5, double expansion = 2.0);
std::vector<std::size_t> layer_range(std::size_t first, std::size_t last);
}  // namespace presets

}  // namespace skipat
