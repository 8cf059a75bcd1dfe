#include "skipat/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "skipat/binary_io.hpp"
#include "skipat/skipat.hpp"

namespace skipat {

const char* phi_kind_name(PhiKind kind) {
  switch (kind) {
    case PhiKind::none: return "none";
    case PhiKind::identity: return "identity";
    case PhiKind::conv: return "conv";
    case PhiKind::dwc: return "dwc";
    case PhiKind::skipat: return "skipat";
    case PhiKind::attn_reuse: return "attn_reuse";
  }
  return "none";
}

PhiKind parse_phi_kind(const std::string& name) {
  for (PhiKind k : {PhiKind::none, PhiKind::identity, PhiKind::conv, PhiKind::dwc,
                    PhiKind::skipat, PhiKind::attn_reuse}) {
    if (name == phi_kind_name(k)) return k;
  }
  throw ConfigError("phi_kind must be one of none, identity, conv, dwc, skipat, attn_reuse; got \"" +
                    name + "\"");
}

bool phi_is_parameter_free(PhiKind kind) {
  return kind == PhiKind::none || kind == PhiKind::identity || kind == PhiKind::attn_reuse;
}

std::size_t ModelConfig::mlp_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

std::size_t ModelConfig::expanded_dim() const {
  const double scaled = std::ceil(expansion * static_cast<double>(embed_dim) - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(scaled));
}

std::size_t ModelConfig::eca_kernel() const { return eca_kernel_size(embed_dim); }

bool ModelConfig::is_skipped(std::size_t layer) const {
  return std::binary_search(skip_layers.begin(), skip_layers.end(), layer);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0) {
    fail("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
         std::to_string(patch_size));
  }
  if (in_channels == 0) fail("in_channels must be positive");
  if (embed_dim == 0 || heads == 0) fail("embed_dim and heads must be positive");
  if (embed_dim % heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
         std::to_string(heads));
  }
  if (num_classes == 0) fail("num_classes must be positive");
  if (!(mlp_ratio > 0) || mlp_hidden() == 0) fail("mlp_ratio must give a positive hidden width");
  if (!(expansion > 0)) fail("expansion must be positive");
  if (!std::is_sorted(skip_layers.begin(), skip_layers.end()) ||
      std::adjacent_find(skip_layers.begin(), skip_layers.end()) != skip_layers.end()) {
    fail("skip_layers must be strictly increasing");
  }
  for (std::size_t l : skip_layers) {
    if (l == 1) {
      fail("skip_layers contains layer 1, whose provider would be layer 0; layer 1 must compute "
           "a real MSA");
    }
    if (l == 0 || l > depth) {
      fail("skip layer " + std::to_string(l) + " outside 2.." + std::to_string(depth));
    }
  }
  if (!skip_layers.empty() && phi_kind == PhiKind::none) {
    fail("skip_layers is non-empty but phi_kind is none");
  }
  if ((phi_kind == PhiKind::conv || phi_kind == PhiKind::dwc || phi_kind == PhiKind::skipat) &&
      dwc_kernel % 2 == 0) {
    fail("dwc_kernel must be odd, got " + std::to_string(dwc_kernel));
  }
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"image_size", c.image_size},
                        {"patch_size", c.patch_size},
                        {"in_channels", c.in_channels},
                        {"embed_dim", c.embed_dim},
                        {"depth", c.depth},
                        {"heads", c.heads},
                        {"mlp_ratio", c.mlp_ratio},
                        {"num_classes", c.num_classes},
                        {"skip_layers", c.skip_layers},
                        {"phi_kind", phi_kind_name(c.phi_kind)},
                        {"dwc_kernel", c.dwc_kernel},
                        {"expansion", c.expansion},
                        {"phi_shared", c.phi_shared},
                        {"use_cls_token", c.use_cls_token}};
}

namespace {

std::size_t get_count(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("field \"" + key + "\" must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

double get_number(const nlohmann::json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("field \"" + key + "\" must be a number");
  return v.get<double>();
}

bool get_bool(const nlohmann::json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError("field \"" + key + "\" must be a boolean");
  return v.get<bool>();
}

}  // namespace

ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> required = {"image_size", "patch_size", "in_channels",
                                                 "embed_dim",  "depth",      "heads",
                                                 "num_classes"};
  static const std::set<std::string> known = {
      "image_size",  "patch_size",  "in_channels", "embed_dim",  "depth",
      "heads",       "mlp_ratio",   "num_classes", "skip_layers", "phi_kind",
      "dwc_kernel",  "expansion",   "phi_shared",  "use_cls_token"};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key \"" + key + "\"");
  }
  for (const auto& key : required) {
    if (!j.contains(key)) throw ConfigError("missing config key \"" + key + "\"");
  }
  ModelConfig c;
  c.image_size = get_count(j.at("image_size"), "image_size");
  c.patch_size = get_count(j.at("patch_size"), "patch_size");
  c.in_channels = get_count(j.at("in_channels"), "in_channels");
  c.embed_dim = get_count(j.at("embed_dim"), "embed_dim");
  c.depth = get_count(j.at("depth"), "depth");
  c.heads = get_count(j.at("heads"), "heads");
  c.num_classes = get_count(j.at("num_classes"), "num_classes");
  if (j.contains("mlp_ratio")) c.mlp_ratio = get_number(j.at("mlp_ratio"), "mlp_ratio");
  if (j.contains("skip_layers")) {
    const auto& s = j.at("skip_layers");
    if (!s.is_array()) throw ConfigError("field \"skip_layers\" must be an array");
    for (const auto& v : s) c.skip_layers.push_back(get_count(v, "skip_layers"));
    std::sort(c.skip_layers.begin(), c.skip_layers.end());
  }
  if (j.contains("phi_kind")) {
    if (!j.at("phi_kind").is_string()) throw ConfigError("field \"phi_kind\" must be a string");
    c.phi_kind = parse_phi_kind(j.at("phi_kind").get<std::string>());
  }
  if (j.contains("dwc_kernel")) c.dwc_kernel = get_count(j.at("dwc_kernel"), "dwc_kernel");
  if (j.contains("expansion")) c.expansion = get_number(j.at("expansion"), "expansion");
  if (j.contains("phi_shared")) c.phi_shared = get_bool(j.at("phi_shared"), "phi_shared");
  if (j.contains("use_cls_token")) {
    c.use_cls_token = get_bool(j.at("use_cls_token"), "use_cls_token");
  }
  c.validate();
  return c;
}

ModelConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_dump(const ModelConfig& config) { return config_to_json(config).dump(); }

std::string config_fingerprint(const ModelConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_dump(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace presets {

ModelConfig vit_tiny() { return ModelConfig{}; }

ModelConfig vit_small() {
  ModelConfig c;
  c.embed_dim = 384;
  c.heads = 6;
  return c;
}

ModelConfig vit_base() {
  ModelConfig c;
  c.embed_dim = 768;
  c.heads = 12;
  return c;
}

ModelConfig with_skip(ModelConfig base, std::vector<std::size_t> layers, PhiKind kind,
                      std::size_t kernel, double expansion) {
  base.skip_layers = std::move(layers);
  std::sort(base.skip_layers.begin(), base.skip_layers.end());
  base.phi_kind = kind;
  base.dwc_kernel = kernel;
  base.expansion = expansion;
  return base;
}

std::vector<std::size_t> layer_range(std::size_t first, std::size_t last) {
  std::vector<std::size_t> out;
  for (std::size_t l = first; l <= last; ++l) out.push_back(l);
  return out;
}

}  // namespace presets

}  // namespace skipat
