#include "skipat/flops.hpp"

#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "skipat/vit.hpp"

namespace skipat {

std::uint64_t msa_macs(std::uint64_t tokens, std::uint64_t d) {
  return 4 * tokens * d * d + 2 * tokens * tokens * d;
}

std::uint64_t attn_reuse_macs(std::uint64_t tokens, std::uint64_t d) {
  return 2 * tokens * d * d + tokens * tokens * d;
}

std::uint64_t skipat_phi_macs(std::uint64_t n, std::uint64_t d, std::uint64_t r, double e) {
  ModelConfig c;
  c.embed_dim = d;
  c.expansion = e;
  const std::uint64_t hidden = c.expanded_dim();
  return 2 * n * d * hidden + n * hidden * r * r + d * c.eca_kernel();
}

std::uint64_t phi_macs(const ModelConfig& c) {
  const std::uint64_t n = c.num_patches(), d = c.embed_dim, r = c.dwc_kernel;
  switch (c.phi_kind) {
    case PhiKind::skipat: return skipat_phi_macs(n, d, r, c.expansion);
    case PhiKind::dwc: return n * d * r * r;
    case PhiKind::conv: return n * d * d * r * r;
    default: return 0;
  }
}

std::uint64_t mlp_macs(const ModelConfig& c) {
  return 2 * std::uint64_t{c.tokens()} * c.embed_dim * c.mlp_hidden();
}

namespace {

// Block that owns a parameter: embeddings go with patch_embed, norm1 with the
// layer's token-mixing branch, norm2 with the MLP, a shared Φ with the first
// Φ layer, and the final norm with the head.
std::string owner_block(const ModelConfig& c, const std::string& name) {
  if (name.starts_with("patch_embed.") || name == "cls_token" || name == "pos_embed") {
    return block_id(0, BlockKind::patch_embed);
  }
  if (name.starts_with("norm.") || name.starts_with("head.")) return block_id(0, BlockKind::head);
  if (name.starts_with("phi.") && !c.skip_layers.empty()) {
    return block_id(c.skip_layers.front(), BlockKind::phi);
  }
  if (name.starts_with("blocks.")) {
    const std::size_t dot = name.find('.', 7);
    const std::size_t l = std::stoul(name.substr(7, dot - 7));
    const std::string rest = name.substr(dot + 1);
    if (rest.starts_with("norm2.") || rest.starts_with("mlp.")) return block_id(l, BlockKind::mlp);
    if (!c.is_skipped(l)) return block_id(l, BlockKind::msa);
    if (c.phi_kind == PhiKind::attn_reuse) return block_id(l, BlockKind::attn_reuse_msa);
    return block_id(l, BlockKind::phi);
  }
  return name;
}

void fill_params(const ModelConfig& c, FlopsReport& report) {
  for (const auto& spec : parameter_specs(c)) {
    const std::string owner = owner_block(c, spec.name);
    for (auto& e : report.entries) {
      if (e.block == owner) {
        e.params += dims_product(spec.dims);
        break;
      }
    }
  }
}

void finish(const ModelConfig& c, FlopsReport& report) {
  fill_params(c, report);
  report.total_macs = report.total_params = report.total_minor_ops = 0;
  for (const auto& e : report.entries) {
    report.total_macs += e.macs;
    report.total_params += e.params;
    report.total_minor_ops += e.minor_ops;
  }
  report.fingerprint = config_fingerprint(c);
}

}  // namespace

FlopsReport analytic_flops(const ModelConfig& c) {
  c.validate();
  const std::uint64_t n = c.num_patches(), big_n = c.tokens(), d = c.embed_dim;
  const std::uint64_t hidden = c.mlp_hidden(), h = c.heads;
  const std::uint64_t ln = 2 * big_n * d;  // normalize + affine, counted per element pair
  const std::uint64_t residual = big_n * d;

  FlopsReport r;
  r.entries.push_back({block_id(0, BlockKind::patch_embed), BlockKind::patch_embed,
                       n * d * c.patch_dim(), 0, big_n * d});
  for (std::size_t l = 1; l <= c.depth; ++l) {
    if (!c.is_skipped(l)) {
      r.entries.push_back({block_id(l, BlockKind::msa), BlockKind::msa, msa_macs(big_n, d), 0,
                           ln + h * big_n * big_n + residual});
    } else if (c.phi_kind == PhiKind::attn_reuse) {
      r.entries.push_back({block_id(l, BlockKind::attn_reuse_msa), BlockKind::attn_reuse_msa,
                           attn_reuse_macs(big_n, d), 0, ln + residual});
    } else {
      std::uint64_t minor = residual;
      if (c.phi_kind == PhiKind::skipat) {
        // two GeLUs over the expanded width, ECA pooling, sigmoid and gating
        minor += 2 * n * c.expanded_dim() + 2 * n * d + d;
      }
      r.entries.push_back({block_id(l, BlockKind::phi), BlockKind::phi, phi_macs(c), 0, minor});
    }
    r.entries.push_back({block_id(l, BlockKind::mlp), BlockKind::mlp, mlp_macs(c), 0,
                         ln + big_n * hidden + residual});
  }
  const std::uint64_t pool = c.use_cls_token ? 0 : big_n * d;
  r.entries.push_back({block_id(0, BlockKind::head), BlockKind::head,
                       d * std::uint64_t{c.num_classes}, 0, pool + 2 * d});
  finish(c, r);
  return r;
}

template <typename T>
FlopsReport runtime_mac_count(const ModelConfig& c, const ParameterStore<T>& params,
                              const Tensor<T>& image) {
  Tensor<T> batch = image;
  if (image.rank() == 3) batch = image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
  if (batch.rank() != 4 || batch.dim(0) != 1) {
    throw ShapeError("runtime_mac_count: expected one c×H×W image, got " +
                     dims_to_string(image.dims()));
  }
  const VisionTransformer<T> model(c, params);
  MacCounter counter;
  model.logits(batch, &counter);
  FlopsReport r;
  for (const auto& e : counter.entries()) r.entries.push_back({e.block, e.kind, e.macs, 0, 0});
  finish(c, r);
  return r;
}

std::vector<std::string> compare_macs(const FlopsReport& a, const FlopsReport& b) {
  std::vector<std::string> out;
  const std::size_t count = std::max(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < count; ++i) {
    const FlopsEntry* x = i < a.entries.size() ? &a.entries[i] : nullptr;
    const FlopsEntry* y = i < b.entries.size() ? &b.entries[i] : nullptr;
    if (x != nullptr && y != nullptr && x->block == y->block && x->kind == y->kind &&
        x->macs == y->macs) {
      continue;
    }
    std::string line = x != nullptr ? x->block : y->block;
    line += ": analytic " + (x != nullptr ? x->block + "=" + std::to_string(x->macs) : "absent");
    line += " vs runtime " + (y != nullptr ? y->block + "=" + std::to_string(y->macs) : "absent");
    out.push_back(line);
  }
  if (a.total_macs != b.total_macs) {
    out.push_back("total: analytic " + std::to_string(a.total_macs) + " vs runtime " +
                  std::to_string(b.total_macs));
  }
  return out;
}

CrossoverTable crossover_sweep(std::uint64_t d, std::uint64_t r, double e, std::uint64_t n_first,
                               std::uint64_t n_last, std::uint64_t n_step) {
  if (n_step == 0) throw std::invalid_argument("crossover_sweep: step must be positive");
  CrossoverTable t;
  t.d = d;
  t.r = r;
  t.e = e;
  for (std::uint64_t n = n_first; n <= n_last; n += n_step) {
    CrossoverRow row{n, msa_macs(n + 1, d), skipat_phi_macs(n, d, r, e)};
    if (!t.crossover && row.phi < row.msa) t.crossover = n;
    t.rows.push_back(row);
  }
  return t;
}

nlohmann::json flops_to_json(const FlopsReport& report, const ModelConfig& config) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& e : report.entries) {
    nlohmann::json b = {{"block", e.block},
                        {"kind", block_kind_name(e.kind)},
                        {"macs", e.macs},
                        {"params", e.params}};
    if (report.has_minor_ops) b["minor_ops"] = e.minor_ops;
    blocks.push_back(b);
  }
  nlohmann::json j = {{"convention", kMacConvention},
                      {"fingerprint", report.fingerprint},
                      {"config", config_to_json(config)},
                      {"blocks", blocks},
                      {"total_macs", report.total_macs},
                      {"gmacs", report.gmacs()},
                      {"total_params", report.total_params}};
  if (report.has_minor_ops) j["total_minor_ops"] = report.total_minor_ops;
  return j;
}

std::string flops_to_text(const FlopsReport& report, const ModelConfig& config) {
  std::ostringstream out;
  char buf[256];
  out << "config " << report.fingerprint << "  phi=" << phi_kind_name(config.phi_kind)
      << "  skip=" << config.skip_layers.size() << "/" << config.depth << "\n";
  out << "counts are " << kMacConvention << "\n\n";
  auto row = [&](const std::string& block, const char* kind, std::uint64_t macs,
                 std::uint64_t params, std::uint64_t minor) {
    std::snprintf(buf, sizeof buf, "%-26s %-15s %16llu %12llu", block.c_str(), kind,
                  static_cast<unsigned long long>(macs), static_cast<unsigned long long>(params));
    out << buf;
    if (report.has_minor_ops) {
      std::snprintf(buf, sizeof buf, " %14llu", static_cast<unsigned long long>(minor));
      out << buf;
    }
    out << "\n";
  };
  std::snprintf(buf, sizeof buf, "%-26s %-15s %16s %12s", "block", "kind", "macs", "params");
  out << buf << (report.has_minor_ops ? "      minor_ops" : "") << "\n";
  for (const auto& e : report.entries) {
    row(e.block, block_kind_name(e.kind), e.macs, e.params, e.minor_ops);
  }
  row("total", "", report.total_macs, report.total_params, report.total_minor_ops);
  std::snprintf(buf, sizeof buf, "\nGMACs %.4f   params %.3fM\n", report.gmacs(),
                static_cast<double>(report.total_params) * 1e-6);
  out << buf;
  return out.str();
}

std::string flops_to_csv(const FlopsReport& report) {
  std::ostringstream out;
  out << "block,kind,macs,params" << (report.has_minor_ops ? ",minor_ops" : "") << "\n";
  for (const auto& e : report.entries) {
    out << e.block << "," << block_kind_name(e.kind) << "," << e.macs << "," << e.params;
    if (report.has_minor_ops) out << "," << e.minor_ops;
    out << "\n";
  }
  out << "total,," << report.total_macs << "," << report.total_params;
  if (report.has_minor_ops) out << "," << report.total_minor_ops;
  out << "\n";
  return out.str();
}

std::string crossover_to_csv(const CrossoverTable& t) {
  std::ostringstream out;
  out << "n,msa_macs,phi_macs,phi_cheaper\n";
  for (const auto& row : t.rows) {
    out << row.n << "," << row.msa << "," << row.phi << "," << (row.phi < row.msa ? 1 : 0) << "\n";
  }
  return out.str();
}

template FlopsReport runtime_mac_count(const ModelConfig&, const ParameterStore<float>&,
                                       const Tensor<float>&);
template FlopsReport runtime_mac_count(const ModelConfig&, const ParameterStore<double>&,
                                       const Tensor<double>&);

}  // namespace skipat
