#pragma once

// Cost model: multiply-accumulates and parameters per block, computed from
// the config alone or counted while a forward pass runs.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "skipat/config.hpp"
#include "skipat/mac_counter.hpp"
#include "skipat/params.hpp"

namespace skipat {

/// One MAC counts as one FLOP throughout.
inline constexpr const char* kMacConvention = "MACs (1 multiply-accumulate = 1 FLOP)";

struct FlopsEntry {
  std::string block;
  BlockKind kind = BlockKind::patch_embed;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  /// Elementwise and normalization work (LN, softmax, GeLU, residual adds,
  /// gating) that the MAC total leaves out. Analytic reports only.
  std::uint64_t minor_ops = 0;
};

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::uint64_t total_macs = 0;
  std::uint64_t total_params = 0;
  std::uint64_t total_minor_ops = 0;
  bool has_minor_ops = false;  // whether outputs include the minor_ops column
  std::string fingerprint;

  double gmacs() const { return static_cast<double>(total_macs) * 1e-9; }
};

// MACs of individual blocks, N = tokens including CLS, n = patch tokens.
std::uint64_t msa_macs(std::uint64_t tokens, std::uint64_t d);
std::uint64_t attn_reuse_macs(std::uint64_t tokens, std::uint64_t d);
std::uint64_t phi_macs(const ModelConfig& config);
std::uint64_t mlp_macs(const ModelConfig& config);
/// Φ(skipat) MACs for arbitrary n, d, r, e (ECA kernel from d).
std::uint64_t skipat_phi_macs(std::uint64_t n, std::uint64_t d, std::uint64_t r, double e);

/// Fills minor_ops too; set has_minor_ops to show them.
FlopsReport analytic_flops(const ModelConfig& config);

/// Runs one forward pass on `image` (c×H×W, or 1×c×H×W) with a MacCounter
/// attached and reports what was executed. Parameter counts come from the
/// census, as in analytic_flops.
template <typename T>
FlopsReport runtime_mac_count(const ModelConfig& config, const ParameterStore<T>& params,
                              const Tensor<T>& image);

/// Blocks whose MACs differ, as "block: analytic vs runtime" lines. Empty when
/// the two reports agree exactly (block order, ids, kinds, MACs and totals).
std::vector<std::string> compare_macs(const FlopsReport& analytic, const FlopsReport& runtime);

struct CrossoverRow {
  std::uint64_t n = 0;
  std::uint64_t msa = 0;  // one MSA block over n + 1 tokens
  std::uint64_t phi = 0;  // one Φ(skipat) block over n patch tokens
};

struct CrossoverTable {
  std::uint64_t d = 0;
  std::uint64_t r = 0;
  double e = 0;
  std::vector<CrossoverRow> rows;
  /// Smallest n in the sweep where Φ is strictly cheaper than MSA.
  std::optional<std::uint64_t> crossover;
};

CrossoverTable crossover_sweep(std::uint64_t d, std::uint64_t r, double e,
                               std::uint64_t n_first, std::uint64_t n_last,
                               std::uint64_t n_step = 1);

nlohmann::json flops_to_json(const FlopsReport& report, const ModelConfig& config);
std::string flops_to_text(const FlopsReport& report, const ModelConfig& config);
std::string flops_to_csv(const FlopsReport& report);
std::string crossover_to_csv(const CrossoverTable& table);

}  // namespace skipat
