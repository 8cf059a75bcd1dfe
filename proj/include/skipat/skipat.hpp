#pragma once

// Skip-attention: the Φ variants that stand in for the MSA branch at skipped
// layers, efficient channel attention, and the skip schedule.

#include <map>
#include <vector>

#include "skipat/blocks.hpp"
#include "skipat/config.hpp"
#include "skipat/ops.hpp"

namespace skipat {

/// ECA kernel length for `channels`: the odd integer nearest to
/// (log2(C) + 1) / 2, ties going up, minimum 1.
std::size_t eca_kernel_size(std::size_t channels);

struct SkipSchedule {
  std::vector<std::size_t> skipped;
  /// Skipped layer -> layer whose MSA-branch output (real or approximated) it reads.
  std::map<std::size_t, std::size_t> provider;
  /// Layers that compute a genuine MSA.
  std::vector<std::size_t> msa_layers;

  bool empty() const { return skipped.empty(); }
  /// Nearest genuinely computed MSA layer at or before `layer`.
  std::size_t root(std::size_t layer) const;
};

/// Providers are chained: inside a contiguous run each skipped layer reads
/// its predecessor's output, so the run is seeded by the last real MSA.
SkipSchedule build_schedule(const ModelConfig& config);

template <typename T>
struct PhiParams {
  LinearParams<T> fc1, fc2;
  LinearParams<T> dwc;   // kernels c×r×r, bias c
  LinearParams<T> conv;  // weight d×d×r×r, bias d
  const Tensor<T>* eca = nullptr;
};

template <typename T>
struct PhiGrads {
  LinearGrads<T> fc1, fc2, dwc, conv;
  Tensor<T>* eca = nullptr;
};

template <typename T>
PhiParams<T> phi_params(const ParameterStore<T>& store, const ModelConfig& config,
                        std::size_t layer);
template <typename T>
PhiGrads<T> phi_grads(ParameterStore<T>& store, const ModelConfig& config, std::size_t layer);

template <typename T>
struct PhiCache {
  Tensor<T> patches;           // Φ input without CLS rows, (B·n)×d
  Tensor<T> fc1_pre, fc1_act;  // (B·n)×e
  Tensor<T> dwc_pre, dwc_act;  // (B·n)×e, token-major
  Tensor<T> fc2_out;           // (B·n)×d
  Tensor<T> gate;              // B×d
};

/// Batched Φ. The CLS row of every sample is copied through unchanged.
template <typename T>
Tensor<T> phi_forward(PhiKind kind, const Tensor<T>& x, const TokenLayout& layout,
                      const PhiParams<T>& p, PhiCache<T>& cache, MacCounter* counter);

/// Returns dx; accumulates parameter gradients into g.
template <typename T>
Tensor<T> phi_backward(PhiKind kind, const TokenLayout& layout, const PhiParams<T>& p,
                       const PhiCache<T>& cache, const Tensor<T>& dy, PhiGrads<T>& g);

// Single-sample forms over an N×d matrix (N = n + 1 with a CLS row).

template <typename T>
Tensor<T> phi_identity(const Tensor<T>& zmsa_prev);
template <typename T>
Tensor<T> phi_dwc(const Tensor<T>& zmsa_prev, const PhiParams<T>& p, bool cls = true);
template <typename T>
Tensor<T> phi_conv(const Tensor<T>& zmsa_prev, const PhiParams<T>& p, bool cls = true);
/// FC1 → GeLU → DwC → GeLU → FC2 → ECA on patch rows.
template <typename T>
Tensor<T> phi_skipat(const Tensor<T>& zmsa_prev, const PhiParams<T>& p, bool cls = true);

/// Efficient channel attention on x (n×d): channel means over tokens,
/// 1D convolution across channels (zero padded), sigmoid gate per channel.
template <typename T>
Tensor<T> eca(const Tensor<T>& x, const Tensor<T>& kernel, Tensor<T>* gate_out = nullptr,
              MacCounter* counter = nullptr);
/// {dx, dkernel} given the forward gate.
template <typename T>
ops::Pair<T> eca_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& gate,
                          const Tensor<T>& dy);

/// Z^MSA at an attention-reuse layer: V and the output projection of this
/// layer applied with the provider's attention (per head, no renormalization).
template <typename T>
Tensor<T> attn_reuse_forward(const Tensor<T>& z, const Tensor<T>& attn_prev,
                             const TokenLayout& layout, std::size_t heads, const MsaParams<T>& p,
                             MsaCache<T>& cache, MacCounter* counter = nullptr);

/// Token layout of a single N×d sample, deriving the grid from N.
TokenLayout single_layout(std::size_t rows, bool cls);

}  // namespace skipat
