#pragma once

// Batched transformer building blocks with explicit backward passes.
// Activations are (B·N)×d matrices: B samples, N tokens each, stacked
// sample-major. Parameter views are non-owning pointers into a
// ParameterStore; gradient views point at its gradient slots.

#include <string>

#include "skipat/mac_counter.hpp"
#include "skipat/params.hpp"
#include "skipat/tensor.hpp"

namespace skipat {

struct TokenLayout {
  std::size_t batch = 1;
  std::size_t tokens = 1;  // N per sample
  std::size_t grid = 1;    // patch grid side, grid² patch tokens
  bool cls = true;         // row 0 of each sample is the CLS token

  std::size_t rows() const { return batch * tokens; }
  std::size_t patches() const { return grid * grid; }
};

template <typename T>
struct LinearParams {
  const Tensor<T>* weight = nullptr;
  const Tensor<T>* bias = nullptr;
};

template <typename T>
struct LinearGrads {
  Tensor<T>* weight = nullptr;
  Tensor<T>* bias = nullptr;
};

template <typename T>
LinearParams<T> linear_params(const ParameterStore<T>& store, const std::string& prefix) {
  return {&store.value(prefix + "weight"), &store.value(prefix + "bias")};
}

template <typename T>
LinearGrads<T> linear_grads(ParameterStore<T>& store, const std::string& prefix) {
  return {&store.grad(prefix + "weight"), &store.grad(prefix + "bias")};
}

template <typename T>
struct MsaParams {
  LinearParams<T> norm;  // gamma / beta
  LinearParams<T> q, k, v, proj;
};

template <typename T>
struct MsaGrads {
  LinearGrads<T> norm;
  LinearGrads<T> q, k, v, proj;
};

/// Loads the attention weights of `layer`; q/k are skipped when absent
/// (attention-reuse layers).
template <typename T>
MsaParams<T> msa_params(const ParameterStore<T>& store, std::size_t layer);
template <typename T>
MsaGrads<T> msa_grads(ParameterStore<T>& store, std::size_t layer);

template <typename T>
struct MsaCache {
  Tensor<T> normed;  // LN1(z)
  Tensor<T> q, k, v;
  Tensor<T> attn;    // [B·h, N, N]
  Tensor<T> heads;   // concatenated head outputs, input to the projection
};

/// Z^MSA for the pre-norm block (pre-residual). Fills cache.attn with A.
template <typename T>
Tensor<T> msa_forward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                      const MsaParams<T>& p, MsaCache<T>& cache, MacCounter* counter);

/// Returns dz. `d_attn_extra` (may be null) adds upstream gradient reaching
/// this layer's A from later layers that reuse it.
template <typename T>
Tensor<T> msa_backward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                       const MsaParams<T>& p, const MsaCache<T>& cache, const Tensor<T>& dzmsa,
                       const Tensor<T>* d_attn_extra, MsaGrads<T>& g);

/// Z^MSA computed with a supplied attention tensor instead of softmax(QKᵀ):
/// only V, A·V and the output projection run.
template <typename T>
Tensor<T> attn_apply_forward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                             const Tensor<T>& attn, const MsaParams<T>& p, MsaCache<T>& cache,
                             MacCounter* counter);

/// Returns dz and accumulates the gradient w.r.t. the supplied attention into d_attn.
template <typename T>
Tensor<T> attn_apply_backward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                              const MsaParams<T>& p, const MsaCache<T>& cache,
                              const Tensor<T>& dzmsa, Tensor<T>& d_attn, MsaGrads<T>& g);

template <typename T>
struct MlpParams {
  LinearParams<T> norm;
  LinearParams<T> fc1, fc2;
};

template <typename T>
struct MlpGrads {
  LinearGrads<T> norm;
  LinearGrads<T> fc1, fc2;
};

template <typename T>
MlpParams<T> mlp_params(const ParameterStore<T>& store, std::size_t layer);
template <typename T>
MlpGrads<T> mlp_grads(ParameterStore<T>& store, std::size_t layer);

template <typename T>
struct MlpCache {
  Tensor<T> normed, hidden_pre, hidden;
};

/// LN → FC → GeLU → FC, pre-residual.
template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& z, const MlpParams<T>& p, MlpCache<T>& cache,
                      MacCounter* counter);
template <typename T>
Tensor<T> mlp_backward(const Tensor<T>& z, const MlpParams<T>& p, const MlpCache<T>& cache,
                       const Tensor<T>& dy, MlpGrads<T>& g);

/// B×c×H×W images to (B·n)×(p²c) patch rows; features ordered (channel, py, px).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t patch);

}  // namespace skipat
