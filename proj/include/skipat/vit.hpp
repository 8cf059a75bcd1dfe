#pragma once

// Vision transformer forward/backward over a batch, with the skip schedule
// applied at skipped layers.

#include <optional>
#include <vector>

#include "skipat/blocks.hpp"
#include "skipat/config.hpp"
#include "skipat/skipat.hpp"

namespace skipat {

enum class LayerMode { msa, attn_reuse, phi };

template <typename T>
struct LayerState {
  LayerMode mode = LayerMode::msa;
  Tensor<T> input;   // Z_{l-1}
  Tensor<T> branch;  // Z^MSA_l, or its stand-in at skipped layers
  Tensor<T> mid;     // Z_{l-1} + branch
  Tensor<T> output;  // Z_l
  MsaCache<T> msa;
  PhiCache<T> phi;
  MlpCache<T> mlp;
};

template <typename T>
struct ForwardState {
  TokenLayout layout;
  Tensor<T> patches;  // (B·n)×(p²c)
  std::vector<LayerState<T>> layers;
  Tensor<T> pooled;   // B×d: CLS rows, or token means without CLS
  Tensor<T> normed;   // LN(pooled)
  Tensor<T> logits;   // B×K
};

template <typename T>
struct LayerTrace {
  bool skipped = false;
  bool reused = false;
  std::optional<Tensor<T>> attn;  // h×N×N
  Tensor<T> zmsa;                 // N×d
  Tensor<T> z;                    // N×d
};

template <typename T>
struct ForwardTrace {
  std::vector<LayerTrace<T>> layers;
};

template <typename T>
class VisionTransformer {
 public:
  VisionTransformer(ModelConfig config, const ParameterStore<T>& params);

  const ModelConfig& config() const { return config_; }
  const SkipSchedule& schedule() const { return schedule_; }

  /// images: B×c×H×W. Keeps every intermediate needed by backward unless
  /// `keep` is false, in which case layer states are released as soon as the
  /// next layer no longer needs them.
  ForwardState<T> forward(const Tensor<T>& images, MacCounter* counter = nullptr,
                          bool keep = true) const;
  /// Logits only (inference: intermediates are not retained).
  Tensor<T> logits(const Tensor<T>& images, MacCounter* counter = nullptr) const;

  /// Accumulates dLoss/dparam into `grads` (a store with the same names).
  void backward(const ForwardState<T>& state, const Tensor<T>& d_logits,
                ParameterStore<T>& grads) const;

  /// Per-sample trace of sample b.
  ForwardTrace<T> trace(const ForwardState<T>& state, std::size_t b) const;

 private:
  Tensor<T> tokenize(const Tensor<T>& patches, const TokenLayout& layout,
                     MacCounter* counter) const;

  ModelConfig config_;
  const ParameterStore<T>* params_;
  SkipSchedule schedule_;
};

/// Eq.-style single-image helpers over an explicit parameter store.
template <typename T>
Tensor<T> tokenize(const Tensor<T>& image, const ParameterStore<T>& params,
                   const ModelConfig& config);

template <typename T>
struct MsaResult {
  Tensor<T> zmsa;  // N×d
  Tensor<T> attn;  // h×N×N
};

template <typename T>
MsaResult<T> msa_block(const Tensor<T>& z, const ParameterStore<T>& params,
                       const ModelConfig& config, std::size_t layer);

template <typename T>
Tensor<T> mlp_block(const Tensor<T>& z, const ParameterStore<T>& params, std::size_t layer);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // K
  std::optional<ForwardTrace<T>> trace;
};

template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const ParameterStore<T>& params,
                         const ModelConfig& config, bool want_trace);

/// Block id used by the MAC counter and the analytic report.
std::string block_id(std::size_t layer, BlockKind kind);

}  // namespace skipat
