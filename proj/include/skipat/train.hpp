#pragma once

// Cross-entropy, AdamW and the desk-scale training loop.

#include <functional>
#include <ostream>
#include <span>

#include "skipat/data.hpp"
#include "skipat/vit.hpp"

namespace skipat {

template <typename T>
struct LossResult {
  T loss = 0;        // mean over the batch
  Tensor<T> grad;    // dLoss/dlogits, b×K
  std::size_t correct = 0;
};

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

struct AdamWHyper {
  double lr = 5e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
OptimizerState<T> make_optimizer_state(const ParameterStore<T>& params);

/// One bias-corrected AdamW step reading gradients from the store's grad
/// slots (absent slots count as zero). Decay is decoupled and applied only to
/// parameters whose role is `weight`.
template <typename T>
void adamw_step(ParameterStore<T>& params, OptimizerState<T>& state, const AdamWHyper& hyper);

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  AdamWHyper optim;
  std::uint64_t seed = 0;
  std::size_t subset_size = 0;   // 0: whole training split (first N records otherwise)
  std::size_t eval_limit = 0;    // 0: whole test split for per-epoch eval
  AugmentOptions augment;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0;      // mean training minibatch loss over the epoch
  double accuracy = 0;  // eval accuracy after the epoch, in [0,1]
  double seconds = 0;
};

struct TrainLog {
  double initial_loss = 0;  // mean loss over the training subset before any step
  std::vector<EpochRecord> epochs;
};

std::string train_log_csv(const TrainLog& log);

struct TrainResult {
  ParameterStore<float> params;
  OptimizerState<float> optimizer;
  TrainLog log;
};

/// Mean cross-entropy and accuracy of `params` over `indices` of `data`.
struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::size_t count = 0;
};
EvalResult evaluate(const ModelConfig& config, const ParameterStore<float>& params,
                    const ImageDataset& data, std::size_t limit = 0,
                    std::size_t batch_size = 100);

/// Per-epoch callback, e.g. for progress lines.
using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train_loop(const ModelConfig& model, const TrainConfig& train,
                       const ImageDataset& train_set, const ImageDataset& test_set,
                       const EpochCallback& on_epoch = {});

/// Worker count from SKAT_THREADS (default 1).
std::size_t configured_threads();

}  // namespace skipat
