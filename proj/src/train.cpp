#include "skipat/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>
#include <thread>

namespace skipat {

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.rows() != labels.size() || logits.rows() == 0) {
    throw ShapeError("cross_entropy: logits " + dims_to_string(logits.dims()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.rows(), k = logits.cols();
  LossResult<T> out;
  out.grad = Tensor<T>(logits.dims());
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " >= " +
                              std::to_string(k) + " classes");
    }
    T m = logits(i, 0);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits(i, j) > m) {
        m = logits(i, j);
        arg = j;
      }
    }
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(logits(i, j) - m);
    const T lse = m + std::log(sum);
    total += static_cast<double>(lse - logits(i, labels[i]));
    for (std::size_t j = 0; j < k; ++j) {
      const T p = std::exp(logits(i, j) - lse);
      out.grad(i, j) = (p - (j == labels[i] ? T(1) : T(0))) / T(b);
    }
    if (arg == labels[i]) ++out.correct;
  }
  out.loss = static_cast<T>(total / static_cast<double>(b));
  return out;
}

template <typename T>
OptimizerState<T> make_optimizer_state(const ParameterStore<T>& params) {
  OptimizerState<T> s;
  for (const auto& e : params.entries()) {
    s.names.push_back(e.name);
    s.m.emplace_back(e.param.value.dims());
    s.v.emplace_back(e.param.value.dims());
  }
  return s;
}

template <typename T>
void adamw_step(ParameterStore<T>& params, OptimizerState<T>& state, const AdamWHyper& h) {
  if (state.names.size() != params.size()) {
    throw ShapeError("optimizer state holds " + std::to_string(state.names.size()) +
                     " tensors, model has " + std::to_string(params.size()));
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T bc1 = static_cast<T>(1.0 - std::pow(h.beta1, t));
  const T bc2 = static_cast<T>(1.0 - std::pow(h.beta2, t));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T lr = static_cast<T>(h.lr), eps = static_cast<T>(h.eps);
  const T decay = static_cast<T>(h.lr * h.weight_decay);

  auto& entries = params.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    Tensor<T>& p = e.param.value;
    Tensor<T>& m = state.m[i];
    Tensor<T>& v = state.v[i];
    if (state.names[i] != e.name || !m.same_dims(p) || !v.same_dims(p)) {
      throw ShapeError("optimizer state for " + state.names[i] + " does not match parameter " +
                       e.name);
    }
    const Tensor<T>* g = e.param.grad ? &*e.param.grad : nullptr;
    if (g != nullptr && !g->same_dims(p)) throw ShapeError("gradient dims differ for " + e.name);
    const bool wd = decays(e.role) && h.weight_decay != 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = g != nullptr ? (*g)[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      if (wd) p[j] -= decay * p[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

void TrainConfig::validate() const {
  if (!(optim.lr > 0)) throw ConfigError("lr must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (optim.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
}

std::string train_log_csv(const TrainLog& log) {
  std::ostringstream out;
  out << "epoch,loss,acc,seconds\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "0,%.9g,,\n", log.initial_loss);
  out << buf;
  for (const auto& r : log.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f,%.3f\n", r.epoch, r.loss, r.accuracy, r.seconds);
    out << buf;
  }
  return out.str();
}

std::size_t configured_threads() {
  const char* env = std::getenv("SKAT_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const long n = std::strtol(env, nullptr, 10);
  return n >= 1 ? static_cast<std::size_t>(n) : 1;
}

EvalResult evaluate(const ModelConfig& config, const ParameterStore<float>& params,
                    const ImageDataset& data, std::size_t limit, std::size_t batch_size) {
  const std::size_t count = limit == 0 ? data.size() : std::min(limit, data.size());
  if (count == 0) return {};
  const VisionTransformer<float> model(config, params);
  const std::size_t chunks = (count + batch_size - 1) / batch_size;
  std::vector<double> loss_sum(chunks, 0.0);
  std::vector<std::size_t> correct(chunks, 0);

  // Chunk boundaries are fixed, so results do not depend on the worker count.
  auto run = [&](std::size_t worker, std::size_t workers) {
    std::vector<std::size_t> idx;
    for (std::size_t c = worker; c < chunks; c += workers) {
      const std::size_t begin = c * batch_size;
      const std::size_t end = std::min(count, begin + batch_size);
      idx.resize(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      const auto batch = make_batch<float>(data, idx);
      const auto r = cross_entropy(model.logits(batch.images), batch.labels);
      loss_sum[c] = static_cast<double>(r.loss) * static_cast<double>(idx.size());
      correct[c] = r.correct;
    }
  };
  const std::size_t workers = std::min(configured_threads(), chunks);
  if (workers <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    for (auto& t : pool) t.join();
  }
  EvalResult out;
  out.count = count;
  double total = 0;
  std::size_t right = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += loss_sum[c];
    right += correct[c];
  }
  out.loss = total / static_cast<double>(count);
  out.accuracy = static_cast<double>(right) / static_cast<double>(count);
  return out;
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x53485546464c4531ULL;
constexpr std::uint64_t kAugmentStream = 0x4155474d454e5431ULL;

}  // namespace

TrainResult train_loop(const ModelConfig& model, const TrainConfig& train,
                       const ImageDataset& train_set, const ImageDataset& test_set,
                       const EpochCallback& on_epoch) {
  model.validate();
  train.validate();
  if (model.image_size != kCifarSide || model.in_channels != kCifarChannels) {
    throw ConfigError("training expects 32x32 RGB inputs");
  }
  const std::size_t n =
      train.subset_size == 0 ? train_set.size() : std::min(train.subset_size, train_set.size());
  if (n == 0) throw ConfigError("empty training set");

  Rng init_rng(train.seed);
  Rng shuffle_rng(train.seed ^ kShuffleStream);
  Rng augment_rng(train.seed ^ kAugmentStream);

  TrainResult out;
  out.params = init_parameters<float>(model, init_rng);
  out.optimizer = make_optimizer_state(out.params);
  const VisionTransformer<float> vit(model, out.params);

  out.log.initial_loss = evaluate(model, out.params, train_set, n).loss;

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) {
      std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    }
    double loss_sum = 0;
    for (std::size_t begin = 0; begin < n; begin += train.batch_size) {
      const std::size_t end = std::min(n, begin + train.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const auto batch = make_batch<float>(train_set, idx, train.augment, &augment_rng);
      out.params.zero_grad();
      const auto state = vit.forward(batch.images);
      const auto loss = cross_entropy(state.logits, batch.labels);
      if (!std::isfinite(loss.loss)) {
        throw std::runtime_error("non-finite training loss at epoch " + std::to_string(epoch));
      }
      vit.backward(state, loss.grad, out.params);
      adamw_step(out.params, out.optimizer, train.optim);
      loss_sum += static_cast<double>(loss.loss) * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.accuracy = evaluate(model, out.params, test_set, train.eval_limit).accuracy;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return out;
}

template LossResult<float> cross_entropy(const Tensor<float>&, std::span<const std::size_t>);
template LossResult<double> cross_entropy(const Tensor<double>&, std::span<const std::size_t>);
template OptimizerState<float> make_optimizer_state(const ParameterStore<float>&);
template OptimizerState<double> make_optimizer_state(const ParameterStore<double>&);
template void adamw_step(ParameterStore<float>&, OptimizerState<float>&, const AdamWHyper&);
template void adamw_step(ParameterStore<double>&, OptimizerState<double>&, const AdamWHyper&);

}  // namespace skipat
