#include "skipat/bench.hpp"

#include <algorithm>
#include <chrono>

#include <nlohmann/json.hpp>

#include "skipat/data.hpp"
#include "skipat/vit.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#define SKIPAT_HAVE_MXCSR 1
#endif

namespace skipat {

namespace {

// Sets FTZ and DAZ for the current thread and restores the previous mode.
class DenormalGuard {
 public:
  explicit DenormalGuard(bool enable) {
#ifdef SKIPAT_HAVE_MXCSR
    saved_ = _mm_getcsr();
    if (enable) _mm_setcsr(saved_ | 0x8040);
#else
    (void)enable;
#endif
  }
  ~DenormalGuard() {
#ifdef SKIPAT_HAVE_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned saved_ = 0;
};

}  // namespace

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<BenchResult> run_bench(const std::vector<ModelConfig>& configs,
                                   const BenchOptions& o) {
  if (o.batch == 0) throw ConfigError("bench batch must be >= 1");
  if (o.iters == 0) throw ConfigError("bench iters must be >= 1");
  if (configs.empty()) return {};
  for (const auto& c : configs) {
    c.validate();
    if (c.image_size != configs[0].image_size || c.in_channels != configs[0].in_channels) {
      throw ConfigError("bench configs must share the input shape");
    }
  }

  Rng rng(o.seed);
  const auto input = synthetic_batch<float>(rng, o.batch, configs[0]);
  std::vector<ParameterStore<float>> params;
  std::vector<VisionTransformer<float>> models;
  params.reserve(configs.size());
  for (const auto& c : configs) {
    Rng init(o.seed);
    params.push_back(init_parameters<float>(c, init));
  }
  for (std::size_t i = 0; i < configs.size(); ++i) models.emplace_back(configs[i], params[i]);

  std::vector<BenchResult> out(configs.size());
  for (std::size_t i = 0; i < configs.size(); ++i) {
    out[i].name = configs[i].skip_layers.empty() ? "vanilla" : phi_kind_name(configs[i].phi_kind);
    out[i].fingerprint = config_fingerprint(configs[i]);
    out[i].batch = o.batch;
    out[i].warmup = o.warmup;
    out[i].flush_denormals = o.flush_denormals;
  }

  const DenormalGuard guard(o.flush_denormals);
  for (std::size_t it = 0; it < o.warmup + o.iters; ++it) {
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor<float> logits = models[i].logits(input.images);
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      (it < o.warmup ? out[i].warmup_seconds : out[i].seconds).push_back(s);
    }
  }
  for (auto& r : out) {
    r.median_seconds = median(r.seconds);
    r.images_per_sec = static_cast<double>(r.batch) / r.median_seconds;
  }
  return out;
}

BenchResult run_bench(const ModelConfig& config, const BenchOptions& options) {
  return run_bench(std::vector<ModelConfig>{config}, options).front();
}

nlohmann::json bench_to_json(const BenchResult& r) {
  return {{"name", r.name},
          {"fingerprint", r.fingerprint},
          {"dtype", r.dtype},
          {"batch", r.batch},
          {"warmup", r.warmup},
          {"iters", r.seconds.size()},
          {"threads", r.threads},
          {"flush_denormals", r.flush_denormals},
          {"warmup_seconds", r.warmup_seconds},
          {"seconds", r.seconds},
          {"median_seconds", r.median_seconds},
          {"images_per_sec", r.images_per_sec}};
}

}  // namespace skipat
