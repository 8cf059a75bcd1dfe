#pragma once

// Forward-only throughput measurement on synthetic batches.

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "skipat/config.hpp"

namespace skipat {

struct BenchOptions {
  std::size_t batch = 8;
  std::size_t iters = 20;
  std::size_t warmup = 5;
  std::uint64_t seed = 0;
  /// Flush subnormals to zero (FTZ/DAZ) while timing. Deep chains of freshly
  /// initialized Φ layers shrink activations into the subnormal range, where
  /// x86 arithmetic slows down by an order of magnitude.
  bool flush_denormals = true;
};

struct BenchResult {
  std::string name;
  std::string fingerprint;
  std::string dtype = "f32";
  std::size_t batch = 0;
  std::size_t warmup = 0;
  std::size_t threads = 1;
  bool flush_denormals = false;
  std::vector<double> warmup_seconds;  // excluded from the median
  std::vector<double> seconds;         // timed iterations
  double median_seconds = 0;
  double images_per_sec = 0;
};

/// Median of a non-empty sample (mean of the middle pair for even sizes).
double median(std::vector<double> values);

/// Times each config with the same synthetic batch. Iterations are
/// interleaved round-robin across configs so slow drifts in machine load hit
/// every config alike.
std::vector<BenchResult> run_bench(const std::vector<ModelConfig>& configs,
                                   const BenchOptions& options);
BenchResult run_bench(const ModelConfig& config, const BenchOptions& options);

nlohmann::json bench_to_json(const BenchResult& result);

}  // namespace skipat
