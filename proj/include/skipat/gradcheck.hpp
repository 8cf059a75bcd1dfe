#pragma once

// Finite-difference check of the model's backward pass, in f64.

#include <string>
#include <vector>

#include "skipat/config.hpp"

namespace skipat {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double eps = 1e-3;  // stencil step
  double tol = 1e-4;
  std::size_t batch = 2;
  /// Test fixture: perturbs one analytic gradient entry so the harness must fail.
  bool corrupt_backward = false;
};

struct GradcheckResult {
  ModelConfig config;                // the configuration actually checked
  std::vector<std::string> shrunk;   // adjustments made to fit the size limits
  std::size_t checked = 0;           // scalar parameters compared
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  bool passed = false;
};

/// Size limits for the exhaustive check: n <= 16, d <= 16, L <= 3.
ModelConfig shrink_for_gradcheck(const ModelConfig& config, std::vector<std::string>* notes);

/// |a − n| / max(|a|, |n|, kGradcheckFloor): relative error with an absolute
/// floor so that gradients near zero are judged on absolute error.
inline constexpr double kGradcheckFloor = 1e-3;
double gradcheck_error(double analytic, double numeric);

GradcheckResult run_gradcheck(const ModelConfig& config, const GradcheckOptions& options);

}  // namespace skipat
