#include "skipat/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "skipat/train.hpp"
#include "skipat/vit.hpp"

namespace skipat {

namespace {

constexpr std::size_t kMaxPatches = 16;
constexpr std::size_t kMaxDim = 16;
constexpr std::size_t kMaxDepth = 3;
constexpr std::size_t kMaxPatch = 4;
constexpr std::size_t kMaxClasses = 10;

std::size_t largest_divisor_at_most(std::size_t value, std::size_t cap) {
  for (std::size_t h = std::min(cap, value); h > 1; --h) {
    if (value % h == 0) return h;
  }
  return 1;
}

}  // namespace

ModelConfig shrink_for_gradcheck(const ModelConfig& config, std::vector<std::string>* notes) {
  config.validate();
  ModelConfig c = config;
  auto note = [&](const std::string& s) {
    if (notes != nullptr) notes->push_back(s);
  };
  if (c.patch_size > kMaxPatch) {
    note("patch_size " + std::to_string(c.patch_size) + " -> " + std::to_string(kMaxPatch));
    c.patch_size = kMaxPatch;
    c.image_size = config.grid() * kMaxPatch;
  }
  if (c.num_patches() > kMaxPatches) {
    const std::size_t grid = 4;
    note("patch grid " + std::to_string(c.grid()) + "x" + std::to_string(c.grid()) + " -> " +
         std::to_string(grid) + "x" + std::to_string(grid));
    c.image_size = grid * c.patch_size;
  }
  if (c.embed_dim > kMaxDim) {
    note("embed_dim " + std::to_string(c.embed_dim) + " -> " + std::to_string(kMaxDim));
    c.embed_dim = kMaxDim;
    const std::size_t heads = largest_divisor_at_most(kMaxDim, c.heads);
    if (heads != c.heads) note("heads " + std::to_string(c.heads) + " -> " + std::to_string(heads));
    c.heads = heads;
  }
  if (c.depth > kMaxDepth) {
    note("depth " + std::to_string(c.depth) + " -> " + std::to_string(kMaxDepth));
    c.depth = kMaxDepth;
    std::vector<std::size_t> kept;
    for (std::size_t l : c.skip_layers) {
      if (l <= kMaxDepth) kept.push_back(l);
    }
    if (kept != c.skip_layers) {
      note("skip_layers restricted to layers <= " + std::to_string(kMaxDepth));
      c.skip_layers = kept;
    }
    if (c.skip_layers.empty() && c.phi_kind != PhiKind::none) {
      note("no skipped layer left; skipping layers 2..3 instead");
      c.skip_layers = {2, 3};
    }
  }
  if (c.num_classes > kMaxClasses) {
    note("num_classes " + std::to_string(c.num_classes) + " -> " + std::to_string(kMaxClasses));
    c.num_classes = kMaxClasses;
  }
  c.validate();
  return c;
}

double gradcheck_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
  return std::abs(analytic - numeric) / denom;
}

GradcheckResult run_gradcheck(const ModelConfig& config, const GradcheckOptions& options) {
  GradcheckResult out;
  out.config = shrink_for_gradcheck(config, &out.shrunk);
  const ModelConfig& c = out.config;

  Rng rng(options.seed);
  ParameterStore<double> params = constant_parameters<double>(c, 0.0);
  // Uniform [-1, 1] draws; weight tensors are scaled by 1/sqrt(fan_in) so the
  // network stays in a moderately curved regime, and norm scales sit around 1.
  for (auto& e : params.entries()) {
    Tensor<double>& v = e.param.value;
    double scale = 1.0, shift = 0.0;
    if (e.role == ParamRole::weight) {
      const std::size_t fan_in = v.rank() == 2 ? v.dim(0) : v.size() / v.dim(0);
      scale = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    } else if (e.role == ParamRole::norm_scale) {
      scale = 0.5;
      shift = 1.0;
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = shift + scale * (2.0 * rng.uniform() - 1.0);
  }
  Tensor<double> images({options.batch, c.in_channels, c.image_size, c.image_size});
  for (std::size_t i = 0; i < images.size(); ++i) images[i] = 2.0 * rng.uniform() - 1.0;
  std::vector<std::size_t> labels;
  for (std::size_t b = 0; b < options.batch; ++b) labels.push_back(rng.below(c.num_classes));

  const VisionTransformer<double> model(c, params);
  auto loss_of = [&]() { return cross_entropy(model.logits(images), labels).loss; };

  params.zero_grad();
  {
    const auto state = model.forward(images);
    const auto loss = cross_entropy(state.logits, labels);
    model.backward(state, loss.grad, params);
  }
  if (options.corrupt_backward) {
    auto& first = params.entries().front().param.grad_slot();
    first[0] += 0.05 + 0.1 * std::abs(first[0]);
  }

  for (auto& e : params.entries()) {
    Tensor<double>& v = e.param.value;
    const Tensor<double> analytic =
        e.param.grad ? *e.param.grad : Tensor<double>(v.dims());
    for (std::size_t i = 0; i < v.size(); ++i) {
      // four-point central stencil at step eps, truncation O(eps^4)
      const double saved = v[i];
      auto at = [&](double offset) {
        v[i] = saved + offset;
        return loss_of();
      };
      const double h = options.eps;
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      v[i] = saved;
      const double err = gradcheck_error(analytic[i], numeric);
      ++out.checked;
      if (out.worst_param.empty() || err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst_param = e.name;
        out.worst_index = i;
        out.worst_analytic = analytic[i];
        out.worst_numeric = numeric;
      }
    }
  }
  out.passed = out.max_rel_error < options.tol;
  return out;
}

}  // namespace skipat
