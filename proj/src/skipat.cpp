#include "skipat/skipat.hpp"

#include <algorithm>
#include <cmath>

namespace skipat {

std::size_t eca_kernel_size(std::size_t channels) {
  if (channels == 0) throw std::invalid_argument("eca_kernel_size: channels must be >= 1");
  const double target = (std::log2(static_cast<double>(channels)) + 1.0) / 2.0;
  const double lower = 2.0 * std::floor((target - 1.0) / 2.0) + 1.0;
  const double upper = lower + 2.0;
  const double k = (target - lower < upper - target) ? lower : upper;
  return static_cast<std::size_t>(std::max(1.0, k));
}

std::size_t SkipSchedule::root(std::size_t layer) const {
  while (provider.contains(layer)) layer = provider.at(layer);
  return layer;
}

SkipSchedule build_schedule(const ModelConfig& config) {
  config.validate();
  SkipSchedule s;
  s.skipped = config.skip_layers;
  for (std::size_t l : s.skipped) s.provider[l] = l - 1;
  for (std::size_t l = 1; l <= config.depth; ++l) {
    if (!config.is_skipped(l)) s.msa_layers.push_back(l);
  }
  return s;
}

TokenLayout single_layout(std::size_t rows, bool cls) {
  if (rows < (cls ? 2u : 1u)) throw ShapeError("Φ input needs at least one patch token");
  const std::size_t n = rows - (cls ? 1 : 0);
  const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (grid * grid != n) {
    throw ShapeError("patch count " + std::to_string(n) + " is not a perfect square");
  }
  return {1, rows, grid, cls};
}

template <typename T>
PhiParams<T> phi_params(const ParameterStore<T>& store, const ModelConfig& config,
                        std::size_t layer) {
  const std::string p = phi_prefix(config, layer);
  PhiParams<T> out;
  switch (config.phi_kind) {
    case PhiKind::skipat:
      out.fc1 = linear_params(store, p + "fc1.");
      out.dwc = linear_params(store, p + "dwc.");
      out.fc2 = linear_params(store, p + "fc2.");
      out.eca = &store.value(p + "eca.weight");
      break;
    case PhiKind::dwc:
      out.dwc = linear_params(store, p + "dwc.");
      break;
    case PhiKind::conv:
      out.conv = linear_params(store, p + "conv.");
      break;
    default:
      break;
  }
  return out;
}

template <typename T>
PhiGrads<T> phi_grads(ParameterStore<T>& store, const ModelConfig& config, std::size_t layer) {
  const std::string p = phi_prefix(config, layer);
  PhiGrads<T> out;
  switch (config.phi_kind) {
    case PhiKind::skipat:
      out.fc1 = linear_grads(store, p + "fc1.");
      out.dwc = linear_grads(store, p + "dwc.");
      out.fc2 = linear_grads(store, p + "fc2.");
      out.eca = &store.grad(p + "eca.weight");
      break;
    case PhiKind::dwc:
      out.dwc = linear_grads(store, p + "dwc.");
      break;
    case PhiKind::conv:
      out.conv = linear_grads(store, p + "conv.");
      break;
    default:
      break;
  }
  return out;
}

namespace {

template <typename T>
void check_phi_layout(const Tensor<T>& x, const TokenLayout& layout) {
  if (x.rank() != 2 || x.rows() != layout.rows()) {
    throw ShapeError("Φ input " + dims_to_string(x.dims()) + " does not match " +
                     std::to_string(layout.batch) + "x" + std::to_string(layout.tokens) +
                     " tokens");
  }
  if (layout.tokens != layout.patches() + (layout.cls ? 1 : 0)) {
    throw ShapeError("Φ needs a square patch grid: " + std::to_string(layout.tokens) +
                     " tokens vs grid " + std::to_string(layout.grid));
  }
}

// Patch rows of every sample, CLS rows dropped.
template <typename T>
Tensor<T> split_patches(const Tensor<T>& x, const TokenLayout& layout) {
  const std::size_t n = layout.patches();
  const std::size_t d = x.cols();
  const std::size_t skip = layout.cls ? 1 : 0;
  Tensor<T> out({layout.batch * n, d});
  for (std::size_t b = 0; b < layout.batch; ++b) {
    const T* src = x.data() + (b * layout.tokens + skip) * d;
    std::copy(src, src + n * d, out.data() + b * n * d);
  }
  return out;
}

// Reassembles full token matrices: CLS rows from `cls_source`, patch rows from `patches`.
template <typename T>
Tensor<T> merge_patches(const Tensor<T>& cls_source, const Tensor<T>& patches,
                        const TokenLayout& layout) {
  const std::size_t n = layout.patches();
  const std::size_t d = patches.cols();
  Tensor<T> out({layout.rows(), d});
  for (std::size_t b = 0; b < layout.batch; ++b) {
    T* dst = out.data() + b * layout.tokens * d;
    if (layout.cls) {
      std::copy(cls_source.data() + b * layout.tokens * d,
                cls_source.data() + (b * layout.tokens + 1) * d, dst);
      dst += d;
    }
    std::copy(patches.data() + b * n * d, patches.data() + (b + 1) * n * d, dst);
  }
  return out;
}

// n×c token rows of sample b to a c×g×g feature map.
template <typename T>
Tensor<T> to_grid(const Tensor<T>& rows, std::size_t b, std::size_t grid) {
  const std::size_t n = grid * grid;
  const std::size_t c = rows.cols();
  Tensor<T> out({c, grid, grid});
  const T* src = rows.data() + b * n * c;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * n + t] = src[t * c + ch];
  }
  return out;
}

template <typename T>
void from_grid(const Tensor<T>& map, std::size_t b, Tensor<T>& rows) {
  const std::size_t c = map.dim(0);
  const std::size_t n = map.dim(1) * map.dim(2);
  T* dst = rows.data() + b * n * c;
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t ch = 0; ch < c; ++ch) dst[t * c + ch] = map[ch * n + t];
  }
}

template <typename T>
Tensor<T> sample_rows(const Tensor<T>& rows, std::size_t b, std::size_t n) {
  return ops::slice_rows(rows, b * n, (b + 1) * n);
}

template <typename T>
void put_sample_rows(Tensor<T>& rows, std::size_t b, const Tensor<T>& part) {
  std::copy(part.data(), part.data() + part.size(), rows.data() + b * part.size());
}

}  // namespace

template <typename T>
Tensor<T> eca(const Tensor<T>& x, const Tensor<T>& kernel, Tensor<T>* gate_out,
              MacCounter* counter) {
  if (x.rank() != 2 || x.rows() == 0) throw ShapeError("eca: x must be a non-empty n×d matrix");
  if (kernel.rank() != 1 || kernel.size() % 2 == 0) {
    throw ShapeError("eca: kernel length must be odd, got " + dims_to_string(kernel.dims()));
  }
  const std::size_t n = x.rows(), d = x.cols(), k = kernel.size();
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<T> mean(d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += x(t, c);
  }
  for (auto& m : mean) m /= T(n);
  Tensor<T> pre({d});
  for (std::size_t c = 0; c < d; ++c) {
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(c + j) - pad;
      if (src >= 0 && src < static_cast<std::ptrdiff_t>(d)) acc += kernel[j] * mean[src];
    }
    pre[c] = acc;
  }
  count_macs(counter, std::uint64_t{d} * k);
  const Tensor<T> gate = ops::sigmoid(pre);
  Tensor<T> y(x.dims());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) y(t, c) = x(t, c) * gate[c];
  }
  if (gate_out != nullptr) *gate_out = gate;
  return y;
}

template <typename T>
ops::Pair<T> eca_backward(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& gate,
                          const Tensor<T>& dy) {
  const std::size_t n = x.rows(), d = x.cols(), k = kernel.size();
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<T> mean(d, T(0)), dgate(d, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      mean[c] += x(t, c);
      dgate[c] += dy(t, c) * x(t, c);
    }
  }
  for (auto& m : mean) m /= T(n);
  std::vector<T> dpre(d);
  for (std::size_t c = 0; c < d; ++c) dpre[c] = dgate[c] * gate[c] * (T(1) - gate[c]);
  Tensor<T> dkernel({k});
  std::vector<T> dmean(d, T(0));
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(c + j) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(d)) continue;
      dkernel[j] += dpre[c] * mean[src];
      dmean[src] += kernel[j] * dpre[c];
    }
  }
  Tensor<T> dx(x.dims());
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) dx(t, c) = dy(t, c) * gate[c] + dmean[c] / T(n);
  }
  return {std::move(dx), std::move(dkernel)};
}

template <typename T>
Tensor<T> phi_forward(PhiKind kind, const Tensor<T>& x, const TokenLayout& layout,
                      const PhiParams<T>& p, PhiCache<T>& cache, MacCounter* counter) {
  if (kind == PhiKind::identity) return x;
  if (kind != PhiKind::dwc && kind != PhiKind::conv && kind != PhiKind::skipat) {
    throw std::invalid_argument(std::string("phi_forward: no Φ for kind ") + phi_kind_name(kind));
  }
  check_phi_layout(x, layout);
  const std::size_t n = layout.patches();
  const std::size_t g = layout.grid;
  cache.patches = split_patches(x, layout);

  if (kind == PhiKind::dwc) {
    const Tensor<T> out = ops::depthwise_conv2d_tokens(cache.patches, layout.batch, g, g,
                                                       *p.dwc.weight, *p.dwc.bias, counter);
    return merge_patches(x, out, layout);
  }
  if (kind == PhiKind::conv) {
    Tensor<T> out(cache.patches.dims());
    for (std::size_t b = 0; b < layout.batch; ++b) {
      const Tensor<T> map = to_grid(cache.patches, b, g);
      from_grid(ops::conv2d(map, *p.conv.weight, *p.conv.bias, counter), b, out);
    }
    return merge_patches(x, out, layout);
  }

  cache.fc1_pre = ops::linear(cache.patches, *p.fc1.weight, *p.fc1.bias, counter);
  cache.fc1_act = ops::gelu(cache.fc1_pre);
  cache.dwc_pre = ops::depthwise_conv2d_tokens(cache.fc1_act, layout.batch, g, g, *p.dwc.weight,
                                               *p.dwc.bias, counter);
  cache.dwc_act = ops::gelu(cache.dwc_pre);
  cache.fc2_out = ops::linear(cache.dwc_act, *p.fc2.weight, *p.fc2.bias, counter);

  const std::size_t d = cache.fc2_out.cols();
  Tensor<T> out(cache.fc2_out.dims());
  cache.gate = Tensor<T>({layout.batch, d});
  Tensor<T> gate;
  for (std::size_t b = 0; b < layout.batch; ++b) {
    put_sample_rows(out, b, eca(sample_rows(cache.fc2_out, b, n), *p.eca, &gate, counter));
    std::copy(gate.data(), gate.data() + d, cache.gate.data() + b * d);
  }
  return merge_patches(x, out, layout);
}

template <typename T>
Tensor<T> phi_backward(PhiKind kind, const TokenLayout& layout, const PhiParams<T>& p,
                       const PhiCache<T>& cache, const Tensor<T>& dy, PhiGrads<T>& g) {
  if (kind == PhiKind::identity) return dy;
  const std::size_t n = layout.patches();
  const std::size_t grid = layout.grid;
  const Tensor<T> d_out = split_patches(dy, layout);

  if (kind == PhiKind::dwc) {
    auto [dx, dw, db] = ops::depthwise_conv2d_tokens_backward(cache.patches, layout.batch, grid,
                                                              grid, *p.dwc.weight, d_out);
    ops::accumulate(*g.dwc.weight, dw);
    ops::accumulate(*g.dwc.bias, db);
    return merge_patches(dy, dx, layout);
  }
  if (kind == PhiKind::conv) {
    Tensor<T> d_patches(cache.patches.dims());
    for (std::size_t b = 0; b < layout.batch; ++b) {
      auto [dx, dw, db] = ops::conv2d_backward(to_grid(cache.patches, b, grid), *p.conv.weight,
                                               to_grid(d_out, b, grid));
      ops::accumulate(*g.conv.weight, dw);
      ops::accumulate(*g.conv.bias, db);
      from_grid(dx, b, d_patches);
    }
    return merge_patches(dy, d_patches, layout);
  }

  const std::size_t d = cache.fc2_out.cols();
  Tensor<T> d_fc2(cache.fc2_out.dims());
  for (std::size_t b = 0; b < layout.batch; ++b) {
    const Tensor<T> gate({d}, std::span<const T>(cache.gate.data() + b * d, d));
    auto [dx, dk] = eca_backward(sample_rows(cache.fc2_out, b, n), *p.eca, gate,
                                 sample_rows(d_out, b, n));
    ops::accumulate(*g.eca, dk);
    put_sample_rows(d_fc2, b, dx);
  }
  const Tensor<T> d_dwc_act =
      ops::linear_backward(cache.dwc_act, *p.fc2.weight, d_fc2, *g.fc2.weight, *g.fc2.bias);
  const Tensor<T> d_dwc_pre = ops::gelu_backward(cache.dwc_pre, d_dwc_act);
  auto [d_fc1_act, dk, db] = ops::depthwise_conv2d_tokens_backward(
      cache.fc1_act, layout.batch, grid, grid, *p.dwc.weight, d_dwc_pre);
  ops::accumulate(*g.dwc.weight, dk);
  ops::accumulate(*g.dwc.bias, db);
  const Tensor<T> d_fc1_pre = ops::gelu_backward(cache.fc1_pre, d_fc1_act);
  const Tensor<T> d_patches =
      ops::linear_backward(cache.patches, *p.fc1.weight, d_fc1_pre, *g.fc1.weight, *g.fc1.bias);
  return merge_patches(dy, d_patches, layout);
}

template <typename T>
Tensor<T> phi_identity(const Tensor<T>& zmsa_prev) {
  return zmsa_prev;
}

template <typename T>
Tensor<T> phi_dwc(const Tensor<T>& zmsa_prev, const PhiParams<T>& p, bool cls) {
  PhiCache<T> cache;
  return phi_forward(PhiKind::dwc, zmsa_prev, single_layout(zmsa_prev.rows(), cls), p, cache,
                     nullptr);
}

template <typename T>
Tensor<T> phi_conv(const Tensor<T>& zmsa_prev, const PhiParams<T>& p, bool cls) {
  PhiCache<T> cache;
  return phi_forward(PhiKind::conv, zmsa_prev, single_layout(zmsa_prev.rows(), cls), p, cache,
                     nullptr);
}

template <typename T>
Tensor<T> phi_skipat(const Tensor<T>& zmsa_prev, const PhiParams<T>& p, bool cls) {
  PhiCache<T> cache;
  return phi_forward(PhiKind::skipat, zmsa_prev, single_layout(zmsa_prev.rows(), cls), p, cache,
                     nullptr);
}

template <typename T>
Tensor<T> attn_reuse_forward(const Tensor<T>& z, const Tensor<T>& attn_prev,
                             const TokenLayout& layout, std::size_t heads, const MsaParams<T>& p,
                             MsaCache<T>& cache, MacCounter* counter) {
  if (attn_prev.empty()) throw MissingTensorError("attention reuse: provider attention missing");
  return attn_apply_forward(z, layout, heads, attn_prev, p, cache, counter);
}

#define SKIPAT_INSTANTIATE_PHI(T)                                                              \
  template PhiParams<T> phi_params(const ParameterStore<T>&, const ModelConfig&, std::size_t); \
  template PhiGrads<T> phi_grads(ParameterStore<T>&, const ModelConfig&, std::size_t);         \
  template Tensor<T> phi_forward(PhiKind, const Tensor<T>&, const TokenLayout&,                \
                                 const PhiParams<T>&, PhiCache<T>&, MacCounter*);              \
  template Tensor<T> phi_backward(PhiKind, const TokenLayout&, const PhiParams<T>&,            \
                                  const PhiCache<T>&, const Tensor<T>&, PhiGrads<T>&);         \
  template Tensor<T> phi_identity(const Tensor<T>&);                                           \
  template Tensor<T> phi_dwc(const Tensor<T>&, const PhiParams<T>&, bool);                     \
  template Tensor<T> phi_conv(const Tensor<T>&, const PhiParams<T>&, bool);                    \
  template Tensor<T> phi_skipat(const Tensor<T>&, const PhiParams<T>&, bool);                  \
  template Tensor<T> eca(const Tensor<T>&, const Tensor<T>&, Tensor<T>*, MacCounter*);         \
  template ops::Pair<T> eca_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                     const Tensor<T>&);                                        \
  template Tensor<T> attn_reuse_forward(const Tensor<T>&, const Tensor<T>&, const TokenLayout&, \
                                        std::size_t, const MsaParams<T>&, MsaCache<T>&,        \
                                        MacCounter*);

SKIPAT_INSTANTIATE_PHI(float)
SKIPAT_INSTANTIATE_PHI(double)

}  // namespace skipat
