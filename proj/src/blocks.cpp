#include "skipat/blocks.hpp"

#include <cmath>

#include "skipat/ops.hpp"

namespace skipat {
namespace {

using ops::Trans;

// Copies the (sample b, head h) N×dh block of a (B·N)×d matrix.
template <typename T>
void gather_head(const Tensor<T>& x, std::size_t b, std::size_t h, std::size_t n_tok,
                 std::size_t dh, T* out) {
  const std::size_t d = x.cols();
  for (std::size_t t = 0; t < n_tok; ++t) {
    const T* src = x.data() + (b * n_tok + t) * d + h * dh;
    std::copy(src, src + dh, out + t * dh);
  }
}

template <typename T>
void scatter_head(Tensor<T>& x, std::size_t b, std::size_t h, std::size_t n_tok, std::size_t dh,
                  const T* in) {
  const std::size_t d = x.cols();
  for (std::size_t t = 0; t < n_tok; ++t) {
    T* dst = x.data() + (b * n_tok + t) * d + h * dh;
    std::copy(in + t * dh, in + (t + 1) * dh, dst);
  }
}

template <typename T>
void check_layout(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads) {
  if (z.rank() != 2 || z.rows() != layout.rows()) {
    throw ShapeError("activation " + dims_to_string(z.dims()) + " does not hold " +
                     std::to_string(layout.batch) + " samples of " +
                     std::to_string(layout.tokens) + " tokens");
  }
  if (heads == 0 || z.cols() % heads != 0) {
    throw ShapeError("embedding width " + std::to_string(z.cols()) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
}

template <typename T>
Tensor<T> norm_forward(const Tensor<T>& z, const LinearParams<T>& norm) {
  return ops::layer_norm(z, *norm.weight, *norm.bias);
}

template <typename T>
Tensor<T> norm_backward(const Tensor<T>& z, const LinearParams<T>& norm, const Tensor<T>& dy,
                        LinearGrads<T>& g) {
  auto [dx, dgamma, dbeta] = ops::layer_norm_backward(z, *norm.weight, dy);
  ops::accumulate(*g.weight, dgamma);
  ops::accumulate(*g.bias, dbeta);
  return std::move(dx);
}

// A·V per (sample, head) into a (B·N)×d matrix.
template <typename T>
Tensor<T> apply_attention(const Tensor<T>& attn, const Tensor<T>& v, const TokenLayout& layout,
                          std::size_t heads, MacCounter* counter) {
  const std::size_t n_tok = layout.tokens;
  const std::size_t dh = v.cols() / heads;
  Tensor<T> out(v.dims());
  std::vector<T> vh(n_tok * dh), oh(n_tok * dh);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* a = attn.data() + (b * heads + h) * n_tok * n_tok;
      gather_head(v, b, h, n_tok, dh, vh.data());
      ops::gemm(Trans::no, Trans::no, n_tok, dh, n_tok, a, vh.data(), oh.data(), false);
      scatter_head(out, b, h, n_tok, dh, oh.data());
    }
  }
  count_macs(counter, std::uint64_t{layout.batch} * heads * n_tok * n_tok * dh);
  return out;
}

// Backward of apply_attention: returns dv, accumulates dA into d_attn.
template <typename T>
Tensor<T> apply_attention_backward(const Tensor<T>& attn, const Tensor<T>& v,
                                   const Tensor<T>& dout, const TokenLayout& layout,
                                   std::size_t heads, Tensor<T>& d_attn) {
  const std::size_t n_tok = layout.tokens;
  const std::size_t dh = v.cols() / heads;
  Tensor<T> dv(v.dims());
  std::vector<T> vh(n_tok * dh), doh(n_tok * dh), dvh(n_tok * dh);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = (b * heads + h) * n_tok * n_tok;
      gather_head(v, b, h, n_tok, dh, vh.data());
      gather_head(dout, b, h, n_tok, dh, doh.data());
      ops::gemm(Trans::no, Trans::yes, n_tok, n_tok, dh, doh.data(), vh.data(),
                d_attn.data() + off, true);
      ops::gemm(Trans::yes, Trans::no, n_tok, dh, n_tok, attn.data() + off, doh.data(),
                dvh.data(), false);
      scatter_head(dv, b, h, n_tok, dh, dvh.data());
    }
  }
  return dv;
}

}  // namespace

template <typename T>
MsaParams<T> msa_params(const ParameterStore<T>& store, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  MsaParams<T> out;
  out.norm = linear_params(store, p + "norm1.");
  if (store.contains(p + "attn.q.weight")) {
    out.q = linear_params(store, p + "attn.q.");
    out.k = linear_params(store, p + "attn.k.");
  }
  out.v = linear_params(store, p + "attn.v.");
  out.proj = linear_params(store, p + "attn.proj.");
  return out;
}

template <typename T>
MsaGrads<T> msa_grads(ParameterStore<T>& store, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  MsaGrads<T> out;
  out.norm = linear_grads(store, p + "norm1.");
  if (store.contains(p + "attn.q.weight")) {
    out.q = linear_grads(store, p + "attn.q.");
    out.k = linear_grads(store, p + "attn.k.");
  }
  out.v = linear_grads(store, p + "attn.v.");
  out.proj = linear_grads(store, p + "attn.proj.");
  return out;
}

template <typename T>
Tensor<T> msa_forward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                      const MsaParams<T>& p, MsaCache<T>& cache, MacCounter* counter) {
  check_layout(z, layout, heads);
  if (p.q.weight == nullptr) throw MissingTensorError("msa_forward: query/key weights absent");
  const std::size_t n_tok = layout.tokens;
  const std::size_t dh = z.cols() / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  cache.normed = norm_forward(z, p.norm);
  cache.q = ops::linear(cache.normed, *p.q.weight, *p.q.bias, counter);
  cache.k = ops::linear(cache.normed, *p.k.weight, *p.k.bias, counter);
  cache.v = ops::linear(cache.normed, *p.v.weight, *p.v.bias, counter);

  cache.attn = Tensor<T>({layout.batch * heads, n_tok, n_tok});
  std::vector<T> qh(n_tok * dh), kh(n_tok * dh);
  Tensor<T> scores({n_tok, n_tok});
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      gather_head(cache.q, b, h, n_tok, dh, qh.data());
      gather_head(cache.k, b, h, n_tok, dh, kh.data());
      ops::gemm(Trans::no, Trans::yes, n_tok, n_tok, dh, qh.data(), kh.data(), scores.data(),
                false);
      for (std::size_t i = 0; i < scores.size(); ++i) scores[i] *= scale;
      const Tensor<T> a = ops::softmax_rows(scores);
      std::copy(a.data(), a.data() + a.size(),
                cache.attn.data() + (b * heads + h) * n_tok * n_tok);
    }
  }
  count_macs(counter, std::uint64_t{layout.batch} * heads * n_tok * n_tok * dh);
  cache.heads = apply_attention(cache.attn, cache.v, layout, heads, counter);
  return ops::linear(cache.heads, *p.proj.weight, *p.proj.bias, counter);
}

template <typename T>
Tensor<T> msa_backward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                       const MsaParams<T>& p, const MsaCache<T>& cache, const Tensor<T>& dzmsa,
                       const Tensor<T>* d_attn_extra, MsaGrads<T>& g) {
  const std::size_t n_tok = layout.tokens;
  const std::size_t dh = z.cols() / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  const Tensor<T> d_heads =
      ops::linear_backward(cache.heads, *p.proj.weight, dzmsa, *g.proj.weight, *g.proj.bias);
  Tensor<T> d_attn = d_attn_extra != nullptr ? *d_attn_extra : Tensor<T>(cache.attn.dims());
  const Tensor<T> dv =
      apply_attention_backward(cache.attn, cache.v, d_heads, layout, heads, d_attn);

  Tensor<T> dq(cache.q.dims());
  Tensor<T> dk(cache.k.dims());
  std::vector<T> qh(n_tok * dh), kh(n_tok * dh), dqh(n_tok * dh), dkh(n_tok * dh);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = (b * heads + h) * n_tok * n_tok;
      const Tensor<T> a({n_tok, n_tok}, std::span<const T>(cache.attn.data() + off, n_tok * n_tok));
      const Tensor<T> da({n_tok, n_tok}, std::span<const T>(d_attn.data() + off, n_tok * n_tok));
      Tensor<T> ds = ops::softmax_rows_backward(a, da);
      for (std::size_t i = 0; i < ds.size(); ++i) ds[i] *= scale;
      gather_head(cache.q, b, h, n_tok, dh, qh.data());
      gather_head(cache.k, b, h, n_tok, dh, kh.data());
      ops::gemm(Trans::no, Trans::no, n_tok, dh, n_tok, ds.data(), kh.data(), dqh.data(), false);
      ops::gemm(Trans::yes, Trans::no, n_tok, dh, n_tok, ds.data(), qh.data(), dkh.data(), false);
      scatter_head(dq, b, h, n_tok, dh, dqh.data());
      scatter_head(dk, b, h, n_tok, dh, dkh.data());
    }
  }

  Tensor<T> d_normed =
      ops::linear_backward(cache.normed, *p.q.weight, dq, *g.q.weight, *g.q.bias);
  ops::accumulate(d_normed,
                  ops::linear_backward(cache.normed, *p.k.weight, dk, *g.k.weight, *g.k.bias));
  ops::accumulate(d_normed,
                  ops::linear_backward(cache.normed, *p.v.weight, dv, *g.v.weight, *g.v.bias));
  return norm_backward(z, p.norm, d_normed, g.norm);
}

template <typename T>
Tensor<T> attn_apply_forward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                             const Tensor<T>& attn, const MsaParams<T>& p, MsaCache<T>& cache,
                             MacCounter* counter) {
  check_layout(z, layout, heads);
  const Dims expected{layout.batch * heads, layout.tokens, layout.tokens};
  if (attn.dims() != expected) {
    throw ShapeError("supplied attention " + dims_to_string(attn.dims()) + ", expected " +
                     dims_to_string(expected));
  }
  cache.normed = norm_forward(z, p.norm);
  cache.v = ops::linear(cache.normed, *p.v.weight, *p.v.bias, counter);
  cache.attn = attn;
  cache.heads = apply_attention(cache.attn, cache.v, layout, heads, counter);
  return ops::linear(cache.heads, *p.proj.weight, *p.proj.bias, counter);
}

template <typename T>
Tensor<T> attn_apply_backward(const Tensor<T>& z, const TokenLayout& layout, std::size_t heads,
                              const MsaParams<T>& p, const MsaCache<T>& cache,
                              const Tensor<T>& dzmsa, Tensor<T>& d_attn, MsaGrads<T>& g) {
  const Tensor<T> d_heads =
      ops::linear_backward(cache.heads, *p.proj.weight, dzmsa, *g.proj.weight, *g.proj.bias);
  const Tensor<T> dv =
      apply_attention_backward(cache.attn, cache.v, d_heads, layout, heads, d_attn);
  const Tensor<T> d_normed =
      ops::linear_backward(cache.normed, *p.v.weight, dv, *g.v.weight, *g.v.bias);
  return norm_backward(z, p.norm, d_normed, g.norm);
}

template <typename T>
MlpParams<T> mlp_params(const ParameterStore<T>& store, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  return {linear_params(store, p + "norm2."), linear_params(store, p + "mlp.fc1."),
          linear_params(store, p + "mlp.fc2.")};
}

template <typename T>
MlpGrads<T> mlp_grads(ParameterStore<T>& store, std::size_t layer) {
  const std::string p = layer_prefix(layer);
  return {linear_grads(store, p + "norm2."), linear_grads(store, p + "mlp.fc1."),
          linear_grads(store, p + "mlp.fc2.")};
}

template <typename T>
Tensor<T> mlp_forward(const Tensor<T>& z, const MlpParams<T>& p, MlpCache<T>& cache,
                      MacCounter* counter) {
  cache.normed = norm_forward(z, p.norm);
  cache.hidden_pre = ops::linear(cache.normed, *p.fc1.weight, *p.fc1.bias, counter);
  cache.hidden = ops::gelu(cache.hidden_pre);
  return ops::linear(cache.hidden, *p.fc2.weight, *p.fc2.bias, counter);
}

template <typename T>
Tensor<T> mlp_backward(const Tensor<T>& z, const MlpParams<T>& p, const MlpCache<T>& cache,
                       const Tensor<T>& dy, MlpGrads<T>& g) {
  const Tensor<T> d_hidden =
      ops::linear_backward(cache.hidden, *p.fc2.weight, dy, *g.fc2.weight, *g.fc2.bias);
  const Tensor<T> d_pre = ops::gelu_backward(cache.hidden_pre, d_hidden);
  const Tensor<T> d_normed =
      ops::linear_backward(cache.normed, *p.fc1.weight, d_pre, *g.fc1.weight, *g.fc1.bias);
  return norm_backward(z, p.norm, d_normed, g.norm);
}

template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, std::size_t patch) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3) || images.dim(2) % patch != 0) {
    throw ShapeError("extract_patches: images " + dims_to_string(images.dims()) +
                     " are not square multiples of patch " + std::to_string(patch));
  }
  const std::size_t batch = images.dim(0), c = images.dim(1), size = images.dim(2);
  const std::size_t grid = size / patch;
  const std::size_t pd = patch * patch * c;
  Tensor<T> out({batch * grid * grid, pd});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* row = &out((b * grid + gy) * grid + gx, 0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t py = 0; py < patch; ++py) {
            const T* src = images.data() + ((b * c + ch) * size + gy * patch + py) * size +
                           gx * patch;
            std::copy(src, src + patch, row + (ch * patch + py) * patch);
          }
        }
      }
    }
  }
  return out;
}

#define SKIPAT_INSTANTIATE_BLOCKS(T)                                                           \
  template MsaParams<T> msa_params(const ParameterStore<T>&, std::size_t);                     \
  template MsaGrads<T> msa_grads(ParameterStore<T>&, std::size_t);                             \
  template Tensor<T> msa_forward(const Tensor<T>&, const TokenLayout&, std::size_t,            \
                                 const MsaParams<T>&, MsaCache<T>&, MacCounter*);              \
  template Tensor<T> msa_backward(const Tensor<T>&, const TokenLayout&, std::size_t,           \
                                  const MsaParams<T>&, const MsaCache<T>&, const Tensor<T>&,   \
                                  const Tensor<T>*, MsaGrads<T>&);                             \
  template Tensor<T> attn_apply_forward(const Tensor<T>&, const TokenLayout&, std::size_t,     \
                                        const Tensor<T>&, const MsaParams<T>&, MsaCache<T>&,   \
                                        MacCounter*);                                          \
  template Tensor<T> attn_apply_backward(const Tensor<T>&, const TokenLayout&, std::size_t,    \
                                         const MsaParams<T>&, const MsaCache<T>&,              \
                                         const Tensor<T>&, Tensor<T>&, MsaGrads<T>&);          \
  template MlpParams<T> mlp_params(const ParameterStore<T>&, std::size_t);                     \
  template MlpGrads<T> mlp_grads(ParameterStore<T>&, std::size_t);                             \
  template Tensor<T> mlp_forward(const Tensor<T>&, const MlpParams<T>&, MlpCache<T>&,          \
                                 MacCounter*);                                                 \
  template Tensor<T> mlp_backward(const Tensor<T>&, const MlpParams<T>&, const MlpCache<T>&,   \
                                  const Tensor<T>&, MlpGrads<T>&);                             \
  template Tensor<T> extract_patches(const Tensor<T>&, std::size_t);

SKIPAT_INSTANTIATE_BLOCKS(float)
SKIPAT_INSTANTIATE_BLOCKS(double)

}  // namespace skipat
