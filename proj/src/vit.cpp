#include "skipat/vit.hpp"

#include <algorithm>

namespace skipat {

std::string block_id(std::size_t layer, BlockKind kind) {
  if (kind == BlockKind::patch_embed || kind == BlockKind::head) return block_kind_name(kind);
  return layer_prefix(layer) + block_kind_name(kind);
}

namespace {

void enter(MacCounter* counter, std::size_t layer, BlockKind kind) {
  if (counter != nullptr) counter->enter(block_id(layer, kind), kind);
}

template <typename T>
void check_params(const ModelConfig& config, const ParameterStore<T>& params) {
  for (const auto& spec : parameter_specs(config)) {
    if (!params.contains(spec.name)) throw MissingTensorError("missing tensor: " + spec.name);
    const auto& t = params.value(spec.name);
    if (t.dims() != spec.dims) {
      throw ShapeError("tensor " + spec.name + " has dims " + dims_to_string(t.dims()) +
                       ", config needs " + dims_to_string(spec.dims));
    }
  }
}

template <typename T>
Tensor<T> row_of(const Tensor<T>& m, std::size_t r) {
  return Tensor<T>({m.cols()}, std::span<const T>(m.data() + r * m.cols(), m.cols()));
}

}  // namespace

template <typename T>
VisionTransformer<T>::VisionTransformer(ModelConfig config, const ParameterStore<T>& params)
    : config_(std::move(config)), params_(&params) {
  config_.validate();
  schedule_ = build_schedule(config_);
  check_params(config_, params);
}

template <typename T>
Tensor<T> VisionTransformer<T>::tokenize(const Tensor<T>& patches, const TokenLayout& layout,
                                         MacCounter* counter) const {
  enter(counter, 0, BlockKind::patch_embed);
  const Tensor<T> emb = ops::linear(patches, params_->value("patch_embed.weight"),
                                    params_->value("patch_embed.bias"), counter);
  const Tensor<T>& pos = params_->value("pos_embed");
  const std::size_t d = config_.embed_dim;
  const std::size_t n = layout.patches();
  Tensor<T> z({layout.rows(), d});
  for (std::size_t b = 0; b < layout.batch; ++b) {
    std::size_t row = b * layout.tokens;
    std::size_t p = 0;
    if (layout.cls) {
      const Tensor<T>& cls = params_->value("cls_token");
      for (std::size_t j = 0; j < d; ++j) z(row, j) = cls[j] + pos(0, j);
      ++row;
      ++p;
    }
    for (std::size_t t = 0; t < n; ++t, ++row, ++p) {
      for (std::size_t j = 0; j < d; ++j) z(row, j) = emb(b * n + t, j) + pos(p, j);
    }
  }
  return z;
}

template <typename T>
ForwardState<T> VisionTransformer<T>::forward(const Tensor<T>& images, MacCounter* counter,
                                              bool keep) const {
  const ModelConfig& c = config_;
  if (images.rank() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw ShapeError("images " + dims_to_string(images.dims()) + " do not match config " +
                     std::to_string(c.in_channels) + "x" + std::to_string(c.image_size) + "x" +
                     std::to_string(c.image_size));
  }
  ForwardState<T> s;
  s.layout = {images.dim(0), c.tokens(), c.grid(), c.use_cls_token};
  s.patches = extract_patches(images, c.patch_size);
  Tensor<T> z = tokenize(s.patches, s.layout, counter);

  s.layers.resize(c.depth);
  for (std::size_t l = 1; l <= c.depth; ++l) {
    LayerState<T>& st = s.layers[l - 1];
    st.input = std::move(z);
    if (!c.is_skipped(l)) {
      st.mode = LayerMode::msa;
      enter(counter, l, BlockKind::msa);
      st.branch = msa_forward(st.input, s.layout, c.heads, msa_params(*params_, l), st.msa, counter);
    } else if (c.phi_kind == PhiKind::attn_reuse) {
      st.mode = LayerMode::attn_reuse;
      enter(counter, l, BlockKind::attn_reuse_msa);
      st.branch = attn_reuse_forward(st.input, s.layers[l - 2].msa.attn, s.layout, c.heads,
                                     msa_params(*params_, l), st.msa, counter);
    } else {
      st.mode = LayerMode::phi;
      enter(counter, l, BlockKind::phi);
      st.branch = phi_forward(c.phi_kind, s.layers[l - 2].branch, s.layout,
                              phi_params(*params_, c, l), st.phi, counter);
    }
    st.mid = ops::add(st.input, st.branch);
    enter(counter, l, BlockKind::mlp);
    st.output = ops::add(st.mid, mlp_forward(st.mid, mlp_params(*params_, l), st.mlp, counter));
    z = st.output;
    if (!keep) {
      if (l >= 2) s.layers[l - 2] = LayerState<T>{};
      LayerState<T> slim;
      slim.branch = std::move(st.branch);
      slim.msa.attn = std::move(st.msa.attn);
      st = std::move(slim);
    }
  }

  const std::size_t d = c.embed_dim;
  s.pooled = Tensor<T>({s.layout.batch, d});
  for (std::size_t b = 0; b < s.layout.batch; ++b) {
    if (s.layout.cls) {
      std::copy(&z(b * s.layout.tokens, 0), &z(b * s.layout.tokens, 0) + d, &s.pooled(b, 0));
    } else {
      for (std::size_t t = 0; t < s.layout.tokens; ++t) {
        for (std::size_t j = 0; j < d; ++j) s.pooled(b, j) += z(b * s.layout.tokens + t, j);
      }
      for (std::size_t j = 0; j < d; ++j) s.pooled(b, j) /= T(s.layout.tokens);
    }
  }
  s.normed = ops::layer_norm(s.pooled, params_->value("norm.weight"), params_->value("norm.bias"));
  enter(counter, 0, BlockKind::head);
  s.logits = ops::linear(s.normed, params_->value("head.weight"), params_->value("head.bias"),
                         counter);
  return s;
}

template <typename T>
Tensor<T> VisionTransformer<T>::logits(const Tensor<T>& images, MacCounter* counter) const {
  return forward(images, counter, false).logits;
}

template <typename T>
void VisionTransformer<T>::backward(const ForwardState<T>& s, const Tensor<T>& d_logits,
                                    ParameterStore<T>& grads) const {
  const ModelConfig& c = config_;
  const ParameterStore<T>& P = *params_;
  const std::size_t d = c.embed_dim;
  const TokenLayout& layout = s.layout;

  const Tensor<T> d_normed = ops::linear_backward(s.normed, P.value("head.weight"), d_logits,
                                                  grads.grad("head.weight"), grads.grad("head.bias"));
  auto [d_pooled, d_gamma, d_beta] = ops::layer_norm_backward(s.pooled, P.value("norm.weight"),
                                                              d_normed);
  ops::accumulate(grads.grad("norm.weight"), d_gamma);
  ops::accumulate(grads.grad("norm.bias"), d_beta);

  Tensor<T> dz({layout.rows(), d});
  for (std::size_t b = 0; b < layout.batch; ++b) {
    if (layout.cls) {
      std::copy(&d_pooled(b, 0), &d_pooled(b, 0) + d, &dz(b * layout.tokens, 0));
    } else {
      for (std::size_t t = 0; t < layout.tokens; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          dz(b * layout.tokens + t, j) = d_pooled(b, j) / T(layout.tokens);
        }
      }
    }
  }

  // Gradient reaching a layer's branch output or attention from later skipped layers.
  std::vector<Tensor<T>> d_branch_extra(c.depth + 1), d_attn_extra(c.depth + 1);
  for (std::size_t l = c.depth; l >= 1; --l) {
    const LayerState<T>& st = s.layers[l - 1];
    auto mg = mlp_grads(grads, l);
    Tensor<T> d_mid = dz;
    ops::accumulate(d_mid, mlp_backward(st.mid, mlp_params(P, l), st.mlp, dz, mg));

    Tensor<T> d_branch = d_mid;
    if (!d_branch_extra[l].empty()) ops::accumulate(d_branch, d_branch_extra[l]);
    Tensor<T> d_input = std::move(d_mid);

    switch (st.mode) {
      case LayerMode::msa: {
        auto g = msa_grads(grads, l);
        const Tensor<T>* extra = d_attn_extra[l].empty() ? nullptr : &d_attn_extra[l];
        ops::accumulate(d_input, msa_backward(st.input, layout, c.heads, msa_params(P, l), st.msa,
                                              d_branch, extra, g));
        break;
      }
      case LayerMode::attn_reuse: {
        auto g = msa_grads(grads, l);
        Tensor<T> d_attn = d_attn_extra[l].empty() ? Tensor<T>(st.msa.attn.dims())
                                                   : d_attn_extra[l];
        ops::accumulate(d_input, attn_apply_backward(st.input, layout, c.heads, msa_params(P, l),
                                                     st.msa, d_branch, d_attn, g));
        d_attn_extra[l - 1] = std::move(d_attn);
        break;
      }
      case LayerMode::phi: {
        auto g = phi_grads(grads, c, l);
        Tensor<T> d_prev =
            phi_backward(c.phi_kind, layout, phi_params(P, c, l), st.phi, d_branch, g);
        if (d_branch_extra[l - 1].empty()) {
          d_branch_extra[l - 1] = std::move(d_prev);
        } else {
          ops::accumulate(d_branch_extra[l - 1], d_prev);
        }
        break;
      }
    }
    dz = std::move(d_input);
  }

  // Token embedding.
  const std::size_t n = layout.patches();
  Tensor<T>& d_pos = grads.grad("pos_embed");
  Tensor<T> d_emb({layout.batch * n, d});
  for (std::size_t b = 0; b < layout.batch; ++b) {
    std::size_t row = b * layout.tokens;
    std::size_t p = 0;
    if (layout.cls) {
      Tensor<T>& d_cls = grads.grad("cls_token");
      for (std::size_t j = 0; j < d; ++j) {
        d_cls[j] += dz(row, j);
        d_pos(0, j) += dz(row, j);
      }
      ++row;
      ++p;
    }
    for (std::size_t t = 0; t < n; ++t, ++row, ++p) {
      for (std::size_t j = 0; j < d; ++j) {
        d_pos(p, j) += dz(row, j);
        d_emb(b * n + t, j) = dz(row, j);
      }
    }
  }
  ops::linear_backward(s.patches, P.value("patch_embed.weight"), d_emb,
                       grads.grad("patch_embed.weight"), grads.grad("patch_embed.bias"));
}

template <typename T>
ForwardTrace<T> VisionTransformer<T>::trace(const ForwardState<T>& s, std::size_t b) const {
  const std::size_t n_tok = s.layout.tokens;
  const std::size_t d = config_.embed_dim;
  const std::size_t h = config_.heads;
  ForwardTrace<T> out;
  for (const auto& st : s.layers) {
    LayerTrace<T> lt;
    lt.skipped = st.mode != LayerMode::msa;
    lt.reused = st.mode == LayerMode::attn_reuse;
    if (st.mode != LayerMode::phi) {
      const std::size_t span = h * n_tok * n_tok;
      lt.attn = Tensor<T>({h, n_tok, n_tok},
                          std::span<const T>(st.msa.attn.data() + b * span, span));
    }
    lt.zmsa = Tensor<T>({n_tok, d}, std::span<const T>(st.branch.data() + b * n_tok * d, n_tok * d));
    lt.z = Tensor<T>({n_tok, d}, std::span<const T>(st.output.data() + b * n_tok * d, n_tok * d));
    out.layers.push_back(std::move(lt));
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> as_batch(const Tensor<T>& image) {
  if (image.rank() != 3) {
    throw ShapeError("image must be c×H×W, got " + dims_to_string(image.dims()));
  }
  return image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)});
}

template <typename T>
TokenLayout layout_for(const ModelConfig& config, const Tensor<T>& z) {
  if (z.rank() != 2 || z.rows() != config.tokens() || z.cols() != config.embed_dim) {
    throw ShapeError("token matrix " + dims_to_string(z.dims()) + " does not match config");
  }
  return {1, config.tokens(), config.grid(), config.use_cls_token};
}

}  // namespace

template <typename T>
Tensor<T> tokenize(const Tensor<T>& image, const ParameterStore<T>& params,
                   const ModelConfig& config) {
  const Tensor<T> batch = as_batch(image);
  if (batch.dim(1) != config.in_channels || batch.dim(2) != config.image_size ||
      batch.dim(3) != config.image_size) {
    throw ShapeError("image " + dims_to_string(image.dims()) + " does not match config");
  }
  const TokenLayout layout{1, config.tokens(), config.grid(), config.use_cls_token};
  const Tensor<T> patches = extract_patches(batch, config.patch_size);
  const Tensor<T> emb = ops::linear(patches, params.value("patch_embed.weight"),
                                    params.value("patch_embed.bias"));
  const Tensor<T>& pos = params.value("pos_embed");
  Tensor<T> z({layout.tokens, config.embed_dim});
  const std::size_t off = layout.cls ? 1 : 0;
  for (std::size_t j = 0; j < config.embed_dim; ++j) {
    if (layout.cls) z(0, j) = params.value("cls_token")[j] + pos(0, j);
    for (std::size_t t = 0; t < layout.patches(); ++t) z(t + off, j) = emb(t, j) + pos(t + off, j);
  }
  return z;
}

template <typename T>
MsaResult<T> msa_block(const Tensor<T>& z, const ParameterStore<T>& params,
                       const ModelConfig& config, std::size_t layer) {
  const TokenLayout layout = layout_for(config, z);
  MsaCache<T> cache;
  Tensor<T> zmsa = msa_forward(z, layout, config.heads, msa_params(params, layer), cache, nullptr);
  return {std::move(zmsa), std::move(cache.attn)};
}

template <typename T>
Tensor<T> mlp_block(const Tensor<T>& z, const ParameterStore<T>& params, std::size_t layer) {
  MlpCache<T> cache;
  return mlp_forward(z, mlp_params(params, layer), cache, nullptr);
}

template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const ParameterStore<T>& params,
                         const ModelConfig& config, bool want_trace) {
  const VisionTransformer<T> model(config, params);
  const ForwardState<T> state = model.forward(as_batch(image));
  ForwardResult<T> out;
  out.logits = row_of(state.logits, 0);
  if (want_trace) out.trace = model.trace(state, 0);
  return out;
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;

#define SKIPAT_INSTANTIATE_VIT(T)                                                              \
  template Tensor<T> tokenize(const Tensor<T>&, const ParameterStore<T>&, const ModelConfig&); \
  template MsaResult<T> msa_block(const Tensor<T>&, const ParameterStore<T>&,                  \
                                  const ModelConfig&, std::size_t);                            \
  template Tensor<T> mlp_block(const Tensor<T>&, const ParameterStore<T>&, std::size_t);       \
  template ForwardResult<T> forward(const Tensor<T>&, const ParameterStore<T>&,                \
                                    const ModelConfig&, bool);

SKIPAT_INSTANTIATE_VIT(float)
SKIPAT_INSTANTIATE_VIT(double)

}  // namespace skipat
