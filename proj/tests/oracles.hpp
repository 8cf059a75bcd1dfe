#pragma once

// Plain-loop reference implementations used as test oracles. Nothing here
// calls into the library's ops; every formula is written out directly.

#include <cmath>
#include <cstddef>
#include <vector>

#include "skipat/config.hpp"
#include "skipat/params.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;  // row-major rows

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  return out;
}

template <typename T>
Mat to_mat(const skipat::Tensor<T>& t) {
  const std::size_t r = t.rank() == 1 ? 1 : t.dim(0);
  const std::size_t c = t.size() / r;
  Mat m = zeros(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = static_cast<double>(t[i * c + j]);
  return m;
}

inline std::vector<double> vec(const skipat::Tensor<double>& t) {
  return std::vector<double>(t.data(), t.data() + t.size());
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat linear(const Mat& x, const skipat::Tensor<double>& w, const skipat::Tensor<double>& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Mat y = zeros(x.size(), out);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < out; ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < in; ++k) s += x[i][k] * w[k * out + j];
      y[i][j] = s;
    }
  return y;
}

inline Mat layer_norm(const Mat& x, const skipat::Tensor<double>& g,
                      const skipat::Tensor<double>& b, double eps = 1e-6) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t d = x[i].size();
    double mean = 0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(d);
    double var = 0;
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

inline void softmax_row(std::vector<double>& r) {
  double m = r[0];
  for (double v : r) m = std::max(m, v);
  double s = 0;
  for (double& v : r) s += (v = std::exp(v - m));
  for (double& v : r) v /= s;
}

// Depthwise r×r convolution over a side×side grid of token rows, zero padding.
inline Mat depthwise(const Mat& x, std::size_t side, const skipat::Tensor<double>& k,
                     const skipat::Tensor<double>& bias) {
  const std::size_t c = x[0].size(), r = k.dim(1);
  const long pad = static_cast<long>(r / 2);
  Mat y = zeros(x.size(), c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (long py = 0; py < static_cast<long>(side); ++py)
      for (long px = 0; px < static_cast<long>(side); ++px) {
        double s = bias[ch];
        for (long i = 0; i < static_cast<long>(r); ++i)
          for (long j = 0; j < static_cast<long>(r); ++j) {
            const long sy = py + i - pad, sx = px + j - pad;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(side) || sx >= static_cast<long>(side))
              continue;
            s += k[(ch * r + i) * r + j] * x[sy * side + sx][ch];
          }
        y[py * side + px][ch] = s;
      }
  return y;
}

// Full cout×cin×r×r convolution over the token grid.
inline Mat conv(const Mat& x, std::size_t side, const skipat::Tensor<double>& w,
                const skipat::Tensor<double>& bias) {
  const std::size_t cout = w.dim(0), cin = w.dim(1), r = w.dim(2);
  const long pad = static_cast<long>(r / 2);
  Mat y = zeros(x.size(), cout);
  for (std::size_t o = 0; o < cout; ++o)
    for (long py = 0; py < static_cast<long>(side); ++py)
      for (long px = 0; px < static_cast<long>(side); ++px) {
        double s = bias[o];
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (long i = 0; i < static_cast<long>(r); ++i)
            for (long j = 0; j < static_cast<long>(r); ++j) {
              const long sy = py + i - pad, sx = px + j - pad;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(side) || sx >= static_cast<long>(side))
                continue;
              s += w[((o * cin + ci) * r + i) * r + j] * x[sy * side + sx][ci];
            }
        y[py * side + px][o] = s;
      }
  return y;
}

inline Mat eca(const Mat& x, const skipat::Tensor<double>& k) {
  const std::size_t n = x.size(), d = x[0].size(), ks = k.size();
  std::vector<double> mean(d, 0.0);
  for (const auto& row : x)
    for (std::size_t c = 0; c < d; ++c) mean[c] += row[c] / static_cast<double>(n);
  Mat y = x;
  for (std::size_t c = 0; c < d; ++c) {
    double s = 0;
    for (std::size_t j = 0; j < ks; ++j) {
      const long src = static_cast<long>(c + j) - static_cast<long>(ks / 2);
      if (src >= 0 && src < static_cast<long>(d)) s += k[j] * mean[src];
    }
    const double g = sigmoid(s);
    for (std::size_t t = 0; t < n; ++t) y[t][c] = x[t][c] * g;
  }
  return y;
}

struct Attn {
  Mat out;                              // pre-projection head concat
  std::vector<Mat> maps;                // per head N×N
};

inline Attn attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads,
                      const std::vector<Mat>* given = nullptr) {
  const std::size_t n = q.size(), d = q[0].size(), dh = d / heads;
  Attn a;
  a.out = zeros(n, d);
  for (std::size_t h = 0; h < heads; ++h) {
    Mat map = given ? (*given)[h] : zeros(n, n);
    if (!given) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
          map[i][j] = s / std::sqrt(static_cast<double>(dh));
        }
        softmax_row(map[i]);
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dh; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += map[i][j] * v[j][h * dh + c];
        a.out[i][h * dh + c] = s;
      }
    a.maps.push_back(map);
  }
  return a;
}

struct LayerOut {
  Mat zmsa, z;
  std::vector<Mat> attn;  // empty at Φ layers
};

struct Result {
  std::vector<double> logits;
  std::vector<LayerOut> layers;
};

// Whole-model forward for one c×H×W image, reading parameters by name.
inline Result vit_forward(const skipat::Tensor<double>& image,
                          const skipat::ParameterStore<double>& p, const skipat::ModelConfig& c) {
  const std::size_t ps = c.patch_size, side = c.grid(), n = side * side, d = c.embed_dim;
  const std::size_t off = c.use_cls_token ? 1 : 0;
  const std::size_t size = c.image_size;
  Mat patches = zeros(n, c.patch_dim());
  for (std::size_t gy = 0; gy < side; ++gy)
    for (std::size_t gx = 0; gx < side; ++gx)
      for (std::size_t ch = 0; ch < c.in_channels; ++ch)
        for (std::size_t i = 0; i < ps; ++i)
          for (std::size_t j = 0; j < ps; ++j)
            patches[gy * side + gx][(ch * ps + i) * ps + j] =
                image[(ch * size + gy * ps + i) * size + gx * ps + j];
  const Mat emb = linear(patches, p.value("patch_embed.weight"), p.value("patch_embed.bias"));
  const auto& pos = p.value("pos_embed");
  Mat z = zeros(n + off, d);
  for (std::size_t j = 0; j < d; ++j) {
    if (off) z[0][j] = p.value("cls_token")[j] + pos[j];
    for (std::size_t t = 0; t < n; ++t) z[t + off][j] = emb[t][j] + pos[(t + off) * d + j];
  }

  Result res;
  for (std::size_t l = 1; l <= c.depth; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    LayerOut lo;
    const bool skipped = c.is_skipped(l);
    if (!skipped || c.phi_kind == skipat::PhiKind::attn_reuse) {
      const Mat x = layer_norm(z, p.value(pre + "norm1.weight"), p.value(pre + "norm1.bias"));
      const Mat v = linear(x, p.value(pre + "attn.v.weight"), p.value(pre + "attn.v.bias"));
      Attn a;
      if (!skipped) {
        const Mat q = linear(x, p.value(pre + "attn.q.weight"), p.value(pre + "attn.q.bias"));
        const Mat k = linear(x, p.value(pre + "attn.k.weight"), p.value(pre + "attn.k.bias"));
        a = attention(q, k, v, c.heads);
      } else {
        a = attention(v, v, v, c.heads, &res.layers.back().attn);
      }
      lo.attn = a.maps;
      lo.zmsa = linear(a.out, p.value(pre + "attn.proj.weight"), p.value(pre + "attn.proj.bias"));
    } else {
      const Mat& prev = res.layers.back().zmsa;
      const std::string phi = c.phi_shared ? std::string("phi.") : pre + "phi.";
      Mat pt(prev.begin() + static_cast<long>(off), prev.end());
      Mat out;
      switch (c.phi_kind) {
        case skipat::PhiKind::identity: out = pt; break;
        case skipat::PhiKind::dwc:
          out = depthwise(pt, side, p.value(phi + "dwc.weight"), p.value(phi + "dwc.bias"));
          break;
        case skipat::PhiKind::conv:
          out = conv(pt, side, p.value(phi + "conv.weight"), p.value(phi + "conv.bias"));
          break;
        default: {
          Mat h = linear(pt, p.value(phi + "fc1.weight"), p.value(phi + "fc1.bias"));
          for (auto& row : h)
            for (double& v : row) v = gelu(v);
          h = depthwise(h, side, p.value(phi + "dwc.weight"), p.value(phi + "dwc.bias"));
          for (auto& row : h)
            for (double& v : row) v = gelu(v);
          out = eca(linear(h, p.value(phi + "fc2.weight"), p.value(phi + "fc2.bias")),
                    p.value(phi + "eca.weight"));
        }
      }
      lo.zmsa = prev;
      for (std::size_t t = 0; t < n; ++t) lo.zmsa[t + off] = out[t];
    }
    for (std::size_t i = 0; i < z.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) z[i][j] += lo.zmsa[i][j];
    Mat h = layer_norm(z, p.value(pre + "norm2.weight"), p.value(pre + "norm2.bias"));
    h = linear(h, p.value(pre + "mlp.fc1.weight"), p.value(pre + "mlp.fc1.bias"));
    for (auto& row : h)
      for (double& v : row) v = gelu(v);
    h = linear(h, p.value(pre + "mlp.fc2.weight"), p.value(pre + "mlp.fc2.bias"));
    for (std::size_t i = 0; i < z.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) z[i][j] += h[i][j];
    lo.z = z;
    res.layers.push_back(lo);
  }
  Mat pooled = zeros(1, d);
  if (off) {
    pooled[0] = z[0];
  } else {
    for (const auto& row : z)
      for (std::size_t j = 0; j < d; ++j) pooled[0][j] += row[j] / static_cast<double>(z.size());
  }
  pooled = layer_norm(pooled, p.value("norm.weight"), p.value("norm.bias"));
  res.logits = linear(pooled, p.value("head.weight"), p.value("head.bias"))[0];
  return res;
}

// Feature-space form: ‖YcᵀXc‖² / (‖XcᵀXc‖·‖YcᵀYc‖), Frobenius norms.
inline double linear_cka(const oracle::Mat& x, const oracle::Mat& y) {
  auto center = [](oracle::Mat m) {
    for (std::size_t j = 0; j < m[0].size(); ++j) {
      double mean = 0;
      for (const auto& r : m) mean += r[j];
      mean /= static_cast<double>(m.size());
      for (auto& r : m) r[j] -= mean;
    }
    return m;
  };
  auto cross = [](const oracle::Mat& a, const oracle::Mat& b) {  // aᵀb
    oracle::Mat out = oracle::zeros(a[0].size(), b[0].size());
    for (std::size_t s = 0; s < a.size(); ++s)
      for (std::size_t i = 0; i < a[0].size(); ++i)
        for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[s][i] * b[s][j];
    return out;
  };
  auto frob2 = [](const oracle::Mat& m) {
    double s = 0;
    for (const auto& r : m)
      for (double v : r) s += v * v;
    return s;
  };
  const auto xc = center(x), yc = center(y);
  return frob2(cross(yc, xc)) / (std::sqrt(frob2(cross(xc, xc))) * std::sqrt(frob2(cross(yc, yc))));
}

}  // namespace oracle
