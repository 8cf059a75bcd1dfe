#include "skipat/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace skipat {

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::string dims_to_string(const Dims& dims) {
  std::string out = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(dims[i]);
  }
  return out + "]";
}

std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace skipat

namespace skipat::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.same_dims(b), std::string(op) + ": operand dims " + dims_to_string(a.dims()) +
                              " and " + dims_to_string(b.dims()) + " differ");
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t r, const char* op, const char* operand) {
  require(a.rank() == r, std::string(op) + ": " + operand + " must have rank " +
                             std::to_string(r) + ", got " + dims_to_string(a.dims()));
}

template <typename T>
std::size_t last_extent(const Tensor<T>& x, const char* op) {
  require(x.rank() >= 1, std::string(op) + ": scalar input");
  return x.dims().back();
}

template <typename T>
using ArrayMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Unaligned>;
template <typename T>
using ConstArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Unaligned>;

template <typename T, typename F>
Tensor<T> map_unary(const Tensor<T>& x, F f) {
  Tensor<T> out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> map_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  require_same(a, b, op);
  Tensor<T> out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

int checked_pad(std::size_t r, const char* op) {
  require(r % 2 == 1, std::string(op) + ": kernel size must be odd, got " + std::to_string(r));
  return static_cast<int>(r / 2);
}

}  // namespace

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  Map<T> cm(c, em, en);
  if (!accumulate) cm.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  if (ta == Trans::no && tb == Trans::no) {
    cm.noalias() += MapC<T>(a, em, ek) * MapC<T>(b, ek, en);
  } else if (ta == Trans::no) {
    cm.noalias() += MapC<T>(a, em, ek) * MapC<T>(b, en, ek).transpose();
  } else if (tb == Trans::no) {
    cm.noalias() += MapC<T>(a, ek, em).transpose() * MapC<T>(b, ek, en);
  } else {
    cm.noalias() += MapC<T>(a, ek, em).transpose() * MapC<T>(b, en, ek).transpose();
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, MacCounter* counter) {
  require_rank(a, 2, "matmul", "a");
  require_rank(b, 2, "matmul", "b");
  require(a.cols() == b.rows(), "matmul: inner extents disagree, a is " +
                                    dims_to_string(a.dims()) + ", b is " +
                                    dims_to_string(b.dims()));
  Tensor<T> c({a.rows(), b.cols()});
  gemm(Trans::no, Trans::no, a.rows(), b.cols(), a.cols(), a.data(), b.data(), c.data(), false);
  count_macs(counter, std::uint64_t{a.rows()} * a.cols() * b.cols());
  return c;
}

template <typename T>
Pair<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc) {
  require(dc.rank() == 2 && dc.rows() == a.rows() && dc.cols() == b.cols(),
          "matmul_backward: upstream dims " + dims_to_string(dc.dims()) + " do not match");
  Tensor<T> da(a.dims());
  Tensor<T> db(b.dims());
  gemm(Trans::no, Trans::yes, a.rows(), a.cols(), b.cols(), dc.data(), b.data(), da.data(),
       false);
  gemm(Trans::yes, Trans::no, a.cols(), b.cols(), a.rows(), a.data(), dc.data(), db.data(),
       false);
  return {std::move(da), std::move(db)};
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 MacCounter* counter) {
  require_rank(x, 2, "linear", "x");
  require_rank(w, 2, "linear", "weight");
  require(x.cols() == w.rows() && bias.size() == w.cols(),
          "linear: x " + dims_to_string(x.dims()) + ", weight " + dims_to_string(w.dims()) +
              ", bias " + dims_to_string(bias.dims()) + " are incompatible");
  const std::size_t m = x.rows();
  const std::size_t out = w.cols();
  Tensor<T> y({m, out});
  for (std::size_t i = 0; i < m; ++i) std::copy(bias.data(), bias.data() + out, &y(i, 0));
  gemm(Trans::no, Trans::no, m, out, x.cols(), x.data(), w.data(), y.data(), true);
  count_macs(counter, std::uint64_t{m} * x.cols() * out);
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>& dw, Tensor<T>& dbias) {
  require(dy.rank() == 2 && dy.rows() == x.rows() && dy.cols() == w.cols(),
          "linear_backward: upstream dims " + dims_to_string(dy.dims()) + " do not match");
  Tensor<T> dx(x.dims());
  gemm(Trans::no, Trans::yes, x.rows(), w.rows(), w.cols(), dy.data(), w.data(), dx.data(),
       false);
  gemm(Trans::yes, Trans::no, w.rows(), w.cols(), x.rows(), x.data(), dy.data(), dw.data(),
       true);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    for (std::size_t j = 0; j < dy.cols(); ++j) dbias[j] += dy(i, j);
  }
  return dx;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = last_extent(x, "softmax_rows");
  require(n >= 1, "softmax_rows: empty rows");
  Tensor<T> y(x.dims());
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * n;
    T* out = y.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    ArrayMap<T> e(out, static_cast<Eigen::Index>(n));
    e = (ConstArrayMap<T>(in, static_cast<Eigen::Index>(n)) - mx).exp();
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += out[j];
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  require_same(y, dy, "softmax_rows_backward");
  const std::size_t n = last_extent(y, "softmax_rows_backward");
  Tensor<T> dx(y.dims());
  const std::size_t rows = y.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* yr = y.data() + r * n;
    const T* gr = dy.data() + r * n;
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
    T* out = dx.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) out[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> y(x.dims());
  const auto n = static_cast<Eigen::Index>(x.size());
  ConstArrayMap<T> in(x.data(), n);
  ArrayMap<T>(y.data(), n) = T(0.5) * in * (T(1) + (in * inv_sqrt2).erf());
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same(x, dy, "gelu_backward");
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt_2pi = T(0.39894228040143267794);
  Tensor<T> dx(x.dims());
  const auto n = static_cast<Eigen::Index>(x.size());
  ConstArrayMap<T> v(x.data(), n), g(dy.data(), n);
  ArrayMap<T>(dx.data(), n) =
      g * (T(0.5) * (T(1) + (v * inv_sqrt2).erf()) + v * inv_sqrt_2pi * (T(-0.5) * v * v).exp());
  return dx;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  const std::size_t d = last_extent(x, "layer_norm");
  require(gamma.size() == d && beta.size() == d,
          "layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  require(eps > 0, "layer_norm: eps must be positive");
  Tensor<T> y(x.dims());
  const std::size_t rows = x.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(eps));
    T* out = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) out[j] = (in[j] - mean) * rstd * gamma[j] + beta[j];
  }
  return y;
}

template <typename T>
Triple<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy,
                              double eps) {
  require_same(x, dy, "layer_norm_backward");
  const std::size_t d = last_extent(x, "layer_norm_backward");
  Tensor<T> dx(x.dims());
  Tensor<T> dgamma({d});
  Tensor<T> dbeta({d});
  const std::size_t rows = x.size() / d;
  std::vector<T> xhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * d;
    const T* g = dy.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(d);
    const T rstd = T(1) / std::sqrt(var + T(eps));
    T sum_g = 0;
    T sum_gx = 0;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[j] = (in[j] - mean) * rstd;
      const T gh = g[j] * gamma[j];
      sum_g += gh;
      sum_gx += gh * xhat[j];
      dgamma[j] += g[j] * xhat[j];
      dbeta[j] += g[j];
    }
    T* out = dx.data() + r * d;
    const T inv_d = T(1) / T(d);
    for (std::size_t j = 0; j < d; ++j) {
      out[j] = rstd * (g[j] * gamma[j] - inv_d * sum_g - xhat[j] * inv_d * sum_gx);
    }
  }
  return {std::move(dx), std::move(dgamma), std::move(dbeta)};
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                           MacCounter* counter) {
  require_rank(x, 3, "depthwise_conv2d", "x");
  require_rank(kernels, 3, "depthwise_conv2d", "kernels");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t r = kernels.dim(1);
  require(kernels.dim(0) == c && kernels.dim(2) == r && bias.size() == c,
          "depthwise_conv2d: kernels " + dims_to_string(kernels.dims()) + " / bias " +
              dims_to_string(bias.dims()) + " do not fit input " + dims_to_string(x.dims()));
  const int pad = checked_pad(r, "depthwise_conv2d");
  const int ih = static_cast<int>(h), iw = static_cast<int>(w);
  Tensor<T> y(x.dims());
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* out = y.data() + ch * h * w;
    const T* in = x.data() + ch * h * w;
    std::fill(out, out + h * w, bias[ch]);
    for (int ky = 0; ky < static_cast<int>(r); ++ky) {
      const int dy = ky - pad;
      const int y0 = std::max(0, -dy), y1 = std::min(ih, ih - dy);
      for (int kx = 0; kx < static_cast<int>(r); ++kx) {
        const int dx = kx - pad;
        const int x0 = std::max(0, -dx), x1 = std::min(iw, iw - dx);
        const T wv = kernels(ch, static_cast<std::size_t>(ky), static_cast<std::size_t>(kx));
        for (int yy = y0; yy < y1; ++yy) {
          T* orow = out + yy * iw;
          const T* irow = in + (yy + dy) * iw + dx;
          for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
        }
      }
    }
  }
  count_macs(counter, std::uint64_t{c} * h * w * r * r);
  return y;
}

template <typename T>
Triple<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernels,
                                    const Tensor<T>& dy) {
  require_same(x, dy, "depthwise_conv2d_backward");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t r = kernels.dim(1);
  const int pad = checked_pad(r, "depthwise_conv2d_backward");
  const int ih = static_cast<int>(h), iw = static_cast<int>(w);
  Tensor<T> dx(x.dims());
  Tensor<T> dk(kernels.dims());
  Tensor<T> db({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* in = x.data() + ch * h * w;
    const T* g = dy.data() + ch * h * w;
    T* gin = dx.data() + ch * h * w;
    T bsum = 0;
    for (std::size_t i = 0; i < h * w; ++i) bsum += g[i];
    db[ch] = bsum;
    for (int ky = 0; ky < static_cast<int>(r); ++ky) {
      const int oy = ky - pad;
      const int y0 = std::max(0, -oy), y1 = std::min(ih, ih - oy);
      for (int kx = 0; kx < static_cast<int>(r); ++kx) {
        const int ox = kx - pad;
        const int x0 = std::max(0, -ox), x1 = std::min(iw, iw - ox);
        const T wv = kernels(ch, static_cast<std::size_t>(ky), static_cast<std::size_t>(kx));
        T acc = 0;
        for (int yy = y0; yy < y1; ++yy) {
          const T* grow = g + yy * iw;
          const T* irow = in + (yy + oy) * iw + ox;
          T* girow = gin + (yy + oy) * iw + ox;
          for (int xx = x0; xx < x1; ++xx) {
            acc += grow[xx] * irow[xx];
            girow[xx] += wv * grow[xx];
          }
        }
        dk(ch, static_cast<std::size_t>(ky), static_cast<std::size_t>(kx)) = acc;
      }
    }
  }
  return {std::move(dx), std::move(dk), std::move(db)};
}

namespace {

// kernels c×r×r -> (r·r)×c so that the channel loop runs over contiguous memory.
template <typename T>
std::vector<T> kernels_by_tap(const Tensor<T>& kernels) {
  const std::size_t c = kernels.dim(0), taps = kernels.dim(1) * kernels.dim(2);
  std::vector<T> out(taps * c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t t = 0; t < taps; ++t) out[t * c + ch] = kernels[ch * taps + t];
  }
  return out;
}

template <typename T>
void check_token_grid(const Tensor<T>& x, std::size_t batch, std::size_t h, std::size_t w,
                      const char* op) {
  require(x.rank() == 2 && x.rows() == batch * h * w,
          std::string(op) + ": input " + dims_to_string(x.dims()) + " is not " +
              std::to_string(batch) + " grids of " + std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace

template <typename T>
Tensor<T> depthwise_conv2d_tokens(const Tensor<T>& x, std::size_t batch, std::size_t h,
                                  std::size_t w, const Tensor<T>& kernels, const Tensor<T>& bias,
                                  MacCounter* counter) {
  check_token_grid(x, batch, h, w, "depthwise_conv2d_tokens");
  require_rank(kernels, 3, "depthwise_conv2d_tokens", "kernels");
  const std::size_t c = x.cols(), r = kernels.dim(1);
  require(kernels.dim(0) == c && kernels.dim(2) == r && bias.size() == c,
          "depthwise_conv2d_tokens: kernels " + dims_to_string(kernels.dims()) + " / bias " +
              dims_to_string(bias.dims()) + " do not fit " + std::to_string(c) + " channels");
  const int pad = checked_pad(r, "depthwise_conv2d_tokens");
  const int ih = static_cast<int>(h), iw = static_cast<int>(w);
  const std::vector<T> taps = kernels_by_tap(kernels);
  Tensor<T> y(x.dims());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* in = x.data() + b * h * w * c;
    T* out = y.data() + b * h * w * c;
    for (int yy = 0; yy < ih; ++yy) {
      for (int xx = 0; xx < iw; ++xx) {
        T* o = out + (static_cast<std::size_t>(yy) * w + xx) * c;
        std::copy(bias.data(), bias.data() + c, o);
        // Same per-element order as depthwise_conv2d: bias, then taps row-major.
        for (int ky = 0; ky < static_cast<int>(r); ++ky) {
          const int sy = yy + ky - pad;
          if (sy < 0 || sy >= ih) continue;
          for (int kx = 0; kx < static_cast<int>(r); ++kx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= iw) continue;
            const T* src = in + (static_cast<std::size_t>(sy) * w + sx) * c;
            const T* k = taps.data() + static_cast<std::size_t>(ky * static_cast<int>(r) + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += k[ch] * src[ch];
          }
        }
      }
    }
  }
  count_macs(counter, std::uint64_t{batch} * h * w * c * r * r);
  return y;
}

template <typename T>
Triple<T> depthwise_conv2d_tokens_backward(const Tensor<T>& x, std::size_t batch, std::size_t h,
                                           std::size_t w, const Tensor<T>& kernels,
                                           const Tensor<T>& dy) {
  check_token_grid(x, batch, h, w, "depthwise_conv2d_tokens_backward");
  require_same(x, dy, "depthwise_conv2d_tokens_backward");
  const std::size_t c = x.cols(), r = kernels.dim(1);
  const int pad = checked_pad(r, "depthwise_conv2d_tokens_backward");
  const int ih = static_cast<int>(h), iw = static_cast<int>(w);
  const std::vector<T> taps = kernels_by_tap(kernels);
  std::vector<T> dtaps(taps.size(), T(0));
  Tensor<T> dx(x.dims());
  Tensor<T> db({c});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* in = x.data() + b * h * w * c;
    const T* g = dy.data() + b * h * w * c;
    T* gin = dx.data() + b * h * w * c;
    for (int yy = 0; yy < ih; ++yy) {
      for (int xx = 0; xx < iw; ++xx) {
        const T* go = g + (static_cast<std::size_t>(yy) * w + xx) * c;
        for (std::size_t ch = 0; ch < c; ++ch) db[ch] += go[ch];
        for (int ky = 0; ky < static_cast<int>(r); ++ky) {
          const int sy = yy + ky - pad;
          if (sy < 0 || sy >= ih) continue;
          for (int kx = 0; kx < static_cast<int>(r); ++kx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= iw) continue;
            const std::size_t off = (static_cast<std::size_t>(sy) * w + sx) * c;
            const std::size_t t = static_cast<std::size_t>(ky * static_cast<int>(r) + kx) * c;
            const T* k = taps.data() + t;
            T* dk = dtaps.data() + t;
            for (std::size_t ch = 0; ch < c; ++ch) {
              dk[ch] += go[ch] * in[off + ch];
              gin[off + ch] += k[ch] * go[ch];
            }
          }
        }
      }
    }
  }
  Tensor<T> dkernels(kernels.dims());
  const std::size_t ntaps = r * r;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t t = 0; t < ntaps; ++t) dkernels[ch * ntaps + t] = dtaps[t * c + ch];
  }
  return {std::move(dx), std::move(dkernels), std::move(db)};
}

namespace {

// cols[(ci, ky, kx), (y, x)] = x[ci, y + ky - pad, x + kx - pad] (zero outside)
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t r) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int pad = static_cast<int>(r / 2);
  Tensor<T> cols({c * r * r, h * w});
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < r; ++ky) {
      for (std::size_t kx = 0; kx < r; ++kx) {
        T* row = &cols((ci * r + ky) * r + kx, 0);
        for (std::size_t yy = 0; yy < h; ++yy) {
          const int sy = static_cast<int>(yy + ky) - pad;
          if (sy < 0 || sy >= static_cast<int>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const int sx = static_cast<int>(xx + kx) - pad;
            if (sx < 0 || sx >= static_cast<int>(w)) continue;
            row[yy * w + xx] = x(ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Dims& xdims, std::size_t r) {
  const std::size_t c = xdims[0], h = xdims[1], w = xdims[2];
  const int pad = static_cast<int>(r / 2);
  Tensor<T> x(xdims);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < r; ++ky) {
      for (std::size_t kx = 0; kx < r; ++kx) {
        const T* row = &cols((ci * r + ky) * r + kx, 0);
        for (std::size_t yy = 0; yy < h; ++yy) {
          const int sy = static_cast<int>(yy + ky) - pad;
          if (sy < 0 || sy >= static_cast<int>(h)) continue;
          for (std::size_t xx = 0; xx < w; ++xx) {
            const int sx = static_cast<int>(xx + kx) - pad;
            if (sx < 0 || sx >= static_cast<int>(w)) continue;
            x(ci, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx)) += row[yy * w + xx];
          }
        }
      }
    }
  }
  return x;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 MacCounter* counter) {
  require_rank(x, 3, "conv2d", "x");
  require_rank(weight, 4, "conv2d", "weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), r = weight.dim(2);
  require(weight.dim(1) == cin && weight.dim(3) == r && bias.size() == cout,
          "conv2d: weight " + dims_to_string(weight.dims()) + " / bias " +
              dims_to_string(bias.dims()) + " do not fit input " + dims_to_string(x.dims()));
  checked_pad(r, "conv2d");
  const Tensor<T> cols = im2col(x, r);
  Tensor<T> y({cout, h, w});
  for (std::size_t co = 0; co < cout; ++co) {
    std::fill(y.data() + co * h * w, y.data() + (co + 1) * h * w, bias[co]);
  }
  gemm(Trans::no, Trans::no, cout, h * w, cin * r * r, weight.data(), cols.data(), y.data(),
       true);
  count_macs(counter, std::uint64_t{cout} * cin * r * r * h * w);
  return y;
}

template <typename T>
Triple<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), r = weight.dim(2);
  require(dy.rank() == 3 && dy.dim(0) == cout && dy.dim(1) == h && dy.dim(2) == w,
          "conv2d_backward: upstream dims " + dims_to_string(dy.dims()) + " do not match");
  const Tensor<T> cols = im2col(x, r);
  Tensor<T> dw(weight.dims());
  gemm(Trans::no, Trans::yes, cout, cin * r * r, h * w, dy.data(), cols.data(), dw.data(), false);
  Tensor<T> dcols({cin * r * r, h * w});
  gemm(Trans::yes, Trans::no, cin * r * r, h * w, cout, weight.data(), dy.data(), dcols.data(),
       false);
  Tensor<T> db({cout});
  for (std::size_t co = 0; co < cout; ++co) {
    T acc = 0;
    for (std::size_t i = 0; i < h * w; ++i) acc += dy[co * h * w + i];
    db[co] = acc;
  }
  return {col2im(dcols, x.dims(), r), std::move(dw), std::move(db)};
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return map_binary(a, b, "add", [](T u, T v) { return u + v; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return map_binary(a, b, "sub", [](T u, T v) { return u - v; });
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return map_binary(a, b, "hadamard", [](T u, T v) { return u * v; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return map_unary(a, [s](T v) { return v * s; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return map_unary(x, [](T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank(x, 2, "transpose", "x");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> y({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) y(j, i) = x(i, j);
  }
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Dims& dims) {
  return x.reshaped(dims);
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_rows: no operands");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require(p.rank() == 2 && p.cols() == cols,
            "concat_rows: operand " + dims_to_string(p.dims()) + " does not have " +
                std::to_string(cols) + " columns");
    rows += p.rows();
  }
  Tensor<T> out({rows, cols});
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_rows", "x");
  require(begin <= end && end <= x.rows(),
          "slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") outside " + dims_to_string(x.dims()));
  const std::size_t cols = x.cols();
  return Tensor<T>({end - begin, cols},
                   std::span<const T>(x.data() + begin * cols, (end - begin) * cols));
}

template <typename T>
T mean_all(const Tensor<T>& x) {
  require(!x.empty(), "mean_all: empty tensor");
  T sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += x[i];
  return sum / T(x.size());
}

template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 2, "add_row_broadcast", "x");
  require(bias.size() == x.cols(), "add_row_broadcast: bias " + dims_to_string(bias.dims()) +
                                       " vs x " + dims_to_string(x.dims()));
  Tensor<T> y = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) += bias[j];
  }
  return y;
}

template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x) {
  require_rank(x, 2, "sum_rows", "x");
  Tensor<T> out({x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
  }
  return out;
}

template <typename T>
Pair<T> hadamard_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy) {
  return {hadamard(dy, b), hadamard(dy, a)};
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  return map_binary(y, dy, "sigmoid_backward", [](T s, T g) { return g * s * (T(1) - s); });
}

template <typename T>
std::vector<Tensor<T>> concat_rows_backward(const std::vector<std::size_t>& row_counts,
                                            const Tensor<T>& dy) {
  std::vector<Tensor<T>> out;
  std::size_t begin = 0;
  for (std::size_t rows : row_counts) {
    out.push_back(slice_rows(dy, begin, begin + rows));
    begin += rows;
  }
  require(begin == dy.rows(), "concat_rows_backward: row counts do not cover upstream");
  return out;
}

template <typename T>
Tensor<T> slice_rows_backward(const Dims& source_dims, std::size_t begin, const Tensor<T>& dy) {
  Tensor<T> dx(source_dims);
  require(dx.rank() == 2 && dy.rank() == 2 && dy.cols() == dx.cols() &&
              begin + dy.rows() <= dx.rows(),
          "slice_rows_backward: upstream " + dims_to_string(dy.dims()) + " does not fit " +
              dims_to_string(source_dims));
  std::copy(dy.data(), dy.data() + dy.size(), dx.data() + begin * dx.cols());
  return dx;
}

template <typename T>
Tensor<T> mean_all_backward(const Dims& dims, T dy) {
  const std::size_t n = dims_product(dims);
  return Tensor<T>(dims, dy / T(n));
}

template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "accumulate");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

#define SKIPAT_INSTANTIATE_OPS(T)                                                              \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, const T*,         \
                        const T*, T*, bool);                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, MacCounter*);                  \
  template Pair<T> matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                            MacCounter*);                                                      \
  template Tensor<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                     Tensor<T>&, Tensor<T>&);                                  \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                           \
  template Tensor<T> softmax_rows_backward(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Triple<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         double);                                              \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                      MacCounter*);                                            \
  template Triple<T> depthwise_conv2d_backward(const Tensor<T>&, const Tensor<T>&,             \
                                               const Tensor<T>&);                              \
  template Tensor<T> depthwise_conv2d_tokens(const Tensor<T>&, std::size_t, std::size_t,      \
                                             std::size_t, const Tensor<T>&, const Tensor<T>&,  \
                                             MacCounter*);                                     \
  template Triple<T> depthwise_conv2d_tokens_backward(const Tensor<T>&, std::size_t,          \
                                                      std::size_t, std::size_t,                \
                                                      const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, MacCounter*); \
  template Triple<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> transpose(const Tensor<T>&);                                              \
  template Tensor<T> reshape(const Tensor<T>&, const Dims&);                                   \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                               \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                   \
  template T mean_all(const Tensor<T>&);                                                       \
  template Tensor<T> add_row_broadcast(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> sum_rows(const Tensor<T>&);                                               \
  template Pair<T> hadamard_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);                     \
  template std::vector<Tensor<T>> concat_rows_backward(const std::vector<std::size_t>&,        \
                                                       const Tensor<T>&);                      \
  template Tensor<T> slice_rows_backward(const Dims&, std::size_t, const Tensor<T>&);          \
  template Tensor<T> mean_all_backward(const Dims&, T);                                        \
  template void accumulate(Tensor<T>&, const Tensor<T>&);

SKIPAT_INSTANTIATE_OPS(float)
SKIPAT_INSTANTIATE_OPS(double)

}  // namespace skipat::ops
