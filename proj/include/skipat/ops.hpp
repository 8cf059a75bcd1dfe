#pragma once

// Forward primitives and their vector-Jacobian products. Every function is
// out-of-place and defined for float and double. Backward functions take the
// forward inputs (or outputs, where cheaper) plus the upstream gradient.

#include <cstddef>
#include <vector>

#include "skipat/mac_counter.hpp"
#include "skipat/tensor.hpp"

namespace skipat::ops {

inline constexpr double kLayerNormEps = 1e-6;

enum class Trans { no, yes };

/// c (+)= op(a) * op(b) on raw row-major buffers; op(a) is m x k, op(b) is k x n.
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

template <typename T>
struct Pair {
  Tensor<T> first;
  Tensor<T> second;
};

template <typename T>
struct Triple {
  Tensor<T> first;
  Tensor<T> second;
  Tensor<T> third;
};

// -- matrix products --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, MacCounter* counter = nullptr);
/// {dA, dB} = {dC Bᵀ, Aᵀ dC}
template <typename T>
Pair<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dc);

/// x[m×in] · w[in×out] + bias[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 MacCounter* counter = nullptr);
/// Returns dx and accumulates into dw / dbias.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                          Tensor<T>& dw, Tensor<T>& dbias);

// -- row-wise nonlinearities --------------------------------------------------

/// Softmax along the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);
/// dx = y ⊙ (dy − ⟨dy, y⟩_row), from the forward output y.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& dy);

/// 0.5·x·(1 + erf(x/√2))
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy);

/// Normalizes over the last axis then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kLayerNormEps);
/// {dx, dgamma, dbeta}
template <typename T>
Triple<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy,
                              double eps = kLayerNormEps);

// -- convolutions -------------------------------------------------------------

/// Per-channel 2D correlation, stride 1, zero padding (r-1)/2, r odd.
/// x: c×h×w, kernels: c×r×r, bias: c.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias,
                           MacCounter* counter = nullptr);
/// {dx, dkernels, dbias}
template <typename T>
Triple<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernels,
                                    const Tensor<T>& dy);

/// Depthwise correlation on `batch` token-major grids: x is (batch·h·w)×c with
/// row y·w + x of each grid holding one pixel's channels. Per element it
/// accumulates in the same order as depthwise_conv2d on the transposed layout.
template <typename T>
Tensor<T> depthwise_conv2d_tokens(const Tensor<T>& x, std::size_t batch, std::size_t h,
                                  std::size_t w, const Tensor<T>& kernels, const Tensor<T>& bias,
                                  MacCounter* counter = nullptr);
template <typename T>
Triple<T> depthwise_conv2d_tokens_backward(const Tensor<T>& x, std::size_t batch, std::size_t h,
                                           std::size_t w, const Tensor<T>& kernels,
                                           const Tensor<T>& dy);

/// Dense 2D correlation, same padding. x: cin×h×w, weight: cout×cin×r×r, bias: cout.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 MacCounter* counter = nullptr);
template <typename T>
Triple<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy);

// -- elementwise and structural ----------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Rank-2 transpose.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Dims& dims);
/// Stacks rank-2 tensors with equal column counts.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
/// Rows [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end);
template <typename T>
T mean_all(const Tensor<T>& x);
/// x[m×n] + bias[n] on every row.
template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& x, const Tensor<T>& bias);
/// Column sums of a rank-2 tensor.
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& x);

/// {da, db} for a ⊙ b.
template <typename T>
Pair<T> hadamard_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dy);
/// From the forward output y.
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& dy);
/// Splits dy back into the row extents of the concatenated parts.
template <typename T>
std::vector<Tensor<T>> concat_rows_backward(const std::vector<std::size_t>& row_counts,
                                            const Tensor<T>& dy);
/// Scatters dy into a zero tensor shaped like the sliced source.
template <typename T>
Tensor<T> slice_rows_backward(const Dims& source_dims, std::size_t begin, const Tensor<T>& dy);
template <typename T>
Tensor<T> mean_all_backward(const Dims& dims, T dy);

/// a += b, in place (gradient accumulation).
template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b);

}  // namespace skipat::ops
