#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "skipat/ops.hpp"
#include "skipat/rng.hpp"
#include "skipat/tensor_io.hpp"
#include "test_util.hpp"

using namespace skipat;
using testutil::tensor;
using testutil::uniform;

TEST(Matmul, HandExample) {
  const auto c = ops::matmul(tensor({2, 2}, {1., 2., 3., 4.}), tensor({2, 2}, {5., 6., 7., 8.}));
  EXPECT_EQ(oracle::vec(c), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityAndZero) {
  Rng rng(1);
  const auto b = uniform(rng, {2, 3});
  EXPECT_EQ(oracle::vec(ops::matmul(tensor({2, 2}, {1., 0., 0., 1.}), b)), oracle::vec(b));
  const auto z = ops::matmul(b, Tensor<double>({3, 4}));
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_EQ(z[i], 0.0);
}

TEST(Matmul, MatchesTripleLoopAcrossShapes) {
  Rng rng(2);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {3, 7, 5}, {17, 33, 9}, {64, 48, 80}}) {
    const auto a = uniform(rng, {m, k}), b = uniform(rng, {k, n});
    const auto want = oracle::matmul(oracle::to_mat(a), oracle::to_mat(b));
    const auto got = ops::matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(got(i, j), want[i][j], 1e-12);
  }
}

TEST(Matmul, ShapeErrorNamesOperands) {
  try {
    ops::matmul(Tensor<double>({2, 3}), Tensor<double>({4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, CountsMacs) {
  MacCounter counter;
  counter.enter("x", BlockKind::mlp);
  ops::matmul(Tensor<float>({3, 4}), Tensor<float>({4, 5}), &counter);
  EXPECT_EQ(counter.total(), 60u);
}

TEST(Matmul, BackwardMatchesTransposedProducts) {
  Rng rng(3);
  const auto a = uniform(rng, {4, 3}), b = uniform(rng, {3, 5}), dc = uniform(rng, {4, 5});
  const auto g = ops::matmul_backward(a, b, dc);
  const auto da = oracle::matmul(oracle::to_mat(dc), oracle::to_mat(ops::transpose(b)));
  const auto db = oracle::matmul(oracle::to_mat(ops::transpose(a)), oracle::to_mat(dc));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.first(i, j), da[i][j], 1e-12);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(g.second(i, j), db[i][j], 1e-12);
}

TEST(Softmax, Examples) {
  const auto y = ops::softmax_rows(tensor({3, 2}, {0., 0., 1000., 1000., 0., std::log(3.0)}));
  EXPECT_DOUBLE_EQ(y(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y(1, 1), 0.5);
  EXPECT_NEAR(y(2, 0), 0.25, 1e-15);
  EXPECT_NEAR(y(2, 1), 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = uniform<float>(rng, {5, 11}, 30.0);
    auto shifted = x;
    for (std::size_t j = 0; j < 11; ++j) shifted(2, j) += 17.5f;
    const auto y = ops::softmax_rows(x), ys = ops::softmax_rows(shifted);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 11; ++j) {
        EXPECT_GE(y(i, j), 0.0f);
        s += y(i, j);
        EXPECT_NEAR(y(i, j), ys(i, j), 1e-6);
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, BackwardContract) {
  Rng rng(5);
  const auto x = uniform(rng, {3, 4}), dy = uniform(rng, {3, 4});
  const auto y = ops::softmax_rows(x);
  const auto dx = ops::softmax_rows_backward(y, dy);
  for (std::size_t i = 0; i < 3; ++i) {
    double dot = 0;
    for (std::size_t j = 0; j < 4; ++j) dot += dy(i, j) * y(i, j);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(dx(i, j), y(i, j) * (dy(i, j) - dot), 1e-14);
  }
}

TEST(Gelu, Values) {
  const auto y = ops::gelu(tensor({4}, {0., 10., 1., -1.}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 10.0, 1e-6);
  EXPECT_NEAR(y[2], 0.8413447460685429, 1e-12);
  EXPECT_NEAR(y[3], -0.15865525393145707, 1e-12);
}

TEST(Gelu, FloatAgreesWithErfOracle) {
  Rng rng(6);
  const auto x = uniform<float>(rng, {1000}, 6.0);
  const auto y = ops::gelu(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], oracle::gelu(x[i]), 2e-6);
}

TEST(Gelu, BackwardMatchesDerivative) {
  Rng rng(7);
  const auto x = uniform(rng, {50}, 4.0);
  const auto ones = Tensor<double>({50}, 1.0);
  const auto g = ops::gelu_backward(x, ones);
  for (std::size_t i = 0; i < 50; ++i) {
    const double h = 1e-6;
    EXPECT_NEAR(g[i], (oracle::gelu(x[i] + h) - oracle::gelu(x[i] - h)) / (2 * h), 1e-8);
  }
}

TEST(LayerNorm, Examples) {
  const Tensor<double> one({2}, 1.0), zero({2});
  const auto y = ops::layer_norm(tensor({2, 2}, {5., 5., 1., 3.}), one, zero, 1e-12);
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_EQ(y(0, 1), 0.0);
  EXPECT_NEAR(y(1, 0), -1.0, 1e-9);
  EXPECT_NEAR(y(1, 1), 1.0, 1e-9);
}

TEST(LayerNorm, MatchesTwoPassOracle) {
  Rng rng(8);
  const auto x = uniform(rng, {6, 9}, 3.0), g = uniform(rng, {9}), b = uniform(rng, {9});
  const auto want = oracle::layer_norm(oracle::to_mat(x), g, b);
  const auto got = ops::layer_norm(x, g, b);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 9; ++j) EXPECT_NEAR(got(i, j), want[i][j], 1e-12);
}

TEST(DepthwiseConv, DiracKernelIsIdentity) {
  Rng rng(9);
  const auto x = uniform(rng, {3, 5, 5});
  Tensor<double> k({3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k[c * 9 + 4] = 1.0;
  const auto y = ops::depthwise_conv2d(x, k, Tensor<double>({3}));
  EXPECT_EQ(oracle::vec(y), oracle::vec(x));
}

TEST(DepthwiseConv, AllOnesOnConstantInput) {
  const Tensor<double> x({1, 5, 5}, 2.5), k({1, 3, 3}, 1.0);
  const auto y = ops::depthwise_conv2d(x, k, Tensor<double>({1}));
  EXPECT_DOUBLE_EQ(y[2 * 5 + 2], 9 * 2.5);
  EXPECT_DOUBLE_EQ(y[0], 4 * 2.5);  // corner sees a 2×2 window
}

TEST(DepthwiseConv, RandomMatchesNestedLoops) {
  Rng rng(10);
  const auto x = uniform(rng, {1, 5, 5}), k = uniform(rng, {1, 3, 3}), b = uniform(rng, {1});
  // the oracle works on token rows: token = y·side + x, one column per channel
  oracle::Mat tokens = oracle::zeros(25, 1);
  for (std::size_t i = 0; i < 25; ++i) tokens[i][0] = x[i];
  const auto want = oracle::depthwise(tokens, 5, k, b);
  const auto got = ops::depthwise_conv2d(x, k, b);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_NEAR(got[i], want[i][0], 1e-14);
}

TEST(DepthwiseConv, TokenMajorAgreesWithPlanar) {
  Rng rng(11);
  const std::size_t batch = 2, c = 6, side = 4, r = 5;
  const auto tokens = uniform(rng, {batch * side * side, c});
  const auto k = uniform(rng, {c, r, r}), b = uniform(rng, {c});
  const auto y = ops::depthwise_conv2d_tokens(tokens, batch, side, side, k, b);
  for (std::size_t s = 0; s < batch; ++s) {
    oracle::Mat rows(tokens.rows() / batch);
    for (std::size_t t = 0; t < rows.size(); ++t) {
      rows[t].assign(&tokens(s * side * side + t, 0), &tokens(s * side * side + t, 0) + c);
    }
    const auto want = oracle::depthwise(rows, side, k, b);
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_NEAR(y(s * side * side + t, ch), want[t][ch], 1e-13);
  }
}

TEST(Conv2d, RandomMatchesNestedLoops) {
  Rng rng(12);
  const auto x = uniform(rng, {3, 4, 4}), w = uniform(rng, {2, 3, 3, 3}), b = uniform(rng, {2});
  oracle::Mat tokens = oracle::zeros(16, 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i) tokens[i][c] = x[c * 16 + i];
  const auto want = oracle::conv(tokens, 4, w, b);
  MacCounter counter;
  const auto got = ops::conv2d(x, w, b, &counter);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(got[o * 16 + i], want[i][o], 1e-13);
  EXPECT_EQ(counter.total(), 2u * 3 * 9 * 16);
}

TEST(Elementwise, SigmoidAndReshape) {
  EXPECT_EQ(ops::sigmoid(tensor({1}, {0.}))[0], 0.5);
  Rng rng(13);
  const auto x = uniform(rng, {2, 3, 4});
  const auto back = ops::reshape(ops::reshape(x, {6, 4}), {2, 3, 4});
  EXPECT_EQ(back.dims(), x.dims());
  EXPECT_EQ(oracle::vec(back), oracle::vec(x));
  EXPECT_THROW(ops::reshape(x, {5, 5}), ShapeError);
}

TEST(TensorInvariant, DataLengthMatchesDims) {
  EXPECT_THROW(Tensor<double>({2, 2}, std::span<const double>(std::vector<double>(3).data(), 3)),
               ShapeError);
  EXPECT_TRUE(Tensor<double>().empty());
}

TEST(Rng, SeedReplayAndStdZero) {
  Rng a(42), b(42);
  const auto x = rand_normal<double>(a, {4}, 0.0, 1.0), y = rand_normal<double>(b, {4}, 0.0, 1.0);
  EXPECT_EQ(oracle::vec(x), oracle::vec(y));
  Rng c(1);
  const auto z = rand_normal<double>(c, {8}, 3.0, 0.0);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(z[i], 3.0);
}

TEST(Rng, SampleMeanWithinThreeSigma) {
  Rng rng(99);
  const std::size_t n = 100000;
  const auto x = rand_normal<double>(rng, {n}, 1.5, 2.0);
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i] / n;
  EXPECT_LT(std::abs(mean - 1.5), 3 * 2.0 / std::sqrt(static_cast<double>(n)));
}

TEST(Rng, TruncatedNormalStaysInBounds) {
  Rng rng(5);
  const auto x = rand_trunc_normal<float>(rng, {10000}, 0.0, 0.02, -0.04, 0.04);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_GE(x[i], -0.04f);
    EXPECT_LE(x[i], 0.04f);
  }
}

TEST(TensorFile, RoundTripIsByteExact) {
  Rng rng(14);
  const auto t = uniform<float>(rng, {3, 2, 5});
  const auto dir = std::filesystem::temp_directory_path() / "skipat_test_sktn";
  std::filesystem::create_directories(dir);
  save_tensor(dir / "a.sktn", t);
  const auto back = load_tensor_as<float>(dir / "a.sktn");
  ASSERT_EQ(back.dims(), t.dims());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], t[i]);
  save_tensor(dir / "b.sktn", back);
  EXPECT_EQ(read_file_bytes(dir / "a.sktn"), read_file_bytes(dir / "b.sktn"));
  EXPECT_TRUE(std::holds_alternative<Tensor<float>>(load_tensor(dir / "a.sktn")));
}
