#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "skipat/data.hpp"
#include "skipat/train.hpp"
#include "test_util.hpp"

using namespace skipat;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("skipat_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> records(std::size_t count) {
  std::vector<std::uint8_t> out;
  for (std::size_t r = 0; r < count; ++r) {
    out.push_back(static_cast<std::uint8_t>(r % 10));
    for (std::size_t i = 0; i < kCifarPixels; ++i) out.push_back(static_cast<std::uint8_t>((i + 7 * r) % 256));
  }
  return out;
}

// Class k tints each channel by a class-dependent level over noise.
ImageDataset toy_dataset(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  ImageDataset d;
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = static_cast<std::uint8_t>(i % 10);
    d.labels.push_back(label);
    for (std::size_t c = 0; c < 3; ++c) {
      const double level = 20.0 * ((label * (c + 3)) % 10);
      for (std::size_t i = 0; i < 1024; ++i)
        d.pixels.push_back(static_cast<std::uint8_t>(level + 50 * rng.uniform()));
    }
  }
  return d;
}

ModelConfig small_cifar_model(std::vector<std::size_t> skip = {}) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.depth = 3;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  c.num_classes = 10;
  if (!skip.empty()) {
    c.skip_layers = std::move(skip);
    c.phi_kind = PhiKind::skipat;
    c.dwc_kernel = 3;
  }
  return c;
}

}  // namespace

// -- CIFAR binary -------------------------------------------------------------------------------

TEST(Cifar, RecordLayout) {
  EXPECT_EQ(kCifarRecord, 3073u);
  const auto dir = scratch_dir("cifar");
  write_bytes(dir / "three.bin", records(3));
  const auto d = read_cifar_file(dir / "three.bin", 3);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d.labels, (std::vector<std::uint8_t>{0, 1, 2}));
  EXPECT_EQ(d.image(2)[0], 14);
  EXPECT_EQ(d.image(1)[1024], (1024 + 7) % 256);
}

TEST(Cifar, TruncatedAndBadLabelsAreRejected) {
  const auto dir = scratch_dir("cifar_bad");
  auto bytes = records(3);
  bytes.pop_back();
  write_bytes(dir / "short.bin", bytes);
  EXPECT_THROW(read_cifar_file(dir / "short.bin", 3), FormatError);
  bytes = records(2);
  bytes[kCifarRecord] = 10;
  write_bytes(dir / "label.bin", bytes);
  EXPECT_THROW(read_cifar_file(dir / "label.bin", 2), FormatError);
  EXPECT_THROW(read_cifar_file(dir / "missing.bin", 2), IoError);
}

TEST(Cifar, PixelDecodingAndNormalization) {
  EXPECT_EQ(decode_pixel(0), 0.0);
  EXPECT_EQ(decode_pixel(255), 1.0);
  EXPECT_EQ(decode_pixel(51), 0.2);
  const auto d = toy_dataset(4, 1);
  const std::vector<std::size_t> idx{3, 1};
  const auto b = make_batch<double>(d, idx);
  ASSERT_EQ(b.images.dims(), (Dims{2, 3, 32, 32}));
  EXPECT_EQ(b.labels, (std::vector<std::size_t>{3, 1}));
  for (std::size_t c = 0; c < 3; ++c) {
    const std::size_t at = c * 1024 + 5 * 32 + 9;
    EXPECT_NEAR(b.images[c * 1024 + 5 * 32 + 9],
                (d.image(3)[at] / 255.0 - kCifarMean[c]) / kCifarStd[c], 1e-12);
  }
}

TEST(Cifar, FlipAugmentationMirrorsRows) {
  const auto d = toy_dataset(1, 2);
  const std::vector<std::size_t> idx{0};
  const auto plain = make_batch<double>(d, idx);
  Rng rng(3);
  bool saw_flip = false;
  for (int trial = 0; trial < 8; ++trial) {
    const auto aug = make_batch<double>(d, idx, AugmentOptions{true, false}, &rng);
    const bool same = aug.images[0] == plain.images[0] && aug.images[31] == plain.images[31];
    if (!same) {
      saw_flip = true;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 32; ++y)
          for (std::size_t x = 0; x < 32; ++x)
            ASSERT_EQ(aug.images[(c * 32 + y) * 32 + x], plain.images[(c * 32 + y) * 32 + 31 - x]);
    }
  }
  EXPECT_TRUE(saw_flip);
  EXPECT_THROW(make_batch<double>(d, idx, AugmentOptions{true, false}), std::invalid_argument);
}

TEST(Synthetic, SameSeedSameBatch) {
  const ModelConfig c = testutil::toy_config();
  Rng a(9), b(9);
  const auto x = synthetic_batch<float>(a, 3, c), y = synthetic_batch<float>(b, 3, c);
  EXPECT_EQ(x.images.dims(), (Dims{3, 3, 8, 8}));
  EXPECT_TRUE(std::equal(x.images.values().begin(), x.images.values().end(), y.images.values().begin()));
  EXPECT_EQ(x.labels, y.labels);
}

// -- checkpoints --------------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const ModelConfig c = small_cifar_model({2});
  Rng rng(4);
  const auto p = init_parameters<float>(c, rng);
  auto opt = make_optimizer_state(p);
  opt.step = 17;
  opt.m[0][0] = 0.25f;
  const auto bytes = encode_checkpoint(c, p, &opt);
  const auto back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config, c);
  ASSERT_TRUE(back.optimizer.has_value());
  EXPECT_EQ(back.optimizer->step, 17u);
  EXPECT_EQ(encode_checkpoint(back.config, back.params, &*back.optimizer), bytes);
  EXPECT_EQ(encode_checkpoint(c, p), encode_checkpoint(decode_checkpoint(encode_checkpoint(c, p)).config,
                                                       decode_checkpoint(encode_checkpoint(c, p)).params));

  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir / "m.skat", c, p, &opt);
  const auto loaded = load_checkpoint(dir / "m.skat");
  for (const auto& e : p.entries()) {
    const auto& v = loaded.params.value(e.name);
    ASSERT_TRUE(std::equal(v.values().begin(), v.values().end(), e.param.value.values().begin()));
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  const ModelConfig c = small_cifar_model();
  Rng rng(5);
  const auto p = init_parameters<float>(c, rng);
  auto bytes = encode_checkpoint(c, p);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), ChecksumError);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(6)), FormatError);
  EXPECT_THROW(load_checkpoint(scratch_dir("none") / "absent.skat"), IoError);
}

TEST(Checkpoint, VanillaWeightsRebindToParameterFreeSkips) {
  const ModelConfig c = small_cifar_model();
  Rng rng(6);
  const auto dir = scratch_dir("rebind");
  save_checkpoint(dir / "v.skat", c, init_parameters<float>(c, rng));
  ModelConfig skip = c;
  skip.skip_layers = {2, 3};
  skip.phi_kind = PhiKind::identity;
  EXPECT_EQ(load_parameters_for(dir / "v.skat", skip).element_count(), parameter_census(skip));
  skip.phi_kind = PhiKind::skipat;
  EXPECT_THROW(load_parameters_for(dir / "v.skat", skip), MissingTensorError);
}

// -- loss and optimizer -----------------------------------------------------------------------------

TEST(CrossEntropy, HandValues) {
  const auto logits = testutil::tensor({2, 3}, {1., 2., 3., 0., 0., 0.});
  const std::vector<std::size_t> labels{2, 0};
  const auto r = cross_entropy(logits, labels);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const double want = (-(3.0 - std::log(z)) + std::log(3.0)) / 2;
  EXPECT_NEAR(r.loss, want, 1e-14);
  EXPECT_NEAR(r.grad(0, 0), std::exp(1.0) / z / 2, 1e-15);
  EXPECT_NEAR(r.grad(0, 2), (std::exp(3.0) / z - 1) / 2, 1e-15);
  EXPECT_NEAR(r.grad(1, 0), (1.0 / 3 - 1) / 2, 1e-15);
  EXPECT_EQ(r.correct, 2u);  // argmax ties resolve to the first class

  const Tensor<double> flat({4, 10});
  const std::vector<std::size_t> any{0, 3, 9, 5};
  EXPECT_NEAR(cross_entropy(flat, any).loss, std::log(10.0), 1e-14);
}

TEST(AdamW, TwoStepsMatchHandOracle) {
  ParameterStore<double> p;
  p.add("w", testutil::tensor({2}, {0.5, -1.0}), ParamRole::weight);
  p.add("b", testutil::tensor({1}, {0.3}), ParamRole::bias);
  auto state = make_optimizer_state(p);
  const AdamWHyper h{0.1, 0.05, 0.9, 0.999, 1e-8};
  const std::vector<std::vector<double>> grads{{0.2, -0.4, 1.0}, {-0.1, 0.3, 0.5}};

  std::vector<double> w{0.5, -1.0, 0.3}, m(3, 0.0), v(3, 0.0);
  for (std::size_t t = 1; t <= 2; ++t) {
    const auto& g = grads[t - 1];
    p.grad("w")[0] = g[0];
    p.grad("w")[1] = g[1];
    p.grad("b")[0] = g[2];
    adamw_step(p, state, h);
    for (std::size_t i = 0; i < 3; ++i) {
      m[i] = h.beta1 * m[i] + (1 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1 - h.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(h.beta1, t)), vh = v[i] / (1 - std::pow(h.beta2, t));
      const double decay = i < 2 ? h.lr * h.weight_decay * w[i] : 0.0;
      w[i] -= h.lr * mh / (std::sqrt(vh) + h.eps) + decay;
    }
  }
  EXPECT_EQ(state.step, 2u);
  EXPECT_NEAR(p.value("w")[0], w[0], 1e-14);
  EXPECT_NEAR(p.value("w")[1], w[1], 1e-14);
  EXPECT_NEAR(p.value("b")[0], w[2], 1e-14);
}

// -- training loop -----------------------------------------------------------------------------------

TEST(Train, SameSeedReplaysBitExactly) {
  const auto train_set = toy_dataset(60, 7), test_set = toy_dataset(20, 8);
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 16;
  t.seed = 11;
  t.optim.lr = 1e-3;
  t.augment = {true, true};
  const auto a = train_loop(small_cifar_model({3}), t, train_set, test_set);
  const auto b = train_loop(small_cifar_model({3}), t, train_set, test_set);
  ASSERT_EQ(a.log.epochs.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.log.epochs[e].loss, b.log.epochs[e].loss);
    EXPECT_EQ(a.log.epochs[e].accuracy, b.log.epochs[e].accuracy);
  }
  for (const auto& e : a.params.entries()) {
    const auto& other = b.params.value(e.name);
    ASSERT_TRUE(std::equal(other.values().begin(), other.values().end(), e.param.value.values().begin()))
        << e.name;
  }
  EXPECT_EQ(a.optimizer.step, 8u);  // ceil(60 / 16) per epoch
}

TEST(Train, LossFallsOnSeparableData) {
  const auto train_set = toy_dataset(400, 9), test_set = toy_dataset(50, 10);
  TrainConfig t;
  t.epochs = 6;
  t.batch_size = 20;
  t.seed = 3;
  t.optim.lr = 3e-3;
  const auto r = train_loop(small_cifar_model(), t, train_set, test_set);
  EXPECT_LT(r.log.epochs.back().loss, r.log.initial_loss);
  EXPECT_GT(r.log.epochs.back().accuracy, 0.5);
  const auto ev = evaluate(small_cifar_model(), r.params, test_set);
  EXPECT_EQ(ev.count, 50u);
  EXPECT_EQ(ev.accuracy, r.log.epochs.back().accuracy);
  const auto csv = train_log_csv(r.log);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);  // header, epoch 0, six epochs
}

TEST(Train, RejectsBadSettings) {
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}
