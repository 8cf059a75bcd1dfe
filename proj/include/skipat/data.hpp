#pragma once

// CIFAR-10 binary ingestion, synthetic inputs and SKAT checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "skipat/binary_io.hpp"
#include "skipat/config.hpp"
#include "skipat/params.hpp"
#include "skipat/rng.hpp"

namespace skipat {

enum class Split { train, test };

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarChannels = 3;
inline constexpr std::size_t kCifarPixels = kCifarSide * kCifarSide * kCifarChannels;
inline constexpr std::size_t kCifarRecord = kCifarPixels + 1;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr std::array<double, 3> kCifarMean{0.4914, 0.4822, 0.4465};
inline constexpr std::array<double, 3> kCifarStd{0.2470, 0.2435, 0.2616};

/// Decoded images kept as raw bytes, planar (R plane, G plane, B plane), row-major.
struct ImageDataset {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;
  std::filesystem::path source;

  std::size_t size() const { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * kCifarPixels, kCifarPixels};
  }
};

/// Reads one CIFAR-10 batch file of exactly `records` records.
ImageDataset read_cifar_file(const std::filesystem::path& path,
                             std::size_t records = kCifarRecordsPerFile);
/// data_batch_1..5.bin for train, test_batch.bin for test.
ImageDataset load_cifar10(const std::filesystem::path& dir, Split split);

/// Directory named by SKAT_CIFAR10_DIR if it holds the six batch files.
std::optional<std::filesystem::path> find_cifar10();
bool has_cifar10_files(const std::filesystem::path& dir);

/// Writes a class-conditioned synthetic stand-in in the CIFAR-10 binary layout
/// (same file names and sizes) plus a STAND_IN marker file.
void write_cifar_standin(const std::filesystem::path& dir, std::uint64_t seed);
bool is_standin(const std::filesystem::path& dir);

inline double decode_pixel(std::uint8_t v) { return v / 255.0; }

template <typename T>
struct LabeledBatch {
  Tensor<T> images;  // b×3×32×32, normalized
  std::vector<std::size_t> labels;
};

struct AugmentOptions {
  bool flip = false;
  bool crop = false;  // random crop after 4-pixel zero padding
};

/// Gathers `indices` into a normalized batch; augmentation draws from `rng`.
template <typename T>
LabeledBatch<T> make_batch(const ImageDataset& data, std::span<const std::size_t> indices,
                           const AugmentOptions& augment = {}, Rng* rng = nullptr);

/// Uniform [0,1) pixels and uniform labels, shaped for `config`.
template <typename T>
LabeledBatch<T> synthetic_batch(Rng& rng, std::size_t batch, const ModelConfig& config);

// -- checkpoints --------------------------------------------------------------

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<std::string> names;
  std::vector<Tensor<T>> m, v;
};

struct Checkpoint {
  ModelConfig config;
  ParameterStore<float> params;
  std::optional<OptimizerState<float>> optimizer;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config,
                                            const ParameterStore<float>& params,
                                            const OptimizerState<float>* optimizer = nullptr);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                     const ParameterStore<float>& params,
                     const OptimizerState<float>* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters of a checkpoint re-bound to `target`, which may differ from the
/// embedded config (e.g. skipping layers of a vanilla model at inference).
ParameterStore<float> load_parameters_for(const std::filesystem::path& path,
                                          const ModelConfig& target);

}  // namespace skipat
