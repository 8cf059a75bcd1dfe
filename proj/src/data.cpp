#include "skipat/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <cstdio>

#include <zlib.h>

#include "skipat/tensor_io.hpp"

namespace skipat {

namespace fs = std::filesystem;

namespace {

const std::array<const char*, 5> kTrainFiles{"data_batch_1.bin", "data_batch_2.bin",
                                             "data_batch_3.bin", "data_batch_4.bin",
                                             "data_batch_5.bin"};
const char* const kTestFile = "test_batch.bin";
const char* const kStandinMarker = "STAND_IN";

}  // namespace

ImageDataset read_cifar_file(const fs::path& path, std::size_t records) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw IoError("cannot stat " + path.string() + ": " + ec.message());
  const std::size_t expected = records * kCifarRecord;
  if (size != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) + " bytes (" +
                      std::to_string(records) + " records of " + std::to_string(kCifarRecord) +
                      "), found " + std::to_string(size));
  }
  const auto bytes = read_file_bytes(path);
  ImageDataset out;
  out.source = path;
  out.labels.resize(records);
  out.pixels.resize(records * kCifarPixels);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] >= 10) {
      throw FormatError(path.string() + ": record " + std::to_string(r) + " has label " +
                        std::to_string(rec[0]) + " (must be < 10)");
    }
    out.labels[r] = rec[0];
    std::copy(rec + 1, rec + kCifarRecord, out.pixels.begin() + r * kCifarPixels);
  }
  return out;
}

ImageDataset load_cifar10(const fs::path& dir, Split split) {
  if (split == Split::test) {
    ImageDataset d = read_cifar_file(dir / kTestFile);
    d.source = dir;
    return d;
  }
  ImageDataset out;
  out.source = dir;
  for (const char* name : kTrainFiles) {
    ImageDataset part = read_cifar_file(dir / name);
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
    out.pixels.insert(out.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  return out;
}

bool has_cifar10_files(const fs::path& dir) {
  if (!fs::exists(dir / kTestFile)) return false;
  return std::all_of(kTrainFiles.begin(), kTrainFiles.end(),
                     [&](const char* f) { return fs::exists(dir / f); });
}

std::optional<fs::path> find_cifar10() {
  const char* env = std::getenv("SKAT_CIFAR10_DIR");
  if (env == nullptr || *env == '\0') return std::nullopt;
  const fs::path dir(env);
  if (!has_cifar10_files(dir) || is_standin(dir)) return std::nullopt;
  return dir;
}

bool is_standin(const fs::path& dir) { return fs::exists(dir / kStandinMarker); }

void write_cifar_standin(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  // Each class gets a base colour and a coarse 4×4 colour pattern; samples are
  // shifted, contrast-jittered, noisy renderings of their class pattern.
  Rng proto_rng(seed);
  std::array<std::array<double, 3>, 10> base{};
  std::array<std::array<double, 48>, 10> pattern{};
  for (std::size_t k = 0; k < 10; ++k) {
    for (auto& b : base[k]) b = 60.0 + 135.0 * proto_rng.uniform();
    for (std::size_t i = 0; i < 48; i += 2) {
      const auto z = proto_rng.normal_pair();
      pattern[k][i] = 45.0 * z[0];
      pattern[k][i + 1] = 45.0 * z[1];
    }
  }
  auto write_file = [&](const fs::path& path, std::uint64_t stream) {
    Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    std::vector<std::uint8_t> bytes(kCifarRecordsPerFile * kCifarRecord);
    for (std::size_t r = 0; r < kCifarRecordsPerFile; ++r) {
      std::uint8_t* rec = bytes.data() + r * kCifarRecord;
      const auto label = static_cast<std::size_t>(rng.below(10));
      rec[0] = static_cast<std::uint8_t>(label);
      const auto sx = static_cast<std::ptrdiff_t>(rng.below(7)) - 3;
      const auto sy = static_cast<std::ptrdiff_t>(rng.below(7)) - 3;
      const double contrast = 0.7 + 0.6 * rng.uniform();
      const double shift = 40.0 * (rng.uniform() - 0.5);
      for (std::size_t c = 0; c < kCifarChannels; ++c) {
        for (std::size_t y = 0; y < kCifarSide; ++y) {
          for (std::size_t x = 0; x < kCifarSide; ++x) {
            const auto py = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(y) + sy + 32) % 32);
            const auto px = static_cast<std::size_t>((static_cast<std::ptrdiff_t>(x) + sx + 32) % 32);
            const double cell = pattern[label][c * 16 + (py / 8) * 4 + px / 8];
            const double noise = 110.0 * (rng.uniform() - 0.5);
            const double v = base[label][c] + contrast * cell + shift + noise;
            rec[1 + (c * kCifarSide + y) * kCifarSide + x] =
                static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
          }
        }
      }
    }
    write_file_bytes(path, bytes);
  };
  for (std::size_t i = 0; i < kTrainFiles.size(); ++i) write_file(dir / kTrainFiles[i], i);
  write_file(dir / kTestFile, kTrainFiles.size());
  std::ofstream(dir / kStandinMarker) << "synthetic class-conditioned stand-in, seed " << seed
                                      << "\n";
}

template <typename T>
LabeledBatch<T> make_batch(const ImageDataset& data, std::span<const std::size_t> indices,
                           const AugmentOptions& augment, Rng* rng) {
  if ((augment.flip || augment.crop) && rng == nullptr) {
    throw std::invalid_argument("make_batch: augmentation needs an rng");
  }
  constexpr std::size_t S = kCifarSide;
  LabeledBatch<T> out;
  out.images = Tensor<T>({indices.size(), kCifarChannels, S, S});
  out.labels.reserve(indices.size());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t idx = indices[b];
    if (idx >= data.size()) {
      throw std::out_of_range("make_batch: index " + std::to_string(idx) + " >= " +
                              std::to_string(data.size()));
    }
    out.labels.push_back(data.labels[idx]);
    bool flip = false;
    std::ptrdiff_t dy = 0, dx = 0;
    if (augment.flip) flip = rng->below(2) == 1;
    if (augment.crop) {
      dy = static_cast<std::ptrdiff_t>(rng->below(9)) - 4;
      dx = static_cast<std::ptrdiff_t>(rng->below(9)) - 4;
    }
    const auto img = data.image(idx);
    T* dst = out.images.data() + b * kCifarPixels;
    for (std::size_t c = 0; c < kCifarChannels; ++c) {
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
          std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + dx;
          if (flip) sx = static_cast<std::ptrdiff_t>(S - 1) - sx;
          T v = 0;  // padding: zero after normalization, i.e. the mean colour
          if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(S) && sx >= 0 &&
              sx < static_cast<std::ptrdiff_t>(S)) {
            const double p = decode_pixel(img[(c * S + sy) * S + sx]);
            v = static_cast<T>((p - kCifarMean[c]) / kCifarStd[c]);
          }
          dst[(c * S + y) * S + x] = v;
        }
      }
    }
  }
  return out;
}

template <typename T>
LabeledBatch<T> synthetic_batch(Rng& rng, std::size_t batch, const ModelConfig& config) {
  LabeledBatch<T> out;
  out.images =
      rand_uniform<T>(rng, {batch, config.in_channels, config.image_size, config.image_size});
  for (std::size_t b = 0; b < batch; ++b) out.labels.push_back(rng.below(config.num_classes));
  return out;
}

template LabeledBatch<float> make_batch(const ImageDataset&, std::span<const std::size_t>,
                                        const AugmentOptions&, Rng*);
template LabeledBatch<double> make_batch(const ImageDataset&, std::span<const std::size_t>,
                                         const AugmentOptions&, Rng*);
template LabeledBatch<float> synthetic_batch(Rng&, std::size_t, const ModelConfig&);
template LabeledBatch<double> synthetic_batch(Rng&, std::size_t, const ModelConfig&);

// -- checkpoints --------------------------------------------------------------

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay within range.
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - pos, 1u << 30);
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_name(ByteWriter& w, const std::string& name) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(std::string_view(name));
}

std::string get_name(ByteReader& r) { return r.string(r.u32()); }

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& config,
                                            const ParameterStore<float>& params,
                                            const OptimizerState<float>* optimizer) {
  ByteWriter w;
  w.bytes(std::string_view("SKAT"));
  w.u8(kCheckpointVersion);
  const std::string json = config_dump(config);
  w.u32(static_cast<std::uint32_t>(json.size()));
  w.bytes(std::string_view(json));
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put_name(w, e.name);
    encode_tensor(w, e.param.value);
  }
  w.u8(optimizer != nullptr ? 1 : 0);
  if (optimizer != nullptr) {
    const auto& o = *optimizer;
    if (o.m.size() != o.names.size() || o.v.size() != o.names.size()) {
      throw std::invalid_argument("optimizer state: names/m/v lengths differ");
    }
    w.u64(o.step);
    w.u32(static_cast<std::uint32_t>(o.names.size()));
    for (std::size_t i = 0; i < o.names.size(); ++i) {
      put_name(w, o.names[i]);
      encode_tensor(w, o.m[i]);
      encode_tensor(w, o.v[i]);
    }
  }
  w.u32(crc_of(w.buffer()));
  return std::move(w).take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 1 + 4) throw FormatError("checkpoint too short");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4));
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc_of(body);
  if (stored != actual) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "checkpoint CRC mismatch: stored %08x, computed %08x", stored,
                  actual);
    throw ChecksumError(buf);
  }
  ByteReader r(body);
  if (r.string(4) != "SKAT") throw FormatError("not a SKAT checkpoint (bad magic)");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config = parse_config(r.string(r.u32()));
  ParameterStore<float> raw;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_name(r);
    raw.add(std::move(name), decode_tensor_as<float>(r));
  }
  ck.params = bind_parameters(ck.config, raw);
  if (r.u8() != 0) {
    OptimizerState<float> o;
    o.step = r.u64();
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      o.names.push_back(get_name(r));
      o.m.push_back(decode_tensor_as<float>(r));
      o.v.push_back(decode_tensor_as<float>(r));
    }
    ck.optimizer = std::move(o);
  }
  if (r.remaining() != 0) {
    throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " unparsed bytes");
  }
  return ck;
}

void save_checkpoint(const fs::path& path, const ModelConfig& config,
                     const ParameterStore<float>& params, const OptimizerState<float>* optimizer) {
  write_file_bytes(path, encode_checkpoint(config, params, optimizer));
}

Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file_bytes(path)); }

ParameterStore<float> load_parameters_for(const fs::path& path, const ModelConfig& target) {
  const Checkpoint ck = load_checkpoint(path);
  return bind_parameters(target, ck.params);
}

}  // namespace skipat
