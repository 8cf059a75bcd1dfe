#include "skipat/tensor_io.hpp"

#include <fstream>
#include <iterator>

namespace skipat {

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to " + path.string() + " failed");
}

template <typename T>
void encode_tensor(ByteWriter& out, const Tensor<T>& t) {
  out.bytes(std::string_view("SKTN"));
  out.u8(1);
  out.u8(static_cast<std::uint8_t>(dtype_of<T>::value));
  if (t.rank() > 255) throw FormatError("SKTN1 supports rank <= 255");
  out.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) out.u64(d);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if constexpr (std::is_same_v<T, float>) {
      out.f32(t[i]);
    } else {
      out.f64(t[i]);
    }
  }
}

AnyTensor decode_tensor(ByteReader& in) {
  if (in.string(4) != "SKTN") throw FormatError("bad tensor magic (expected SKTN)");
  const std::uint8_t version = in.u8();
  if (version != 1) throw FormatError("unsupported SKTN version " + std::to_string(version));
  const std::uint8_t dtype = in.u8();
  const std::uint8_t rank = in.u8();
  Dims dims(rank);
  std::size_t count = 1;
  for (auto& d : dims) {
    d = static_cast<std::size_t>(in.u64());
    count *= d;
  }
  const std::size_t width = dtype == 0 ? 4 : 8;
  if (dtype > 1) throw FormatError("unknown SKTN dtype " + std::to_string(dtype));
  if (count > in.remaining() / width) {
    throw FormatError("tensor " + dims_to_string(dims) + " needs " +
                      std::to_string(count * width) + " payload bytes, only " +
                      std::to_string(in.remaining()) + " remain");
  }
  if (dtype == 0) {
    Tensor<float> t(dims);
    for (std::size_t i = 0; i < count; ++i) t[i] = in.f32();
    return t;
  }
  Tensor<double> t(dims);
  for (std::size_t i = 0; i < count; ++i) t[i] = in.f64();
  return t;
}

template <typename T>
Tensor<T> decode_tensor_as(ByteReader& in) {
  return std::visit(
      [](auto&& t) -> Tensor<T> {
        using Stored = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<Stored, T>) {
          return std::move(t);
        } else {
          return t.template cast<T>();
        }
      },
      decode_tensor(in));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  ByteWriter out;
  encode_tensor(out, t);
  write_file_bytes(path, out.buffer());
}

AnyTensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader in(bytes);
  AnyTensor t = decode_tensor(in);
  if (in.remaining() != 0) {
    throw FormatError(path.string() + ": " + std::to_string(in.remaining()) +
                      " trailing bytes after tensor");
  }
  return t;
}

template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader in(bytes);
  return decode_tensor_as<T>(in);
}

template void encode_tensor(ByteWriter&, const Tensor<float>&);
template void encode_tensor(ByteWriter&, const Tensor<double>&);
template Tensor<float> decode_tensor_as<float>(ByteReader&);
template Tensor<double> decode_tensor_as<double>(ByteReader&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor_as<float>(const std::filesystem::path&);
template Tensor<double> load_tensor_as<double>(const std::filesystem::path&);

}  // namespace skipat
