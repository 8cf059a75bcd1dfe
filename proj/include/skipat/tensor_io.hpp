#pragma once

// SKTN1 tensor files: "SKTN", u8 version (1), u8 dtype (0 = f32, 1 = f64),
// u8 rank, rank x u64 dims, then the scalars. All little-endian.

#include <filesystem>
#include <variant>

#include "skipat/binary_io.hpp"
#include "skipat/tensor.hpp"

namespace skipat {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void encode_tensor(ByteWriter& out, const Tensor<T>& t);

AnyTensor decode_tensor(ByteReader& in);

/// Decodes and converts to T if the stored dtype differs.
template <typename T>
Tensor<T> decode_tensor_as(ByteReader& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

AnyTensor load_tensor(const std::filesystem::path& path);

template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path);

}  // namespace skipat
