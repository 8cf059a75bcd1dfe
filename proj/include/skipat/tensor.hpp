#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace skipat {

/// Raised whenever operand extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};

const char* dtype_name(DType dtype);

/// 64-byte aligned storage. Keeping every buffer on the same alignment makes
/// vectorized kernels take the same peeling path on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Dims = std::vector<std::size_t>;

std::string dims_to_string(const Dims& dims);
std::size_t dims_product(const Dims& dims);

/// Dense row-major n-dimensional array. Value type: copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  Tensor() = default;
  explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(dims_product(dims_), T(0)) {}
  Tensor(Dims dims, T fill) : dims_(std::move(dims)), data_(dims_product(dims_), fill) {}
  Tensor(Dims dims, std::initializer_list<T> values) : dims_(std::move(dims)), data_(values) {
    check_size();
  }
  Tensor(Dims dims, std::span<const T> values)
      : dims_(std::move(dims)), data_(values.begin(), values.end()) {
    check_size();
  }

  static Tensor zeros(Dims dims) { return Tensor(std::move(dims)); }
  static Tensor full(Dims dims, T value) { return Tensor(std::move(dims), value); }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= dims_.size()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for dims " +
                       dims_to_string(dims_));
    }
    return dims_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Extents of a rank-2 tensor.
  std::size_t rows() const { return require_rank(2), dims_[0]; }
  std::size_t cols() const { return require_rank(2), dims_[1]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * dims_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * dims_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) noexcept {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const noexcept {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  /// Row i of a rank-2 tensor.
  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * dims_[1], dims_[1]}; }
  std::span<const T> row(std::size_t i) const noexcept {
    return {data_.data() + i * dims_[1], dims_[1]};
  }

  Tensor reshaped(Dims dims) const& {
    Tensor out = *this;
    out.reshape_in_place(std::move(dims));
    return out;
  }
  Tensor reshaped(Dims dims) && {
    reshape_in_place(std::move(dims));
    return std::move(*this);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(dims_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool same_dims(const Tensor& other) const noexcept { return dims_ == other.dims_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_size() const {
    if (dims_product(dims_) != data_.size()) {
      throw ShapeError("dims " + dims_to_string(dims_) + " need " +
                       std::to_string(dims_product(dims_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }
  void require_rank(std::size_t r) const {
    if (dims_.size() != r) {
      throw ShapeError("expected rank " + std::to_string(r) + ", got dims " +
                       dims_to_string(dims_));
    }
  }
  void reshape_in_place(Dims dims) {
    if (dims_product(dims) != data_.size()) {
      throw ShapeError("cannot reshape " + dims_to_string(dims_) + " to " +
                       dims_to_string(dims));
    }
    dims_ = std::move(dims);
  }

  Dims dims_;
  Storage data_;
};

/// A value together with its accumulated gradient.
template <typename T>
struct GradPair {
  Tensor<T> value;
  std::optional<Tensor<T>> grad;

  /// Gradient slot, zero-initialized on first use.
  Tensor<T>& grad_slot() {
    if (!grad) grad.emplace(value.dims());
    return *grad;
  }
  void zero_grad() { grad.reset(); }
};

}  // namespace skipat
