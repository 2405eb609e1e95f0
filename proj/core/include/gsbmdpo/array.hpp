#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gsbmdpo {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Cache-line aligned storage. Vectorized kernels choose their peeling from
// the buffer address, so a fixed alignment keeps results independent of where
// the allocator happened to place the data.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
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

// Dense row-major array of doubles. Rank 1 or 2 in practice; a scalar is any
// array holding exactly one value.
class Array {
 public:
  using Storage = std::vector<double, AlignedAllocator<double>>;

  Array() = default;
  explicit Array(std::vector<std::size_t> shape, double fill = 0.0);
  Array(std::vector<std::size_t> shape, std::vector<double> data);

  static Array scalar(double v) { return Array({1}, {v}); }
  static Array matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Array({rows, cols}, fill);
  }
  static Array from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Array vector(std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_scalar() const { return data_.size() == 1; }

  // Leading extent for rank 2, 1 for rank 1.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  // Trailing extent.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  double item() const;
  void fill(double v);
  Array reshaped(std::vector<std::size_t> shape) const;
  bool all_finite() const;
  bool same_shape(const Array& other) const { return shape_ == other.shape_; }

  std::string shape_string() const;

 private:
  std::vector<std::size_t> shape_;
  Storage data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

}  // namespace gsbmdpo
