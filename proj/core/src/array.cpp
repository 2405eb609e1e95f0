#include "gsbmdpo/array.hpp"

#include <algorithm>
#include <cmath>

namespace gsbmdpo {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e == 0) throw ShapeError("array extents must be positive");
    n *= e;
  }
  return n;
}

Array::Array(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {
  if (shape_.empty()) throw ShapeError("array shape must be non-empty");
}

Array::Array(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_.empty()) throw ShapeError("array shape must be non-empty");
  if (shape_product(shape_) != data_.size()) {
    throw ShapeError("data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
}

Array Array::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Array({r, c}, std::move(data));
}

Array Array::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Array({n}, std::move(values));
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on non-scalar array " + shape_string());
  return data_[0];
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Array Array::reshaped(std::vector<std::size_t> shape) const {
  if (shape.empty() || shape_product(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string() + " to " +
                     std::to_string(shape_product(shape)) + " values");
  }
  Array out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Array::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace gsbmdpo
