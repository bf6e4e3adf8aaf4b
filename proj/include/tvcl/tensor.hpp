#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tvcl/error.hpp"

namespace tvcl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major array. The element type doubles as the precision tag:
// experiments run in float, gradient checks run the same code in double.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_product(shape_), T(0)) {
    check_shape();
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_product(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_to_string(shape_));
    }
  }

  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor({rows.size(), cols}, std::move(data));
  }

  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * shape_[1], shape_[1]); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * shape_[1], shape_[1]);
  }

  const std::vector<T>& values() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor shape " + shape_to_string(shape_) + " has a zero extent");
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace tvcl
