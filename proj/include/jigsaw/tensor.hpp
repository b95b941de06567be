// Copyright (c) 2026, The Jigsaw Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor container.

#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "jigsaw/errors.hpp"

namespace jigsaw {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::F32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::F64;
};

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <Scalar T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  /// 2-D tensor from nested rows; all rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows in Tensor::matrix");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> v) { return Tensor({v.size()}, std::vector<T>(v)); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * shape_[1] + j]; }

  /// Row-major element access for tensors of rank >= 3.
  template <std::convertible_to<std::size_t>... I>
    requires(sizeof...(I) >= 3)
  T& operator()(I... idx) noexcept { return data_[flat({std::size_t(idx)...})]; }
  template <std::convertible_to<std::size_t>... I>
    requires(sizeof...(I) >= 3)
  const T& operator()(I... idx) const noexcept { return data_[flat({std::size_t(idx)...})]; }

  Tensor reshaped(Shape s) const {
    if (numel(s) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    return Tensor(std::move(s), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <Scalar U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

  void require_same_shape(const Tensor& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw ShapeError(std::string("shape mismatch in ") + what + ": " + shape_str(shape_) + " vs " +
                       shape_str(o.shape_));
    }
  }

 private:
  std::size_t flat(std::initializer_list<std::size_t> idx) const noexcept {
    std::size_t k = 0, d = 0;
    for (std::size_t i : idx) k = k * shape_[d++] + i;
    return k;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Rows [r0, r1) and columns [c0, c1) of a matrix; out-of-range cells read as zero.
template <Scalar T>
Tensor<T> slice2d(const Tensor<T>& m, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  Tensor<T> out({nr, nc});
  for (std::size_t i = 0; i < nr && r0 + i < m.rows(); ++i) {
    for (std::size_t j = 0; j < nc && c0 + j < m.cols(); ++j) out(i, j) = m(r0 + i, c0 + j);
  }
  return out;
}

/// Writes `block` into `m` at (r0, c0); cells falling outside `m` are dropped.
template <Scalar T>
void place2d(Tensor<T>& m, const Tensor<T>& block, std::size_t r0, std::size_t c0) {
  for (std::size_t i = 0; i < block.rows() && r0 + i < m.rows(); ++i) {
    for (std::size_t j = 0; j < block.cols() && c0 + j < m.cols(); ++j) m(r0 + i, c0 + j) = block(i, j);
  }
}

template <Scalar T>
Tensor<T> transpose(const Tensor<T>& m) {
  Tensor<T> out({m.cols(), m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

}  // namespace jigsaw
