// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "shadowtune/error.hpp"
#include "shadowtune/rng.hpp"

namespace shadowtune {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array. `float` is the main path; `double` is the shadow
/// path used by gradient checks.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), T(0)) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor full(Shape shape, T value) {
    BasicTensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }
  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows);
  static BasicTensor vector(std::initializer_list<T> values) {
    return BasicTensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows/cols of a rank-2 tensor. A rank-1 tensor is viewed as a single row.
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  std::span<T> row(std::size_t i) { return std::span<T>(data_).subspan(i * cols(), cols()); }
  std::span<const T> row(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * cols(), cols());
  }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const BasicTensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <typename T>
BasicTensor<T> BasicTensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t n_rows = rows.size();
  const std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(n_rows * n_cols);
  for (const auto& r : rows) {
    if (r.size() != n_cols) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return BasicTensor({n_rows, n_cols}, std::move(data));
}

/// Compile-time tile edge for the cache-blocked matmul kernels.
inline constexpr std::size_t kMatmulTile = 32;

// Dense kernels. All of them validate shapes and throw ShapeError.

/// c = a · b
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// c = aᵀ · b
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);
/// c = a · bᵀ
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);
/// Row-wise softmax with per-row max subtraction.
template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src, T factor = T(1));
/// Adds a length-cols bias to every row of x.
template <typename T>
void add_row_bias(BasicTensor<T>& x, const BasicTensor<T>& bias);
/// Sum over rows: returns a rank-1 tensor of length cols.
template <typename T>
BasicTensor<T> column_sums(const BasicTensor<T>& x);

/// Columns [c0, c1) of a rank-2 tensor.
template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t c0, std::size_t c1);
/// Writes src into columns [c0, c0 + src.cols()) of dst.
template <typename T>
void set_cols(BasicTensor<T>& dst, std::size_t c0, const BasicTensor<T>& src);
/// Rows at the given indices, in order.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows);

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
T max_abs(const BasicTensor<T>& a);
template <typename T>
bool all_finite(const BasicTensor<T>& a);
template <typename T>
T sum(const BasicTensor<T>& a);

/// Gaussian samples times `scale`. Throws ConfigError unless scale > 0.
template <typename T>
BasicTensor<T> randn(Rng& rng, Shape shape, double scale);

/// Dot product with eight independent partial sums; fixed order.
template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

/// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* __restrict x, T* __restrict y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void require_rank2(const Shape& shape, const char* what);

}  // namespace shadowtune
