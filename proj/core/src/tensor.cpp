// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/tensor.hpp"

#include <cmath>
#include <sstream>

namespace shadowtune {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void require_rank2(const Shape& shape, const char* what) {
  if (shape.size() != 2) {
    throw ShapeError(std::string(what) + ": expected a rank-2 tensor, got " + shape_string(shape));
  }
}

namespace {

template <typename T>
void check_inner(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t ka, std::size_t kb,
                 const char* op) {
  require_rank2(a.shape(), op);
  require_rank2(b.shape(), op);
  if (ka != kb) {
    throw ShapeError(std::string(op) + ": inner dimensions disagree " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

template <typename T>
void check_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_inner(a, b, a.cols(), b.rows(), "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicTensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  constexpr std::size_t tile = kMatmulTile;
  for (std::size_t i0 = 0; i0 < m; i0 += tile) {
    const std::size_t i1 = std::min(m, i0 + tile);
    for (std::size_t k0 = 0; k0 < k; k0 += tile) {
      const std::size_t k1 = std::min(k, k0 + tile);
      for (std::size_t j0 = 0; j0 < n; j0 += tile) {
        const std::size_t jn = std::min(n, j0 + tile) - j0;
        for (std::size_t i = i0; i < i1; ++i) {
          T* crow = pc + i * n + j0;
          for (std::size_t p = k0; p < k1; ++p) {
            axpy(pa[i * k + p], pb + p * n + j0, crow, jn);
          }
        }
      }
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_inner(a, b, a.rows(), b.rows(), "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  BasicTensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  constexpr std::size_t tile = kMatmulTile;
  for (std::size_t i0 = 0; i0 < m; i0 += tile) {
    const std::size_t i1 = std::min(m, i0 + tile);
    for (std::size_t p = 0; p < k; ++p) {
      for (std::size_t i = i0; i < i1; ++i) {
        const T aip = pa[p * m + i];
        if (aip != T(0)) axpy(aip, pb + p * n, pc + i * n, n);
      }
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_inner(a, b, a.cols(), b.cols(), "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  BasicTensor<T> c({m, n});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* pc = c.data().data();
  constexpr std::size_t tile = kMatmulTile;
  for (std::size_t i0 = 0; i0 < m; i0 += tile) {
    const std::size_t i1 = std::min(m, i0 + tile);
    for (std::size_t j0 = 0; j0 < n; j0 += tile) {
      const std::size_t j1 = std::min(n, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) pc[i * n + j] = dot(pa + i * k, pb + j * k, k);
      }
    }
  }
  return c;
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  require_rank2(x.shape(), "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  BasicTensor<T> y({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y(j, i) = x(i, j);
  return y;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.data()) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  require_rank2(x.shape(), "softmax_rows");
  BasicTensor<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    T mx = r[0];
    for (T v : r) mx = std::max(mx, v);
    T total = 0;
    for (T& v : r) {
      v = std::exp(v - mx);
      total += v;
    }
    for (T& v : r) v /= total;
  }
  return y;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> c = a;
  add_inplace(c, b);
  return c;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> c = a;
  add_inplace(c, b, T(-1));
  return c;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  BasicTensor<T> c = a;
  for (T& v : c.data()) v *= factor;
  return c;
}

template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src, T factor) {
  check_same(dst, src, "add");
  T* d = dst.data().data();
  const T* s = src.data().data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += factor * s[i];
}

template <typename T>
void add_row_bias(BasicTensor<T>& x, const BasicTensor<T>& bias) {
  if (bias.size() != x.cols()) {
    throw ShapeError("add_row_bias: bias length " + std::to_string(bias.size()) +
                     " does not match " + std::to_string(x.cols()) + " columns");
  }
  for (std::size_t i = 0; i < x.rows(); ++i) axpy(T(1), bias.data().data(), x.row(i).data(), x.cols());
}

template <typename T>
BasicTensor<T> column_sums(const BasicTensor<T>& x) {
  BasicTensor<T> s({x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i) axpy(T(1), x.row(i).data(), s.data().data(), x.cols());
  return s;
}

template <typename T>
BasicTensor<T> slice_cols(const BasicTensor<T>& x, std::size_t c0, std::size_t c1) {
  require_rank2(x.shape(), "slice_cols");
  if (c0 > c1 || c1 > x.cols()) throw ShapeError("slice_cols: column range out of bounds");
  BasicTensor<T> y({x.rows(), c1 - c0});
  for (std::size_t i = 0; i < x.rows(); ++i)
    std::copy(x.row(i).begin() + c0, x.row(i).begin() + c1, y.row(i).begin());
  return y;
}

template <typename T>
void set_cols(BasicTensor<T>& dst, std::size_t c0, const BasicTensor<T>& src) {
  if (src.rows() != dst.rows() || c0 + src.cols() > dst.cols()) {
    throw ShapeError("set_cols: source " + shape_string(src.shape()) + " does not fit into " +
                     shape_string(dst.shape()));
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    std::copy(src.row(i).begin(), src.row(i).end(), dst.row(i).begin() + c0);
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  BasicTensor<T> y({rows.size(), x.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) throw ShapeError("gather_rows: row index out of range");
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), y.row(i).begin());
  }
  return y;
}

template <typename T>
T max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_same(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
T max_abs(const BasicTensor<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
bool all_finite(const BasicTensor<T>& a) {
  for (T v : a.data())
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
T sum(const BasicTensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return s;
}

template <typename T>
BasicTensor<T> randn(Rng& rng, Shape shape, double scale) {
  if (!(scale > 0.0)) throw ConfigError("randn: scale must be positive");
  BasicTensor<T> t(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.normal() * scale);
  return t;
}

#define SHADOWTUNE_INSTANTIATE_TENSOR(T)                                                   \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> matmul_tn(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                     \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                             \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                 \
  template void add_inplace(BasicTensor<T>&, const BasicTensor<T>&, T);                    \
  template void add_row_bias(BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> column_sums(const BasicTensor<T>&);                              \
  template BasicTensor<T> slice_cols(const BasicTensor<T>&, std::size_t, std::size_t);     \
  template void set_cols(BasicTensor<T>&, std::size_t, const BasicTensor<T>&);             \
  template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>); \
  template T max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template T max_abs(const BasicTensor<T>&);                                               \
  template bool all_finite(const BasicTensor<T>&);                                         \
  template T sum(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> randn(Rng&, Shape, double);

SHADOWTUNE_INSTANTIATE_TENSOR(float)
SHADOWTUNE_INSTANTIATE_TENSOR(double)

#undef SHADOWTUNE_INSTANTIATE_TENSOR

}  // namespace shadowtune
