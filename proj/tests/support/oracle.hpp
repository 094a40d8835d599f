// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Naive reference implementations used as independent test oracles. Plain
// loops, no tiling, no sparsity.

#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <vector>

#include "shadowtune/tensor.hpp"

namespace shadowtune::oracle {

template <typename T>
BasicTensor<T> naive_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
      c(i, j) = acc;
    }
  return c;
}

template <typename T>
BasicTensor<T> naive_transpose(const BasicTensor<T>& a) {
  BasicTensor<T> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// Dense attention with an explicit -inf mask: softmax(scale Q Kᵀ + M) V.
template <typename T>
BasicTensor<T> masked_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v, T scale,
                                const std::function<bool(std::size_t, std::size_t)>& allowed,
                                BasicTensor<T>* probs_out = nullptr) {
  const std::size_t s = q.rows();
  BasicTensor<T> p({s, s});
  for (std::size_t i = 0; i < s; ++i) {
    std::vector<double> row(s, -std::numeric_limits<double>::infinity());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s; ++j) {
      if (!allowed(i, j)) continue;
      double acc = 0;
      for (std::size_t c = 0; c < q.cols(); ++c) acc += static_cast<double>(q(i, c)) * k(j, c);
      row[j] = acc * scale;
      m = std::max(m, row[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < s; ++j) z += std::exp(row[j] - m);
    for (std::size_t j = 0; j < s; ++j) p(i, j) = static_cast<T>(std::exp(row[j] - m) / z);
  }
  if (probs_out != nullptr) *probs_out = p;
  return naive_matmul(p, v);
}

template <typename T>
BasicTensor<T> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  return randn<T>(rng, std::move(shape), scale);
}

/// Singular values (descending) via cyclic Jacobi on AᵀA in double.
inline std::vector<double> singular_values(const BasicTensor<float>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> g(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < m; ++k) g[i * n + j] += double(a(k, i)) * double(a(k, j));
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += g[p * n + q] * g[p * n + q];
    if (off < 1e-300) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = g[p * n + q];
        if (apq == 0) continue;
        const double theta = (g[q * n + q] - g[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double gkp = g[k * n + p], gkq = g[k * n + q];
          g[k * n + p] = c * gkp - s * gkq;
          g[k * n + q] = s * gkp + c * gkq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double gpk = g[p * n + k], gqk = g[q * n + k];
          g[p * n + k] = c * gpk - s * gqk;
          g[q * n + k] = s * gpk + c * gqk;
        }
      }
    }
  }
  std::vector<double> sv(n);
  for (std::size_t i = 0; i < n; ++i) sv[i] = std::sqrt(std::max(0.0, g[i * n + i]));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

}  // namespace shadowtune::oracle
