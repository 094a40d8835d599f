// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/tensor.hpp"

#include <cmath>

#include "gtest/gtest.h"
#include "oracle.hpp"

namespace shadowtune {
namespace {

TEST(TensorTest, RejectsDataLengthMismatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

TEST(MatmulTest, IdentityLeavesMatrixUnchanged) {
  const auto i2 = Tensor::matrix({{1, 0}, {0, 1}});
  const auto b = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(i2, b), b);
}

TEST(MatmulTest, HandComputedProduct) {
  const auto a = Tensor::matrix({{1, 2}, {3, 4}});
  const auto b = Tensor::matrix({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(a, b), Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST(MatmulTest, ZerosAnnihilate) {
  Rng rng(3);
  const auto b = randn<float>(rng, {3, 4}, 1.0);
  EXPECT_EQ(matmul(Tensor({2, 3}), b), Tensor({2, 4}));
}

TEST(MatmulTest, RejectsInnerDimensionMismatch) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  EXPECT_THROW(matmul_tn(Tensor({2, 3}), Tensor({3, 3})), ShapeError);
  EXPECT_THROW(matmul_nt(Tensor({2, 3}), Tensor({3, 2})), ShapeError);
}

TEST(MatmulTest, TiledKernelsMatchNaiveLoop) {
  Rng rng(11);
  for (std::size_t m : {1, 7, 33, 70}) {
    for (std::size_t k : {1, 5, 32, 65}) {
      const auto a = randn<float>(rng, {m, k}, 1.0);
      const auto b = randn<float>(rng, {k, 41}, 1.0);
      const auto ref = oracle::naive_matmul(a, b);
      EXPECT_LE(max_abs_diff(matmul(a, b), ref), 1e-4f);
      EXPECT_LE(max_abs_diff(matmul_tn(oracle::naive_transpose(a), b), ref), 1e-4f);
      EXPECT_LE(max_abs_diff(matmul_nt(a, oracle::naive_transpose(b)), ref), 1e-4f);
    }
  }
}

TEST(MatmulTest, AssociativeWithinTolerance) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.index(64), k = 1 + rng.index(64), m = 1 + rng.index(64), p = 1 + rng.index(64);
    auto bounded = [&](Shape s) {
      auto t = Tensor(std::move(s));
      for (auto& v : t.storage()) v = static_cast<float>(rng.uniform() * 2 - 1);
      return t;
    };
    const auto a = bounded({n, k}), b = bounded({k, m}), c = bounded({m, p});
    EXPECT_LE(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-4f);
  }
}

TEST(ReluTest, SignSplit) {
  EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})), Tensor::vector({0, 0, 2}));
  EXPECT_EQ(relu(Tensor::vector({-3, -0.5f})), Tensor::vector({0, 0}));
  const auto pos = Tensor::vector({0.1f, 4, 9});
  EXPECT_EQ(relu(pos), pos);
}

TEST(ReluTest, Idempotent) {
  Rng rng(8);
  const auto x = randn<float>(rng, {13, 17}, 2.0);
  EXPECT_EQ(relu(relu(x)), relu(x));
}

TEST(SoftmaxTest, ClosedForms) {
  const auto a = softmax_rows(Tensor::matrix({{0, 0}, {1000, 1000}, {0, std::log(3.0f)}}));
  EXPECT_FLOAT_EQ(a(0, 0), 0.5f);
  EXPECT_FLOAT_EQ(a(1, 1), 0.5f);
  EXPECT_NEAR(a(2, 0), 0.25f, 1e-7);
  EXPECT_NEAR(a(2, 1), 0.75f, 1e-7);
}

TEST(SoftmaxTest, RowsSumToOne) {
  Rng rng(2);
  const auto p = softmax_rows(randn<float>(rng, {40, 97}, 5.0));
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0;
    for (float v : p.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_TRUE(all_finite(p));
}

TEST(TransposeTest, Basics) {
  EXPECT_EQ(transpose(Tensor::matrix({{1, 2}, {3, 4}})), Tensor::matrix({{1, 3}, {2, 4}}));
  Rng rng(4);
  const auto x = randn<float>(rng, {5, 9}, 1.0);
  EXPECT_EQ(transpose(transpose(x)), x);
  EXPECT_EQ(transpose(Tensor::matrix({{1, 2, 3}})).shape(), (Shape{3, 1}));
  EXPECT_THROW(transpose(Tensor({2, 2, 2})), ShapeError);
}

TEST(RandnTest, DeterministicPerSeed) {
  Rng a(42), b(42), c(43);
  const auto ta = randn<float>(a, {64}, 1.0);
  EXPECT_EQ(ta, randn<float>(b, {64}, 1.0));
  EXPECT_NE(ta, randn<float>(c, {64}, 1.0));
}

TEST(RandnTest, ScaleSetsStandardDeviation) {
  Rng rng(9);
  const auto t = randn<float>(rng, {20000}, 1e-2);
  double mean = 0, sq = 0;
  for (float v : t.storage()) mean += v;
  mean /= static_cast<double>(t.size());
  for (float v : t.storage()) sq += (v - mean) * (v - mean);
  const double std = std::sqrt(sq / static_cast<double>(t.size()));
  EXPECT_NEAR(std, 1e-2, 1e-3);
  EXPECT_THROW(randn<float>(rng, {4}, 0.0), ConfigError);
}

}  // namespace
}  // namespace shadowtune
