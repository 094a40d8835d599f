// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/predictor.hpp"

#include <algorithm>
#include <cmath>

#include "gtest/gtest.h"
#include "oracle.hpp"
#include "shadowtune/flops.hpp"

namespace shadowtune {
namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<float> v) { return Tensor({r, c}, std::move(v)); }

NeuronBlockMask bits(std::vector<int> v) { return NeuronBlockMask(v); }

std::string pattern_name(const PatternPool& pool, std::size_t id) { return pool.at(id).pattern.name(); }

TEST(DownsampleTest, Indices) {
  EXPECT_EQ(downsample_indices(16), (std::vector<std::size_t>{0, 4, 8, 12}));
  EXPECT_EQ(downsample_indices(1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(downsample_indices(1024).size(), 32u);
  EXPECT_EQ(downsample_indices(1024)[31], 992u);
  EXPECT_EQ(downsampled_rows(17), 5u);
  EXPECT_THROW(downsampled_rows(0), ConfigError);
  for (std::size_t s = 1; s < 300; ++s) {
    const auto idx = downsample_indices(s);
    EXPECT_EQ(idx.front(), 0u);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end()) << s;
    EXPECT_LT(idx.back(), s);
  }
}

TEST(DownsampleTest, PicksRows) {
  Rng rng(1);
  const Tensor x = randn<float>(rng, {16, 3}, 1.0);
  const Tensor y = downsample(x);
  ASSERT_EQ(y.shape(), (Shape{4, 3}));
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(y(k, c), x(4 * k, c));
  const Tensor one = randn<float>(rng, {1, 5}, 1.0);
  EXPECT_EQ(downsample(one).storage(), one.storage());
}

TEST(AttnScoresTest, ZeroWeightsAndShape) {
  Rng rng(2);
  const Tensor xt = randn<float>(rng, {8, 16}, 1.0);
  const Tensor s = approx_attention_scores(xt, Tensor({16, 4}), Tensor({16, 4}));
  EXPECT_EQ(s.shape(), (Shape{8, 8}));
  EXPECT_EQ(max_abs(s), 0.0);
}

TEST(AttnScoresTest, MatchesNaiveProduct) {
  Rng rng(3);
  const Tensor xt = randn<float>(rng, {6, 10}, 1.0);
  const Tensor wq = randn<float>(rng, {10, 3}, 0.3), wk = randn<float>(rng, {10, 3}, 0.3);
  const Tensor expect =
      oracle::naive_matmul(oracle::naive_matmul(xt, wq), oracle::naive_transpose(oracle::naive_matmul(xt, wk)));
  EXPECT_LT(max_abs_diff(approx_attention_scores(xt, wq, wk), expect), 1e-5);
}

TEST(AttnScoresTest, RankAtMostR) {
  Rng rng(4);
  for (std::size_t r : {1u, 2u, 4u}) {
    const Tensor xt = randn<float>(rng, {16, 32}, 0.3);
    const Tensor s =
        approx_attention_scores(xt, randn<float>(rng, {32, r}, 0.3), randn<float>(rng, {32, r}, 0.3));
    const auto sv = oracle::singular_values(s);
    ASSERT_GT(sv[r - 1], 1e-3);
    for (std::size_t k = r; k < sv.size(); ++k) EXPECT_LT(sv[k], 1e-6) << "r=" << r << " k=" << k;
  }
}

TEST(CategorizeTest, Examples) {
  const auto pool = build_pool(2);
  const Tensor s = mat(2, 2, {0.9f, 0.1f, 0.05f, 0.8f});
  EXPECT_EQ(binarize_relative(s, 0.5).storage(), (std::vector<float>{1, 0, 0, 1}));
  const auto one = categorize_predicted_scores({{s}}, 0.5, 0.9, pool);
  EXPECT_EQ(pattern_name(pool, one.pattern_ids[0]), "block_diagonal");
  // Threshold below min: every cell active.
  const auto all = categorize_predicted_scores({{s}}, 0.0, 0.9, pool);
  EXPECT_EQ(all.pattern_ids[0], pool.dense_id());
  // Diagonal and anti-diagonal items OR to a full grid.
  const Tensor anti = mat(2, 2, {0.1f, 0.9f, 0.7f, 0.0f});
  const auto batch = categorize_predicted_scores({{s}, {anti}}, 0.5, 0.9, pool);
  EXPECT_EQ(batch.pattern_ids[0], pool.dense_id());
}

TEST(CategorizeTest, NonPositiveScoresKeepTheMax) {
  const Tensor s = mat(2, 2, {-1.0f, -3.0f, -3.0f, -2.0f});
  EXPECT_EQ(binarize_relative(s, 0.5).storage(), (std::vector<float>{1, 0, 0, 1}));
  EXPECT_THROW(binarize_relative(s, std::nan("")), ConfigError);
}

TEST(CategorizeTest, UpsampleNearestCell) {
  const Tensor m = mat(2, 2, {1, 0, 0, 1});
  const Tensor up = upsample_mask(m, 4);
  const std::vector<float> expect = {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1};
  EXPECT_EQ(up.storage(), expect);
  EXPECT_EQ(upsample_mask(m, 2).storage(), m.storage());
  // Shrinking samples cell centres.
  const Tensor big = mat(4, 4, expect);
  EXPECT_EQ(upsample_mask(big, 2).storage(), m.storage());
}

TEST(CategorizeTest, PredictMatchesPerItemScores) {
  Rng rng(5);
  const auto pool = build_pool(4);
  auto params = init_attn_predictor(8, 2, 4, rng);
  std::vector<Tensor> batch = {randn<float>(rng, {16, 8}, 1.0), randn<float>(rng, {16, 8}, 1.0)};
  std::vector<std::vector<Tensor>> scores;
  for (const auto& x : batch) {
    auto& item = scores.emplace_back();
    for (std::size_t h = 0; h < 2; ++h) item.push_back(approx_attention_scores(downsample(x), params.wq[h], params.wk[h]));
  }
  EXPECT_EQ(predict_attention_patterns(batch, params, 0.5, 0.9, pool).pattern_ids,
            categorize_predicted_scores(scores, 0.5, 0.9, pool).pattern_ids);
}

TEST(MlpScoresTest, Examples) {
  Rng rng(6);
  MlpPredictorParams p{randn<float>(rng, {5, 3}, 1.0), Tensor({3})};
  EXPECT_EQ(max_abs(approx_mlp_scores(Tensor({4, 5}), p)), 0.0);
  const Tensor token = randn<float>(rng, {1, 5}, 1.0);
  Tensor x({6, 5});
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 5; ++c) x(t, c) = token(0, c);
  const Tensor s = approx_mlp_scores(x, p);
  EXPECT_EQ(s.shape(), (Shape{6, 3}));
  for (std::size_t t = 1; t < 6; ++t)
    for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(s(t, b), s(0, b));
  p.bias = Tensor::vector({1.0f, -1.0f, 0.5f});
  const Tensor biased = approx_mlp_scores(Tensor({2, 5}), p);
  EXPECT_EQ(biased.storage(), (std::vector<float>{1, -1, 0.5f, 1, -1, 0.5f}));
}

TEST(MlpMaskTest, Examples) {
  const Tensor rows = mat(2, 2, {1.0f, -1.0f, -1.0f, -1.0f});
  EXPECT_EQ(predict_mlp_mask(std::span<const Tensor>(&rows, 1), 0.0), bits({1, 0}));
  const Tensor hot = mat(2, 3, {-1, -1, -1, 2, 3, 4});
  EXPECT_EQ(predict_mlp_mask(std::span<const Tensor>(&hot, 1), 0.0), bits({1, 1, 1}));
  EXPECT_EQ(predict_mlp_mask(std::span<const Tensor>(&hot, 1), 10.0), bits({0, 0, 0}));
  EXPECT_THROW(predict_mlp_mask({}, 0.0), ConfigError);
  const std::vector<Tensor> ragged = {rows, hot};
  EXPECT_THROW(predict_mlp_mask(ragged, 0.0), ShapeError);
}

TEST(MlpMaskTest, MonotoneAndBatchOr) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n_blk = 1 + rng.index(12);
    std::vector<Tensor> batch;
    for (std::size_t i = 0, n = 1 + rng.index(4); i < n; ++i) batch.push_back(randn<float>(rng, {1 + rng.index(6), n_blk}, 1.0));
    const double lo = rng.normal(), hi = lo + rng.uniform();
    const auto a = predict_mlp_mask(batch, lo), b = predict_mlp_mask(batch, hi);
    for (std::size_t k = 0; k < n_blk; ++k) EXPECT_TRUE(a[k] || !b[k]);
    NeuronBlockMask oracle(n_blk, false);
    for (const auto& item : batch)
      for (std::size_t t = 0; t < item.rows(); ++t)
        for (std::size_t k = 0; k < n_blk; ++k)
          if (item(t, k) > lo) oracle.set(k, true);
    EXPECT_EQ(a, oracle);
    NeuronBlockMask per_item(n_blk, false);
    for (const auto& item : batch) per_item |= predict_mlp_mask(std::span<const Tensor>(&item, 1), lo);
    EXPECT_EQ(a, per_item);
  }
}

TEST(RecallPrecisionTest, Examples) {
  auto rp = eval_recall_precision(bits({0, 1, 1, 0}), bits({0, 0, 1, 1}));
  EXPECT_DOUBLE_EQ(rp.recall, 0.5);
  EXPECT_DOUBLE_EQ(rp.precision, 0.5);
  rp = eval_recall_precision(bits({1, 0, 1}), bits({1, 0, 1}));
  EXPECT_DOUBLE_EQ(rp.recall, 1);
  EXPECT_DOUBLE_EQ(rp.precision, 1);
  rp = eval_recall_precision(bits({1, 1, 1, 1}), bits({0, 1, 0, 0}));
  EXPECT_DOUBLE_EQ(rp.recall, 1);
  EXPECT_DOUBLE_EQ(rp.precision, 0.25);
  rp = eval_recall_precision(bits({0, 0}), bits({0, 0}));
  EXPECT_DOUBLE_EQ(rp.recall, 1);
  EXPECT_DOUBLE_EQ(rp.precision, 1);
  EXPECT_THROW(eval_recall_precision(bits({0}), bits({0, 1})), ShapeError);
}

TEST(CostTest, Examples) {
  EXPECT_EQ(predictor_cost_flops(1024, 64, 8).attn, 40960u);
  EXPECT_EQ(predictor_cost_flops(256, 64, 8).mlp, 131328u);
  EXPECT_EQ(predictor_cost_flops(1, 64, 8).attn, 2u * 64 * 8 + 8);
  EXPECT_THROW(predictor_cost_flops(0, 64, 8), ConfigError);
}

TEST(CostTest, InstrumentedCountsMatchFormula) {
  Rng rng(8);
  for (std::size_t s : {16u, 64u, 256u}) {
    const std::size_t d = 32, r = 4, n_blk = 4;
    const Tensor x = randn<float>(rng, {s, d}, 1.0);
    const auto attn = init_attn_predictor(d, 1, r, rng);
    MlpPredictorParams mlp{randn<float>(rng, {d, n_blk}, 1.0), Tensor({n_blk})};
    MacCounter counter;
    approx_attention_scores(downsample(x), attn.wq[0], attn.wk[0]);
    const Tensor scores = approx_mlp_scores(x, mlp);
    predict_mlp_mask(std::span<const Tensor>(&scores, 1), 0.0);
    // The MLP formula's r is the number of neuron blocks.
    EXPECT_EQ(counter.get(MacCategory::kPredictorAttn), predictor_cost_flops(s, d, r).attn);
    EXPECT_EQ(counter.get(MacCategory::kPredictorMlp) + counter.get(MacCategory::kPredictorReduce),
              predictor_cost_flops(s, d, n_blk).mlp);
  }
}

TEST(TargetsTest, PoolScoresRowsSumToOne) {
  Rng rng(9);
  for (std::size_t s : {1u, 5u, 16u, 30u}) {
    Tensor p = randn<float>(rng, {s, s}, 1.0);
    p = softmax_rows(p);
    const Tensor pooled = pool_scores(p);
    const std::size_t g = downsampled_rows(s);
    ASSERT_EQ(pooled.shape(), (Shape{g, g}));
    for (std::size_t a = 0; a < g; ++a) {
      double row = 0;
      for (std::size_t b = 0; b < g; ++b) row += pooled(a, b);
      EXPECT_NEAR(row, 1.0, 1e-5);
    }
  }
  // Identity attention pools onto the diagonal.
  Tensor eye({16, 16});
  for (std::size_t i = 0; i < 16; ++i) eye(i, i) = 1;
  const Tensor pooled = pool_scores(eye);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) EXPECT_FLOAT_EQ(pooled(a, b), a == b ? 1.0f : 0.0f);
}

TEST(TargetsTest, BlockLabels) {
  const Tensor act = mat(2, 4, {0, 0, 0.5f, 0, 0, 0, 0, 0});
  EXPECT_EQ(block_labels(act, 2).storage(), (std::vector<float>{0, 1, 0, 0}));
  EXPECT_EQ(block_labels(mat(1, 3, {0, 0, 1}), 2).storage(), (std::vector<float>{0, 1}));
}

TEST(TrainConfigTest, Validation) {
  PredictorTrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.noise_std = -0.1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.recall_weight = 0.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.tau_pred = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_EQ(default_predictor_rank(64), 4u);
  EXPECT_EQ(default_predictor_rank(256), 16u);
}

TEST(TrainAttnTest, ZeroEpochsLeavesParams) {
  const auto bench = make_realizable_attn_benchmark(64, 16, 2, 4, 4, 1, 1);
  Rng rng(1);
  auto params = init_attn_predictor(16, 2, 4, rng);
  const auto before = params;
  PredictorTrainConfig cfg;
  cfg.epochs = 0;
  const auto res = train_attn_predictor(params, bench.train, cfg);
  EXPECT_EQ(res.initial_loss, res.final_loss);
  for (std::size_t h = 0; h < 2; ++h) {
    EXPECT_EQ(params.wq[h].storage(), before.wq[h].storage());
    EXPECT_EQ(params.wk[h].storage(), before.wk[h].storage());
  }
  EXPECT_THROW(train_attn_predictor(params, {}, cfg), ConfigError);
}

TEST(TrainAttnTest, DivergenceAborts) {
  const auto bench = make_realizable_attn_benchmark(64, 16, 1, 4, 2, 1, 1);
  Rng rng(1);
  auto params = init_attn_predictor(16, 1, 4, rng);
  params.wq[0][0] = std::numeric_limits<float>::infinity();
  PredictorTrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train_attn_predictor(params, bench.train, cfg), NumericError);
}

TEST(TrainAttnTest, RealizableTeacherAgreement) {
  const auto pool = build_pool(8);
  const auto bench = make_realizable_attn_benchmark(256, 64, 4, 4, 32, 32, 11);
  Rng rng(12);
  auto params = init_attn_predictor(64, 4, 4, rng);
  PredictorTrainConfig cfg;
  const auto res = train_attn_predictor(params, bench.train, cfg);
  EXPECT_LT(res.final_loss, 0.01 * res.initial_loss);
  EXPECT_GE(attn_pattern_agreement(params, bench.test, 0.5, 0.9, pool), 0.95);
}

TEST(TrainAttnTest, CleanTrainingFitsCleanDataAtLeastAsWell) {
  const auto bench = make_realizable_attn_benchmark(64, 16, 2, 4, 16, 1, 13);
  PredictorTrainConfig cfg;
  cfg.epochs = 100;
  cfg.lr = 1e-2;
  Rng r1(14), r2(14);
  auto clean = init_attn_predictor(16, 2, 4, r1);
  auto noisy = init_attn_predictor(16, 2, 4, r2);
  cfg.noise_std = 0;
  train_attn_predictor(clean, bench.train, cfg);
  cfg.noise_std = 0.3;
  train_attn_predictor(noisy, bench.train, cfg);
  EXPECT_LE(attn_distill_loss(clean, bench.train), attn_distill_loss(noisy, bench.train));
}

TEST(TrainMlpTest, ZeroEpochsLeavesParams) {
  const auto bench = make_realizable_mlp_benchmark(16, 8, 4, 4, 1, 1);
  auto params = init_mlp_predictor(8, 4);
  PredictorTrainConfig cfg;
  cfg.epochs = 0;
  train_mlp_predictor(params, bench.train, cfg);
  EXPECT_EQ(max_abs(params.wa), 0.0);
  EXPECT_EQ(max_abs(params.bias), 0.0);
  EXPECT_THROW(train_mlp_predictor(params, {}, cfg), ConfigError);
}

TEST(TrainMlpTest, UnitWeightIsSymmetricLogistic) {
  const auto bench = make_realizable_mlp_benchmark(8, 4, 3, 2, 1, 2);
  Rng rng(3);
  MlpPredictorParams p{randn<float>(rng, {4, 3}, 1.0), randn<float>(rng, {3}, 1.0)};
  double expect = 0;
  for (const auto& s : bench.train) {
    const Tensor z = approx_mlp_scores(s.x, p);
    double total = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double pr = 1 / (1 + std::exp(-double(z[i])));
      total -= s.labels[i] > 0.5f ? std::log(pr) : std::log(1 - pr);
    }
    expect += total / static_cast<double>(z.size());
  }
  expect /= static_cast<double>(bench.train.size());
  EXPECT_NEAR(mlp_weighted_loss(p, bench.train, 1.0), expect, 1e-6);
  EXPECT_GT(mlp_weighted_loss(p, bench.train, 4.0), mlp_weighted_loss(p, bench.train, 1.0));
}

TEST(TrainMlpTest, RealizableTeacherRecall) {
  const auto bench = make_realizable_mlp_benchmark(64, 32, 16, 64, 32, 21);
  auto params = init_mlp_predictor(32, 16);
  PredictorTrainConfig cfg;
  cfg.seed = 21;
  const auto res = train_mlp_predictor(params, bench.train, cfg);
  EXPECT_LT(res.final_loss, res.initial_loss);
  const auto tok = mlp_token_metrics(params, bench.test, cfg.mlp_threshold);
  EXPECT_GE(tok.recall, 0.95);
  EXPECT_GT(tok.precision, 0.5);
}

TEST(TrainMlpTest, RecallWeightSweep) {
  const std::vector<double> lambdas = {1, 2, 4, 8};
  std::vector<double> mean(lambdas.size(), 0.0);
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto bench = make_realizable_mlp_benchmark(32, 16, 8, 32, 16, 100 + seed);
    std::vector<double> recall;
    for (double lambda : lambdas) {
      auto params = init_mlp_predictor(16, 8);
      PredictorTrainConfig cfg;
      cfg.epochs = 60;
      cfg.lr = 3e-3;
      cfg.recall_weight = lambda;
      cfg.seed = seed;
      train_mlp_predictor(params, bench.train, cfg);
      recall.push_back(mlp_token_metrics(params, bench.test, 0.0).recall);
    }
    for (std::size_t i = 0; i < lambdas.size(); ++i) mean[i] += recall[i] / 10;
    wins += recall.back() >= recall.front();
  }
  for (std::size_t i = 1; i < lambdas.size(); ++i) EXPECT_GE(mean[i], mean[i - 1]) << "lambda " << lambdas[i];
  EXPECT_GE(wins, 8);
}

TEST(TrainMlpTest, RobustToLoraSkew) {
  const auto bench = make_realizable_mlp_benchmark(64, 32, 16, 64, 32, 31);
  auto params = init_mlp_predictor(32, 16);
  PredictorTrainConfig cfg;
  cfg.seed = 31;
  train_mlp_predictor(params, bench.train, cfg);
  const double clean = mlp_token_metrics(params, bench.test, 0.0).recall;
  Rng rng(32);
  std::vector<MlpSample> skewed;
  for (const auto& s : bench.test) {
    // X + X·A·B with rank 4, rescaled so the update has norm 0.1·|X|.
    const Tensor delta = matmul(matmul(s.x, randn<float>(rng, {32, 4}, 1.0)), randn<float>(rng, {4, 32}, 1.0));
    double nx = 0, nd = 0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
      nx += double(s.x[i]) * s.x[i];
      nd += double(delta[i]) * delta[i];
    }
    const Tensor x = add(s.x, scale(delta, static_cast<float>(0.1 * std::sqrt(nx / nd))));
    skewed.push_back({x, bench.labels_for(x)});
  }
  EXPECT_GE(mlp_token_metrics(params, skewed, 0.0).recall, 0.9 * clean);
}

TEST(PredictorSetTest, SaveLoadRoundTrip) {
  Rng rng(40);
  PredictorSet set;
  set.attn_threshold = 0.4;
  set.mlp_threshold = -0.5;
  set.tau_pred = 0.85;
  for (int l = 0; l < 2; ++l)
    set.layers.push_back({init_attn_predictor(8, 2, 4, rng), {randn<float>(rng, {8, 3}, 1.0), randn<float>(rng, {3}, 1.0)}});
  TensorArchive archive;
  set.save(archive);
  const auto back = PredictorSet::load(TensorArchive::deserialize(archive.serialize()));
  EXPECT_EQ(back.attn_threshold, 0.4);
  EXPECT_EQ(back.mlp_threshold, -0.5);
  EXPECT_EQ(back.tau_pred, 0.85);
  ASSERT_EQ(back.layers.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    ASSERT_EQ(back.layers[l].attn.n_heads(), 2u);
    EXPECT_EQ(back.layers[l].attn.wk[1].storage(), set.layers[l].attn.wk[1].storage());
    EXPECT_EQ(back.layers[l].mlp.wa.storage(), set.layers[l].mlp.wa.storage());
    EXPECT_EQ(back.layers[l].mlp.bias.storage(), set.layers[l].mlp.bias.storage());
  }
  TensorArchive other;
  EXPECT_THROW(PredictorSet::load(other), IoError);
}

TEST(PredictedMasksTest, DrivesTheModel) {
  ModelDims dims{.d_model = 8, .n_heads = 2, .d_ff = 16, .seq_len = 16, .blk_size = 4, .attn_blk = 4,
                 .vocab = 11, .n_layers = 2};
  Rng rng(41);
  const auto pool = build_pool(dims.seq_len / dims.attn_blk);
  PredictorSet set;
  for (std::size_t l = 0; l < dims.n_layers; ++l)
    set.layers.push_back({init_attn_predictor(8, 2, 4, rng), {randn<float>(rng, {8, 4}, 1.0), Tensor({4})}});
  PredictedMasks masks(set, pool);
  const std::vector<Tensor> batch = {randn<float>(rng, {16, 8}, 1.0)};
  const auto layout = masks.attention_layout(1, batch);
  EXPECT_EQ(layout.n_heads(), 2u);
  EXPECT_EQ(layout.grid(), 4u);
  const auto mask = masks.mlp_mask(0, batch);
  const Tensor scores = approx_mlp_scores(batch[0], set.layers[0].mlp);
  EXPECT_EQ(mask, predict_mlp_mask(std::span<const Tensor>(&scores, 1), 0.0));
  EXPECT_GT(masks.prediction_seconds(), 0.0);
  masks.reset_timer();
  EXPECT_EQ(masks.prediction_seconds(), 0.0);
  EXPECT_THROW(masks.mlp_mask(5, batch), std::out_of_range);
}

}  // namespace
}  // namespace shadowtune
