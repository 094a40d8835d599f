// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/exposer.hpp"

#include <algorithm>

#include "gtest/gtest.h"
#include "shadowtune/backbone.hpp"

namespace shadowtune {
namespace {

NeuronBlockMask bits(std::vector<int> v) { return NeuronBlockMask(v); }

NeuronBlockMask random_mask(Rng& rng, std::size_t n, double p) {
  NeuronBlockMask m(n, false);
  for (std::size_t i = 0; i < n; ++i) m.set(i, rng.bernoulli(p));
  return m;
}

TEST(ShadowyCombineTest, Examples) {
  const std::vector<NeuronBlockMask> two = {bits({1, 0, 0, 1}), bits({0, 0, 1, 1})};
  const auto seq = shadowy_combine(two);
  EXPECT_EQ(seq, bits({1, 0, 1, 1}));
  EXPECT_DOUBLE_EQ(sparsity_ratio(two[0]), 0.5);
  EXPECT_DOUBLE_EQ(sparsity_ratio(seq), 0.25);
  const std::vector<NeuronBlockMask> one = {bits({0, 1, 0})};
  EXPECT_EQ(shadowy_combine(one), one[0]);
  const std::vector<NeuronBlockMask> absorbing = {bits({0, 1, 0}), bits({1, 1, 1})};
  EXPECT_EQ(shadowy_combine(absorbing), bits({1, 1, 1}));
  EXPECT_THROW(shadowy_combine(std::span<const NeuronBlockMask>{}), ConfigError);
  const std::vector<NeuronBlockMask> ragged = {bits({0, 1}), bits({1})};
  EXPECT_THROW(shadowy_combine(ragged), ShapeError);
}

TEST(ShadowyCombineTest, IdempotentCommutativeMonotone) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(20);
    std::vector<NeuronBlockMask> tokens;
    for (std::size_t t = 0, k = 1 + rng.index(6); t < k; ++t) tokens.push_back(random_mask(rng, n, 0.3));
    const auto combined = shadowy_combine(tokens);
    auto doubled = tokens;
    doubled.insert(doubled.end(), tokens.begin(), tokens.end());
    EXPECT_EQ(shadowy_combine(doubled), combined);
    auto reversed = tokens;
    std::reverse(reversed.begin(), reversed.end());
    EXPECT_EQ(shadowy_combine(reversed), combined);
    auto more = tokens;
    more.push_back(random_mask(rng, n, 0.3));
    const auto grown = shadowy_combine(more);
    for (std::size_t i = 0; i < n; ++i)
      if (combined[i]) EXPECT_TRUE(grown[i]);
    EXPECT_LE(sparsity_ratio(grown), sparsity_ratio(combined));
  }
}

TEST(SparsityRatioTest, Examples) {
  EXPECT_DOUBLE_EQ(sparsity_ratio(bits({1, 0, 1, 1})), 0.25);
  EXPECT_DOUBLE_EQ(sparsity_ratio(NeuronBlockMask(5, true)), 0.0);
  EXPECT_DOUBLE_EQ(sparsity_ratio(NeuronBlockMask(5, false)), 1.0);
  EXPECT_THROW(sparsity_ratio(NeuronBlockMask()), ConfigError);
  const std::vector<BlockIndex> diag = {{0, 0}, {1, 1}};
  EXPECT_DOUBLE_EQ(sparsity_ratio(diag, 2), 0.5);
}

ModelDims tiny_dims(bool causal) {
  ModelDims d;
  d.d_model = 8;
  d.n_heads = 2;
  d.d_ff = 16;
  d.seq_len = 8;
  d.blk_size = 4;
  d.attn_blk = 2;
  d.vocab = 11;
  d.n_layers = 2;
  d.causal = causal;
  return d;
}

BackboneConfig random_style() {
  BackboneConfig c;
  c.style = BackboneStyle::kRandom;
  return c;
}

TEST(ExactAttentionScoresTest, SingleTokenIsOne) {
  auto dims = tiny_dims(false);
  dims.seq_len = 1;
  dims.attn_blk = 1;
  const auto w = init_backbone(dims, random_style(), 1);
  Rng rng(2);
  const auto scores = exact_attention_scores(randn<float>(rng, {1, 8}, 1.0), w.blocks[0], BlockPeft<float>{}, dims);
  ASSERT_EQ(scores.size(), 2u);
  for (const auto& s : scores) EXPECT_EQ(s, Tensor::matrix({{1}}));
}

TEST(ExactAttentionScoresTest, IdenticalRowsGiveIdenticalScores) {
  const auto dims = tiny_dims(false);
  const auto w = init_backbone(dims, random_style(), 3);
  Rng rng(4);
  const auto row = randn<float>(rng, {1, 8}, 1.0);
  Tensor x({8, 8});
  for (std::size_t t = 0; t < 8; ++t) std::copy(row.storage().begin(), row.storage().end(), x.row(t).begin());
  for (const auto& s : exact_attention_scores(x, w.blocks[0], BlockPeft<float>{}, dims))
    for (std::size_t t = 1; t < 8; ++t)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(s(t, j), s(0, j));
}

TEST(ExactAttentionScoresTest, MatchesDenseForwardProbabilities) {
  for (bool causal : {false, true}) {
    const auto dims = tiny_dims(causal);
    const auto w = init_backbone(dims, random_style(), 5);
    PeftConfig cfg;
    cfg.lora_rank = 2;
    cfg.lora_targets = {LinearSlot::kQ, LinearSlot::kK};
    Rng rng(6);
    auto p = init_peft(w, cfg, rng);
    for (auto& ref : trainable_params(p))
      for (auto& v : ref.value->storage()) v = static_cast<float>(rng.normal() * 0.3);
    const auto x = randn<float>(rng, {8, 8}, 1.0);
    const auto pool = build_pool(dims.attn_grid());
    AttentionCache<float> cache;
    mha_forward(x, w.blocks[0], p.blocks[0], HeadPatternAssignment{{0, 0}}, pool, dims, &cache);
    const auto exact = exact_attention_scores(x, w.blocks[0], p.blocks[0], dims);
    for (std::size_t h = 0; h < 2; ++h) EXPECT_LE(max_abs_diff(cache.probs[h].to_dense(), exact[h]), 1e-6f);
  }
}

/// Brute force: coverage of every pool entry straight from the scores.
std::size_t brute_force_select(const Tensor& scores, const PatternPool& pool, double tau, std::size_t blk) {
  double total = 0;
  for (float v : scores.storage()) total += v;
  std::size_t best = 0;
  for (const auto& t : pool.tables()) {
    double covered = 0;
    for (std::size_t i = 0; i < scores.rows(); ++i)
      for (std::size_t j = 0; j < scores.cols(); ++j)
        if (t.pattern.contains(i / blk, j / blk)) covered += scores(i, j);
    const bool ok = t.pattern.kind == PatternKind::kDense || covered / total >= tau;
    if (ok && t.active_blocks() < pool.at(best).active_blocks()) best = t.id;
  }
  return best;
}

TEST(SelectHeadPatternTest, DiagonalMassChoosesBlockDiagonal) {
  const auto pool = build_pool(4);
  Tensor scores({8, 8});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) scores(i, j) = (i / 2 == j / 2) ? 0.48f : 0.00667f;
  const auto id = select_head_pattern(scores, pool, 0.9, 2);
  EXPECT_EQ(pool.at(id).pattern, (AtomicPattern{PatternKind::kBlockDiagonal, 0}));
  EXPECT_EQ(id, brute_force_select(scores, pool, 0.9, 2));
}

TEST(SelectHeadPatternTest, FullCoverageNeedsDense) {
  const auto pool = build_pool(4);
  Rng rng(7);
  Tensor scores({8, 8});
  for (auto& v : scores.storage()) v = static_cast<float>(0.01 + rng.uniform());
  EXPECT_EQ(select_head_pattern(scores, pool, 1.0, 2), PatternPool::dense_id());
}

TEST(SelectHeadPatternTest, UniformHalfCoverageIsDeterministic) {
  const auto pool = build_pool(2);
  Tensor scores({4, 4});
  for (auto& v : scores.storage()) v = 0.25f;
  const auto id = select_head_pattern(scores, pool, 0.5, 2);
  EXPECT_EQ(pool.at(id).active_blocks(), 2u);
  EXPECT_EQ(pool.at(id).pattern, (AtomicPattern{PatternKind::kBlockDiagonal, 0}));
  EXPECT_EQ(select_head_pattern(scores, pool, 0.5, 2), id);
  EXPECT_THROW(select_head_pattern(scores, pool, 0.0, 2), ConfigError);
  EXPECT_THROW(select_head_pattern(scores, pool, 1.1, 2), ConfigError);
}

TEST(SelectHeadPatternTest, CoverageAgainstBruteForce) {
  const auto pool = build_pool(8);
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    // random softmax rows with a random band preference
    const double sharp = 4.0 * rng.uniform();
    Tensor logits({32, 32});
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j)
        logits(i, j) = static_cast<float>(-sharp * std::abs(double(i) - double(j)) / 4.0 + rng.normal());
    const auto scores = softmax_rows(logits);
    const double tau = 0.5 + 0.5 * rng.uniform();
    const auto id = select_head_pattern(scores, pool, tau, 4);
    EXPECT_EQ(id, brute_force_select(scores, pool, tau, 4));
    BasicTensor<double> mass;
    accumulate_block_mass(scores, 4, mass);
    EXPECT_GE(pattern_coverage(mass, pool.at(id)), tau);
  }
}

TEST(BlockImportanceTest, Examples) {
  const auto imp = block_importance(Tensor::matrix({{0.1f, 0.9f, 0.0f, 0.05f}}), 2);
  ASSERT_EQ(imp.size(), 2u);
  EXPECT_FLOAT_EQ(static_cast<float>(imp[0]), 0.9f);
  EXPECT_FLOAT_EQ(static_cast<float>(imp[1]), 0.05f);
  for (double v : block_importance(Tensor::matrix({{-1, -2, -3}, {-0.5f, -4, -1}}), 2)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(block_importance(Tensor({3, 5}), 2).size(), 3u);  // partial final block
  Rng rng(9);
  const auto z = randn<float>(rng, {6, 12}, 1.0);
  const auto base = block_importance(z, 4), scaled = block_importance(scale(z, 3.0f), 4);
  for (std::size_t b = 0; b < base.size(); ++b) EXPECT_NEAR(scaled[b], 3.0 * base[b], 1e-5);
}

TEST(FilterNeuronBlocksTest, Examples) {
  const std::vector<double> imp = {0.9, 0.05};
  EXPECT_EQ(filter_neuron_blocks(imp, 0.10), bits({1, 0}));
  const std::vector<double> with_zero = {0.3, 0.0, 0.01};
  EXPECT_EQ(filter_neuron_blocks(with_zero, 0.0), bits({1, 0, 1}));
  const std::vector<double> tie = {0.7, 0.2, 0.7};
  EXPECT_EQ(filter_neuron_blocks(tie, 1.0), bits({1, 0, 1}));
  EXPECT_EQ(filter_neuron_blocks(std::vector<double>(3, 0.0), 0.0), NeuronBlockMask(3, false));
  EXPECT_THROW(filter_neuron_blocks(imp, 1.5), ConfigError);
}

TEST(FilterNeuronBlocksTest, ScaleInvariantAndMonotone) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> imp(1 + rng.index(40));
    for (auto& v : imp) v = rng.bernoulli(0.2) ? 0.0 : rng.uniform();
    const double c = 0.01 + 100 * rng.uniform();
    std::vector<double> scaled(imp);
    for (auto& v : scaled) v *= c;
    double previous = -1;
    for (double theta : {0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0}) {
      const auto m = filter_neuron_blocks(imp, theta);
      EXPECT_EQ(m, filter_neuron_blocks(scaled, theta));
      const double sp = sparsity_ratio(m);
      EXPECT_GE(sp, previous);
      previous = sp;
    }
  }
}

TEST(LayerSparsityReportTest, HeadSpecificDominatesAndThresholdIsMonotone) {
  ModelDims dims;
  dims.d_model = 64;
  dims.n_heads = 4;
  dims.d_ff = 128;
  dims.seq_len = 64;
  dims.blk_size = 8;
  dims.attn_blk = 8;
  dims.vocab = 64;
  dims.n_layers = 2;
  const auto w = init_backbone(dims, BackboneConfig{}, 11);
  PeftConfig cfg;
  Rng rng(12);
  const auto p = init_peft(w, cfg, rng);
  const auto pool = build_pool(dims.attn_grid());
  std::vector<std::vector<std::int32_t>> batch(2, std::vector<std::int32_t>(dims.seq_len));
  for (auto& seq : batch)
    for (auto& t : seq) t = static_cast<std::int32_t>(rng.index(dims.vocab));
  const std::vector<double> thetas = {0.1, 0.2, 0.4};
  const auto rows = layer_sparsity_report(w, p, batch, thetas, 0.95, pool);
  ASSERT_EQ(rows.size(), dims.n_layers * 6);
  for (std::size_t l = 0; l < dims.n_layers; ++l) {
    const auto* r = &rows[l * 6];
    EXPECT_GE(r[1].sparsity, r[0].sparsity);
    EXPECT_GE(r[3].sparsity, r[2].sparsity);
    EXPECT_GE(r[4].sparsity, r[3].sparsity);
    EXPECT_GE(r[5].sparsity, r[4].sparsity);
  }
  const auto again = layer_sparsity_report(w, p, batch, thetas, 0.95, pool);
  EXPECT_EQ(sparsity_csv(rows), sparsity_csv(again));
  const auto csv = sparsity_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,component,method,theta,sparsity_ratio");
  EXPECT_NE(csv.find("\n0,attention,shadowy,0.950000,"), std::string::npos);
}

TEST(ExposerMasksTest, ExactMasksReproduceDenseLogits) {
  const auto dims = tiny_dims(true);
  auto w = init_backbone(dims, random_style(), 13);
  for (auto& b : w.blocks)
    for (auto& v : b.bias[4].storage()) v -= 2.5f;
  PeftConfig cfg;
  cfg.lora_rank = 2;
  Rng rng(14);
  const auto p = init_peft(w, cfg, rng);
  const auto pool = build_pool(dims.attn_grid());
  ExposerOptions opts;
  opts.tau = 1.0;
  opts.theta = 0.0;
  ExposerMasks<float> exposer(w, p, pool, opts);
  DenseMasks<float> dense(dims);
  const std::vector<std::vector<std::int32_t>> batch = {{0, 1, 2, 3, 4, 5, 6, 7}, {0, 9, 8, 7, 6, 5, 4, 3}};
  std::vector<ModelCache<float>> caches;
  const auto sparse = model_forward_batch(w, p, batch, exposer, &caches);
  const auto ref = model_forward_batch(w, p, batch, dense);
  for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_LE(max_abs_diff(sparse[i], ref[i]), 1e-5f);
  std::size_t skipped = 0;
  for (const auto& b : caches[0].blocks) skipped += dims.n_blk() - b.mlp.mask.active_count();
  EXPECT_GT(skipped, 0u);
}

}  // namespace
}  // namespace shadowtune
