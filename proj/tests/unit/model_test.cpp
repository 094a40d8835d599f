// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/model.hpp"

#include <cmath>

#include "dense_model.hpp"
#include "gtest/gtest.h"
#include "shadowtune/backbone.hpp"

namespace shadowtune {
namespace {

ModelDims tiny_dims(bool causal = true) {
  ModelDims d;
  d.d_model = 8;
  d.n_heads = 2;
  d.d_ff = 16;
  d.seq_len = 8;
  d.blk_size = 4;
  d.attn_blk = 4;
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

/// LoRA on every slot with non-zero B so every adapter path is exercised.
template <typename T>
PeftParams<T> busy_lora(const FrozenWeights<T>& w, std::uint64_t seed) {
  PeftConfig cfg;
  cfg.lora_rank = 2;
  cfg.lora_targets = {LinearSlot::kQ, LinearSlot::kK, LinearSlot::kV, LinearSlot::kO, LinearSlot::kUp, LinearSlot::kDown};
  Rng rng(seed);
  auto p = init_peft(w, cfg, rng);
  for (auto& ref : trainable_params(p))
    for (auto& v : ref.value->storage()) v = static_cast<T>(rng.normal() * 0.3);
  return p;
}

TEST(ModelDimsTest, Validation) {
  EXPECT_NO_THROW(tiny_dims().validate());
  auto d = tiny_dims();
  d.n_heads = 3;
  EXPECT_THROW(d.validate(), ConfigError);
  d = tiny_dims();
  d.seq_len = 10;
  EXPECT_THROW(d.validate(), ConfigError);
  d = tiny_dims();
  d.d_ff = 18;
  EXPECT_EQ(d.n_blk(), 5u);
}

TEST(LoraLinearTest, HandExample) {
  const auto w = Tensor::matrix({{1, 0}, {0, 1}});
  const LoraAdapter<float> lora{Tensor::matrix({{1, 0}}), Tensor::matrix({{1}, {0}}), 1.0f};
  EXPECT_EQ(lora_linear_forward(Tensor::matrix({{2, 3}}), w, nullptr, &lora), Tensor::matrix({{4, 3}}));
}

TEST(LoraLinearTest, ZeroBIsExactlyFrozenProjection) {
  Rng rng(5);
  const auto x = randn<float>(rng, {6, 8}, 1.0), w = randn<float>(rng, {8, 5}, 1.0);
  const LoraAdapter<float> lora{randn<float>(rng, {2, 8}, 1.0), Tensor({5, 2}), 1.0f};
  EXPECT_EQ(lora_linear_forward(x, w, nullptr, &lora), matmul(x, w));
}

TEST(LoraLinearTest, ZeroInputGivesBias) {
  Rng rng(6);
  const auto w = randn<float>(rng, {4, 3}, 1.0), bias = randn<float>(rng, {3}, 1.0);
  const LoraAdapter<float> lora{randn<float>(rng, {2, 4}, 1.0), randn<float>(rng, {3, 2}, 1.0), 1.0f};
  const auto z = lora_linear_forward(Tensor({2, 4}), w, &bias, &lora);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(z(t, j), bias[j]);
}

TEST(LoraLinearTest, ShapeMismatchRejected) {
  const LoraAdapter<float> bad{Tensor({2, 5}), Tensor({3, 2}), 1.0f};
  EXPECT_THROW(lora_linear_forward(Tensor({2, 4}), Tensor({4, 3}), nullptr, &bad), ShapeError);
  EXPECT_THROW(lora_linear_forward(Tensor({2, 5}), Tensor({4, 3}), nullptr, nullptr), ShapeError);
}

TEST(MhaForwardTest, DenseLayoutMatchesOracle) {
  for (bool causal : {false, true}) {
    const auto dims = tiny_dims(causal);
    const auto w = init_backbone(dims, random_style(), 1);
    const auto p = busy_lora(w, 2);
    Rng rng(3);
    const auto x = randn<float>(rng, {dims.seq_len, dims.d_model}, 1.0);
    const auto pool = build_pool(dims.attn_grid());
    const auto out = mha_forward(x, w.blocks[0], p.blocks[0], HeadPatternAssignment{{0, 0}}, pool, dims, nullptr);
    const auto ref = oracle::dense_mha<float>(x, w.blocks[0], p.blocks[0], dims,
                                              [&](std::size_t, std::size_t i, std::size_t j) { return !causal || j <= i; });
    EXPECT_LE(max_abs_diff(out, ref), 1e-5f) << "causal=" << causal;
  }
}

TEST(MhaForwardTest, SingleBlockGridIgnoresPatternChoice) {
  auto dims = tiny_dims(false);
  dims.seq_len = dims.attn_blk;
  const auto w = init_backbone(dims, random_style(), 4);
  const auto p = busy_lora(w, 5);
  Rng rng(6);
  const auto x = randn<float>(rng, {dims.seq_len, dims.d_model}, 1.0);
  const auto pool = build_pool(1, std::vector<AtomicPattern>{{PatternKind::kDense, 0}, {PatternKind::kBlockDiagonal, 0}});
  const auto a = mha_forward(x, w.blocks[0], p.blocks[0], HeadPatternAssignment{{0, 1}}, pool, dims, nullptr);
  const auto b = mha_forward(x, w.blocks[0], p.blocks[0], HeadPatternAssignment{{1, 0}}, pool, dims, nullptr);
  EXPECT_EQ(a, b);
}

TEST(MhaForwardTest, BlockDiagonalIsolatesBlocks) {
  const auto dims = tiny_dims(false);
  const auto w = init_backbone(dims, random_style(), 7);
  const auto p = busy_lora(w, 8);
  Rng rng(9);
  auto x = randn<float>(rng, {dims.seq_len, dims.d_model}, 1.0);
  const auto pool = build_pool(2, std::vector<AtomicPattern>{{PatternKind::kBlockDiagonal, 0}});
  const HeadPatternAssignment diag{{1, 1}};
  const auto before = mha_forward(x, w.blocks[0], p.blocks[0], diag, pool, dims, nullptr);
  for (std::size_t t = dims.attn_blk; t < dims.seq_len; ++t)
    for (auto& v : x.row(t)) v += static_cast<float>(rng.normal());
  const auto after = mha_forward(x, w.blocks[0], p.blocks[0], diag, pool, dims, nullptr);
  for (std::size_t t = 0; t < dims.attn_blk; ++t)
    for (std::size_t c = 0; c < dims.d_model; ++c) EXPECT_EQ(before(t, c), after(t, c));
  const auto ref = oracle::dense_mha<float>(x, w.blocks[0], p.blocks[0], dims, [&](std::size_t, std::size_t i, std::size_t j) {
    return i / dims.attn_blk == j / dims.attn_blk;
  });
  EXPECT_LE(max_abs_diff(after, ref), 1e-5f);
}

TEST(MhaForwardTest, UnknownPatternRejected) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 1);
  const auto p = busy_lora(w, 2);
  const auto pool = build_pool(dims.attn_grid());
  EXPECT_THROW(mha_forward(Tensor({8, 8}), w.blocks[0], p.blocks[0], HeadPatternAssignment{{0, 99}}, pool, dims, nullptr),
               ConfigError);
}

TEST(MlpForwardTest, AllActiveMatchesDenseOracle) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 10);
  const auto p = busy_lora(w, 11);
  Rng rng(12);
  const auto x = randn<float>(rng, {dims.seq_len, dims.d_model}, 1.0);
  const auto out = mlp_forward(x, w.blocks[1], p.blocks[1], NeuronBlockMask::all_active(dims.n_blk()), dims, nullptr);
  EXPECT_LE(max_abs_diff(out, oracle::dense_mlp(x, w.blocks[1], p.blocks[1])), 1e-5f);
}

TEST(MlpForwardTest, AllInactiveGivesSecondBias) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 13);
  PeftConfig cfg;
  Rng rng(1);
  cfg.lora_rank = 2;
  const auto p = init_peft(w, cfg, rng);
  Rng xr(14);
  const auto out = mlp_forward(randn<float>(xr, {dims.seq_len, dims.d_model}, 1.0), w.blocks[0], p.blocks[0],
                               NeuronBlockMask::none_active(dims.n_blk()), dims, nullptr);
  const auto& b2 = w.blocks[0].bias[static_cast<std::size_t>(LinearSlot::kDown)];
  for (std::size_t t = 0; t < dims.seq_len; ++t)
    for (std::size_t c = 0; c < dims.d_model; ++c) EXPECT_EQ(out(t, c), b2[c]);
}

TEST(MlpForwardTest, HandExampleDropsInactiveNeuron) {
  ModelDims dims;
  dims.d_model = 2;
  dims.n_heads = 1;
  dims.d_ff = 2;
  dims.blk_size = 1;
  BlockWeights<float> w;
  w.mlp = LayeredWeights<float>::from_logical(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1, 10}, {100, 1000}}));
  // column-major storage lists column 0 = [1, 3] then column 1 = [2, 4]
  EXPECT_EQ(std::vector<float>(w.mlp.w1.storage().begin(), w.mlp.w1.storage().end()), (std::vector<float>{1, 3, 2, 4}));
  w.bias[static_cast<std::size_t>(LinearSlot::kUp)] = Tensor({2});
  w.bias[static_cast<std::size_t>(LinearSlot::kDown)] = Tensor({2});
  MlpCache<float> cache;
  const auto out = mlp_forward(Tensor::matrix({{1, 1}}), w, BlockPeft<float>{}, NeuronBlockMask(std::vector<int>{1, 0}),
                               dims, &cache);
  EXPECT_EQ(cache.h.values, Tensor::matrix({{4}}));
  EXPECT_EQ(out, Tensor::matrix({{4, 40}}));  // row 0 of W2 only
}

TEST(MlpForwardTest, MaskLengthMismatchRejected) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 1);
  EXPECT_THROW(mlp_forward(Tensor({8, 8}), w.blocks[0], BlockPeft<float>{}, NeuronBlockMask(3), dims, nullptr),
               ConfigError);
}

TEST(MlpForwardTest, TrueSparsityIsExact) {
  const auto dims = tiny_dims();
  Rng rng(15);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = init_backbone(dims, random_style(), 100 + trial);
    auto& b1 = w.blocks[0].bias[static_cast<std::size_t>(LinearSlot::kUp)];
    for (auto& v : b1.storage()) v -= 1.5f;
    const auto p = busy_lora(w, 200 + trial);
    const auto x = randn<float>(rng, {dims.seq_len, dims.d_model}, 1.0);
    MlpCache<float> dense_cache;
    const auto dense = mlp_forward(x, w.blocks[0], p.blocks[0], NeuronBlockMask::all_active(dims.n_blk()), dims, &dense_cache);
    const auto z = dense_cache.z.to_dense();
    NeuronBlockMask exact(dims.n_blk(), false);
    for (std::size_t c = 0; c < dims.d_ff; ++c)
      for (std::size_t t = 0; t < dims.seq_len; ++t)
        if (z(t, c) > 0) exact.set(c / dims.blk_size, true);
    EXPECT_EQ(mlp_forward(x, w.blocks[0], p.blocks[0], exact, dims, nullptr), dense);
  }
}

TEST(BlockForwardTest, ZeroSublayersAreIdentity) {
  const auto dims = tiny_dims();
  auto w = init_backbone(dims, random_style(), 20);
  auto& b = w.blocks[0];
  b.wo = Tensor({8, 8});
  b.bias[static_cast<std::size_t>(LinearSlot::kO)] = Tensor({8});
  b.bias[static_cast<std::size_t>(LinearSlot::kDown)] = Tensor({8});
  b.mlp = LayeredWeights<float>::from_logical(b.mlp.w1.to_logical(), Tensor({16, 8}));
  PeftConfig cfg;
  cfg.lora_rank = 2;
  Rng rng(21);
  const auto p = init_peft(w, cfg, rng);
  const auto x = randn<float>(rng, {8, 8}, 1.0);
  DenseMasks<float> masks(dims);
  EXPECT_EQ(block_forward(x, b, p.blocks[0], dims, 0, masks, nullptr), x);
}

TEST(BlockForwardTest, DenseMasksMatchMonolithicOracle) {
  for (auto method : {PeftMethod::kLora, PeftMethod::kAdapter, PeftMethod::kBitfit}) {
    const auto dims = tiny_dims();
    const auto w = init_backbone(dims, random_style(), 22);
    PeftConfig cfg;
    cfg.method = method;
    cfg.lora_rank = 2;
    cfg.adapter_rank = 3;
    Rng rng(23);
    auto p = init_peft(w, cfg, rng);
    for (auto& ref : trainable_params(p))
      for (auto& v : ref.value->storage()) v += static_cast<float>(rng.normal() * 0.2);
    const auto x = randn<float>(rng, {8, 8}, 1.0);
    DenseMasks<float> masks(dims);
    const auto out = block_forward(x, w.blocks[1], p.blocks[1], dims, 1, masks, nullptr);
    EXPECT_LE(max_abs_diff(out, oracle::dense_block(x, w.blocks[1], p.blocks[1], dims)), 1e-5f)
        << peft_method_name(method);
  }
}

TEST(BlockForwardTest, Deterministic) {
  const auto dims = tiny_dims();
  auto run = [&] {
    const auto w = init_backbone(dims, random_style(), 30);
    const auto p = busy_lora(w, 31);
    Rng rng(32);
    DenseMasks<float> masks(dims);
    return block_forward(randn<float>(rng, {8, 8}, 1.0), w.blocks[0], p.blocks[0], dims, 0, masks, nullptr);
  };
  EXPECT_EQ(run(), run());
}

TEST(LossTest, ClosedForms) {
  const std::vector<std::int32_t> t0 = {0, 3};
  EXPECT_NEAR(loss_forward(Tensor({2, 7}), t0), std::log(7.0f), 1e-6);
  EXPECT_NEAR(loss_forward(Tensor::matrix({{0, std::log(3.0f)}}), std::vector<std::int32_t>{1}), -std::log(0.75f), 1e-6);
  float previous = 1e9f;
  for (float margin : {1.0f, 5.0f, 20.0f, 60.0f}) {
    const float l = loss_forward(Tensor::matrix({{margin, 0, 0}}), std::vector<std::int32_t>{0});
    EXPECT_LT(l, previous);
    previous = l;
  }
  EXPECT_LT(previous, 1e-20f);
  EXPECT_THROW(loss_forward(Tensor({1, 3}), std::vector<std::int32_t>{3}), ConfigError);
  EXPECT_THROW(loss_forward(Tensor({1, 3}), std::vector<std::int32_t>{-1}), ConfigError);
}

TEST(ModelForwardTest, RejectsOutOfVocabularyTokens) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 1);
  const auto p = busy_lora(w, 2);
  DenseMasks<float> masks(dims);
  std::vector<std::int32_t> tokens(dims.seq_len, 1);
  EXPECT_NO_THROW(model_forward(w, p, tokens, masks, nullptr));
  tokens[3] = static_cast<std::int32_t>(dims.vocab);
  EXPECT_THROW(model_forward(w, p, tokens, masks, nullptr), ConfigError);
}

TEST(PeftTest, FreshAdaptersStartAtFrozenModel) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 40);
  DenseMasks<float> masks(dims);
  std::vector<std::int32_t> tokens = {0, 1, 2, 3, 4, 5, 6, 7};
  PeftParams<float> none;
  none.blocks.resize(dims.n_layers);
  const auto base = model_forward(w, none, tokens, masks, nullptr);
  for (auto method : {PeftMethod::kLora, PeftMethod::kAdapter, PeftMethod::kBitfit}) {
    PeftConfig cfg;
    cfg.method = method;
    cfg.lora_rank = 2;
    cfg.adapter_rank = 2;
    Rng rng(41);
    const auto p = init_peft(w, cfg, rng);
    EXPECT_EQ(model_forward(w, p, tokens, masks, nullptr), base) << peft_method_name(method);
  }
}

TEST(PeftTest, ParameterAccountingAtDefaultConfig) {
  const ModelDims dims;  // desk-scale defaults
  const auto w = init_backbone(dims, BackboneConfig{}, 1);
  const std::size_t backbone = backbone_param_count(dims);
  const std::size_t d = dims.d_model, f = dims.d_ff;
  for (auto method : {PeftMethod::kLora, PeftMethod::kAdapter, PeftMethod::kBitfit}) {
    PeftConfig cfg;
    cfg.method = method;
    Rng rng(2);
    const auto p = init_peft(w, cfg, rng);
    std::size_t expected = 0;
    if (method == PeftMethod::kLora) {
      expected = dims.n_layers * cfg.lora_rank * ((d + d) + (d + d) + (d + f) + (f + d));
    } else if (method == PeftMethod::kAdapter) {
      expected = dims.n_layers * 2 * (2 * d * cfg.adapter_rank);
    } else {
      expected = dims.n_layers * (5 * d + f);
    }
    EXPECT_EQ(trainable_param_count(p), expected) << peft_method_name(method);
    EXPECT_LT(static_cast<double>(expected), 0.02 * static_cast<double>(backbone)) << peft_method_name(method);
  }
}

TEST(PeftTest, LoraInitialisation) {
  const auto dims = tiny_dims();
  const auto w = init_backbone(dims, random_style(), 50);
  PeftConfig cfg;
  cfg.lora_rank = 2;
  Rng rng(51);
  auto p = init_peft(w, cfg, rng);
  for (auto& ref : trainable_params(p)) {
    if (ref.name.ends_with(".b")) {
      EXPECT_EQ(max_abs(*ref.value), 0.0f) << ref.name;
    } else {
      EXPECT_GT(max_abs(*ref.value), 0.0f) << ref.name;
      EXPECT_LT(max_abs(*ref.value), 0.2f) << ref.name;
    }
  }
  cfg.lora_rank = 8;
  EXPECT_THROW(init_peft(w, cfg, rng), ConfigError);
}

TEST(BackboneTest, StructuredInitIsDeterministicAndHashed) {
  ModelDims dims;
  dims.d_model = 64;
  dims.d_ff = 128;
  dims.seq_len = 64;
  dims.n_layers = 2;
  const auto a = init_backbone(dims, BackboneConfig{}, 9);
  const auto b = init_backbone(dims, BackboneConfig{}, 9);
  const auto c = init_backbone(dims, BackboneConfig{}, 10);
  EXPECT_EQ(frozen_digest(a), frozen_digest(b));
  EXPECT_NE(frozen_digest(a), frozen_digest(c));
  EXPECT_EQ(frozen_digest(a).size(), 64u);
  dims.d_model = 16;
  dims.n_heads = 2;
  EXPECT_THROW(init_backbone(dims, BackboneConfig{}, 1), ConfigError);
}

}  // namespace
}  // namespace shadowtune
