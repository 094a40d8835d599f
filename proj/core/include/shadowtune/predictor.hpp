// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Low-rank runtime predictors for per-head attention patterns and MLP
// neuron-block masks, their offline training, and cost accounting.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "shadowtune/container.hpp"
#include "shadowtune/model.hpp"

namespace shadowtune {

/// ceil(sqrt(s)).
std::size_t downsampled_rows(std::size_t s);
/// Row indices kept by downsample: floor(k * s / ceil(sqrt(s))).
std::vector<std::size_t> downsample_indices(std::size_t s);
Tensor downsample(const Tensor& x);

/// One (Ŵ_Q, Ŵ_K) pair per head, each d x r.
struct AttnPredictorParams {
  std::vector<Tensor> wq;
  std::vector<Tensor> wk;

  std::size_t n_heads() const { return wq.size(); }
  std::size_t rank() const { return wq.empty() ? 0 : wq.front().cols(); }
};

/// Ŝ_mlp = X Ŵ_A + bias; Ŵ_A is d x n_blk.
struct MlpPredictorParams {
  Tensor wa;
  Tensor bias;  // n_blk
};

struct LayerPredictor {
  AttnPredictorParams attn;
  MlpPredictorParams mlp;
};

/// Default predictor rank: max(4, d / 16).
std::size_t default_predictor_rank(std::size_t d_model);

AttnPredictorParams init_attn_predictor(std::size_t d, std::size_t n_heads, std::size_t rank, Rng& rng);
MlpPredictorParams init_mlp_predictor(std::size_t d, std::size_t n_blk);

/// Ŝ = (X̃ Ŵ_Q)(X̃ Ŵ_K)ᵀ for an already downsampled X̃.
Tensor approx_attention_scores(const Tensor& x_tilde, const Tensor& wq, const Tensor& wk);

/// Per query row, entries >= rel_threshold * (row max) (0/1). A row with no
/// positive entry keeps only entries equal to its max. Later query tiles of a
/// causal head spread their mass over more key tiles, so a single global peak
/// would leave them almost empty.
Tensor binarize_relative(const Tensor& scores, double rel_threshold);

/// Nearest-cell resampling of a square binary mask onto a grid x grid mask.
Tensor upsample_mask(const Tensor& mask, std::size_t grid);

/// Per head: binarize each batch item, OR over the batch, upsample to the
/// pool grid and categorize with coverage tau_pred.
HeadPatternAssignment predict_attention_patterns(std::span<const Tensor> batch, const AttnPredictorParams& params,
                                                 double rel_threshold, double tau_pred, const PatternPool& pool);

/// Same as above from precomputed Ŝ: scores[item][head].
HeadPatternAssignment categorize_predicted_scores(const std::vector<std::vector<Tensor>>& scores,
                                                  double rel_threshold, double tau_pred, const PatternPool& pool);

Tensor approx_mlp_scores(const Tensor& x, const MlpPredictorParams& params);

/// Block active iff Ŝ > threshold for any token of any batch item.
NeuronBlockMask predict_mlp_mask(std::span<const Tensor> scores, double threshold);

struct RecallPrecision {
  double recall = 1;
  double precision = 1;
};
RecallPrecision eval_recall_precision(const NeuronBlockMask& predicted, const NeuronBlockMask& truth);

struct PredictorCost {
  std::uint64_t attn = 0;
  std::uint64_t mlp = 0;
};
/// cost_attn = 2 sqrt(s) d r + s r; cost_mlp = s d r + s (MAC units).
/// Requires positive arguments; sqrt(s) is rounded up.
PredictorCost predictor_cost_flops(std::size_t s, std::size_t d, std::size_t r);

struct PredictorTrainConfig {
  double noise_std = 0.05;
  double recall_weight = 4.0;  // λ, weight on false negatives
  std::size_t epochs = 200;
  double lr = 1e-3;
  double attn_threshold = 0.5;  // relative to each query row's max
  double mlp_threshold = 0.0;   // on the logit scale
  double tau_pred = 0.9;
  std::size_t rank = 0;         // 0: default_predictor_rank
  std::uint64_t seed = 0;

  void validate() const;
};

/// One training example for a head-set: downsampled-grid target per head.
struct AttnSample {
  Tensor x;                     // s x d normalized attention input
  std::vector<Tensor> targets;  // per head, g x g
};

struct MlpSample {
  Tensor x;       // s x d normalized MLP input
  Tensor labels;  // s x n_blk, 1 where any neuron of the block is active
};

/// Row-pooled exact scores on the downsampled grid:
/// target[a][b] = mean over query rows of tile a of the mass in key tile b.
Tensor pool_scores(const Tensor& scores);

/// Per-token block labels from post-ReLU (or pre-activation) values.
Tensor block_labels(const Tensor& activations, std::size_t blk_size);

struct TrainResult {
  double initial_loss = 0;
  double final_loss = 0;
};

/// MSE distillation on noise-augmented downsampled inputs, Adam, one step
/// per sample per epoch. NumericError on a non-finite loss.
TrainResult train_attn_predictor(AttnPredictorParams& params, std::span<const AttnSample> samples,
                                 const PredictorTrainConfig& cfg);

/// Recall-weighted logistic loss, Adam, one step per sample per epoch.
TrainResult train_mlp_predictor(MlpPredictorParams& params, std::span<const MlpSample> samples,
                                const PredictorTrainConfig& cfg);

double attn_distill_loss(const AttnPredictorParams& params, std::span<const AttnSample> samples);
double mlp_weighted_loss(const MlpPredictorParams& params, std::span<const MlpSample> samples, double recall_weight);

/// Fraction of (sample, head) pairs whose predicted pattern equals the one
/// categorized from the target grid.
double attn_pattern_agreement(const AttnPredictorParams& params, std::span<const AttnSample> samples,
                              double rel_threshold, double tau_pred, const PatternPool& pool);

/// Mean sequence-level recall/precision over samples (mask = OR over tokens).
RecallPrecision mlp_sequence_metrics(const MlpPredictorParams& params, std::span<const MlpSample> samples,
                                     double threshold);
/// Token-level recall/precision pooled over every (token, block) entry.
RecallPrecision mlp_token_metrics(const MlpPredictorParams& params, std::span<const MlpSample> samples,
                                  double threshold);

/// Predictors for every layer plus the thresholds used at runtime.
struct PredictorSet {
  std::vector<LayerPredictor> layers;
  double attn_threshold = 0.5;
  double mlp_threshold = 0.0;
  double tau_pred = 0.9;

  void save(TensorArchive& archive) const;
  static PredictorSet load(const TensorArchive& archive);
};

/// Mask provider backed by trained predictors. Time spent predicting is
/// accumulated separately so callers can attribute it.
class PredictedMasks final : public MaskProvider<float> {
 public:
  PredictedMasks(const PredictorSet& predictors, const PatternPool& pool);

  CombinedLayout attention_layout(std::size_t layer, std::span<const Tensor> normed_inputs) override;
  NeuronBlockMask mlp_mask(std::size_t layer, std::span<const Tensor> normed_inputs) override;

  double prediction_seconds() const { return seconds_; }
  void reset_timer() { seconds_ = 0; }

 private:
  const PredictorSet& predictors_;
  const PatternPool& pool_;
  double seconds_ = 0;
};

/// Synthetic benchmarks whose targets are exactly representable by the
/// predictor families (rank-r bilinear scores, linear block logits).
struct SyntheticAttnBenchmark {
  std::vector<AttnSample> train, test;
};
SyntheticAttnBenchmark make_realizable_attn_benchmark(std::size_t s, std::size_t d, std::size_t n_heads,
                                                      std::size_t rank, std::size_t n_train, std::size_t n_test,
                                                      std::uint64_t seed);

struct SyntheticMlpBenchmark {
  std::vector<MlpSample> train, test;
  Tensor teacher_w;  // d x n_blk
  Tensor teacher_b;  // n_blk

  /// Ground-truth labels for arbitrary inputs under the teacher.
  Tensor labels_for(const Tensor& x) const;
};
SyntheticMlpBenchmark make_realizable_mlp_benchmark(std::size_t s, std::size_t d, std::size_t n_blk,
                                                    std::size_t n_train, std::size_t n_test, std::uint64_t seed);

}  // namespace shadowtune
