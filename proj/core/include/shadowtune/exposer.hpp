// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Ground-truth sparsity from exact activations: per-head pattern selection by
// attention-mass coverage, neuron-block importance filtering, and the
// per-layer sparsity report.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "shadowtune/model.hpp"

namespace shadowtune {

/// Sequence-level active set: OR over per-token active vectors.
/// ConfigError on an empty list, ShapeError on length mismatch.
NeuronBlockMask shadowy_combine(std::span<const NeuronBlockMask> per_token_active);

/// Fraction of inactive entries. ConfigError when empty.
double sparsity_ratio(const NeuronBlockMask& mask);
double sparsity_ratio(std::span<const BlockIndex> active, std::size_t grid);

/// Dense softmax(Q_h K_hᵀ / sqrt(head_dim)) per head for a normalized block
/// input (causally masked when dims.causal).
template <typename T>
std::vector<BasicTensor<T>> exact_attention_scores(const BasicTensor<T>& xn, const BlockWeights<T>& w,
                                                   const BlockPeft<T>& p, const ModelDims& dims);

/// Dense MLP pre-activations z = xn W1 + b1 (+ LoRA), s x d_ff.
template <typename T>
BasicTensor<T> exact_preactivations(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                                    const ModelDims& dims);

/// grid x grid attention mass, summed per blk x blk tile. `into` accumulates
/// when non-empty.
template <typename T>
void accumulate_block_mass(const BasicTensor<T>& scores, std::size_t blk, BasicTensor<double>& into);

/// Fraction of the total mass inside `table`'s blocks (1 when the mass is zero).
double pattern_coverage(const BasicTensor<double>& mass, const LayoutTable& table);

/// Fewest-block pattern covering at least `tau` of the mass; ties go to the
/// earlier pool entry; Dense when nothing else qualifies. ConfigError unless
/// tau is in (0, 1].
std::size_t select_pattern(const BasicTensor<double>& mass, const PatternPool& pool, double tau);

template <typename T>
std::size_t select_head_pattern(const BasicTensor<T>& scores, const PatternPool& pool, double tau, std::size_t blk);

/// importance[b] = max over tokens and neurons of block b of relu(z).
template <typename T>
std::vector<double> block_importance(const BasicTensor<T>& z, std::size_t blk_size);

/// Block active iff imp[b] > theta * max(imp); all inactive when max is 0.
NeuronBlockMask filter_neuron_blocks(std::span<const double> importance, double theta);

/// Per-head choice and its uniform union for one layer.
struct ExposedAttention {
  HeadPatternAssignment heads;
  CombinedLayout head_layout;
  CombinedLayout union_layout;  // same block set (OR over heads) for every head
};

ExposedAttention expose_attention(std::span<const BasicTensor<double>> head_mass, const PatternPool& pool, double tau);

struct ExposerOptions {
  double tau = 0.95;
  double theta = 0.1;
  /// false: record the exposed masks but run dense.
  bool apply = true;
  /// Attention uses the uniform union over heads and the MLP keeps every
  /// block with any positive activation (the "shadowy" baseline).
  bool uniform_union = false;
};

struct ExposedLayer {
  ExposedAttention attention;
  std::vector<double> importance;
};

/// Mask provider that runs the exact computation for each batch and derives
/// masks from it. Holds references to the weights and PEFT state.
template <typename T>
class ExposerMasks final : public MaskProvider<T> {
 public:
  ExposerMasks(const FrozenWeights<T>& weights, const PeftParams<T>& peft, const PatternPool& pool,
               ExposerOptions options);

  CombinedLayout attention_layout(std::size_t layer, std::span<const BasicTensor<T>> normed_inputs) override;
  NeuronBlockMask mlp_mask(std::size_t layer, std::span<const BasicTensor<T>> normed_inputs) override;

  /// Latest exposure per layer.
  const std::vector<ExposedLayer>& layers() const { return layers_; }

 private:
  const FrozenWeights<T>& weights_;
  const PeftParams<T>& peft_;
  const PatternPool& pool_;
  ExposerOptions options_;
  std::vector<ExposedLayer> layers_;
};

struct SparsityRow {
  std::size_t layer = 0;
  std::string component;  // "attention" | "mlp"
  std::string method;     // "shadowy" | "head-specific" | "threshold"
  double theta = 0;       // θ for mlp rows, τ for attention rows
  double sparsity = 0;
};

/// Dense forward over `batch`, exposing every layer. Rows per layer:
/// attention shadowy and head-specific, mlp shadowy (θ = 0), then one mlp
/// threshold row per θ in `thetas`.
std::vector<SparsityRow> layer_sparsity_report(const FrozenWeights<float>& w, const PeftParams<float>& p,
                                               const std::vector<std::vector<std::int32_t>>& batch,
                                               std::span<const double> thetas, double tau, const PatternPool& pool);

/// CSV with header layer,component,method,theta,sparsity_ratio.
std::string sparsity_csv(std::span<const SparsityRow> rows);

}  // namespace shadowtune
