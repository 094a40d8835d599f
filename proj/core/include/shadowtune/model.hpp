// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Transformer block with frozen backbone weights and PEFT adapters (LoRA,
// bottleneck adapters, BitFit). Forward passes consume per-layer attention
// layouts and neuron-block masks and fill caches for the hand-written
// backward pass in autograd.hpp.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "shadowtune/masks.hpp"
#include "shadowtune/rng.hpp"
#include "shadowtune/sparse_ops.hpp"
#include "shadowtune/tensor.hpp"

namespace shadowtune {

struct ModelDims {
  std::size_t d_model = 256;
  std::size_t n_heads = 4;
  std::size_t d_ff = 1024;
  std::size_t seq_len = 256;
  std::size_t blk_size = 16;   // neurons per MLP block
  std::size_t attn_blk = 16;   // tokens per attention block side
  std::size_t vocab = 256;
  std::size_t n_layers = 4;
  bool causal = true;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t n_blk() const { return n_neuron_blocks(d_ff, blk_size); }
  std::size_t attn_grid() const { return seq_len / attn_blk; }

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;

  bool operator==(const ModelDims&) const = default;
};

/// Linear layers a LoRA adapter or trainable bias can attach to.
enum class LinearSlot : std::size_t { kQ = 0, kK, kV, kO, kUp, kDown };
inline constexpr std::size_t kLinearSlots = 6;
const char* slot_name(LinearSlot slot);
LinearSlot parse_slot(const std::string& name);

template <typename T>
struct BlockWeights {
  BasicTensor<T> wq, wk, wv, wo;            // d x d, applied as x * W
  std::array<BasicTensor<T>, kLinearSlots> bias;  // per slot; up is d_ff, the rest d
  LayeredWeights<T> mlp;                    // w1 column-major, w2 row-major
  BasicTensor<T> ln1_gain, ln1_shift, ln2_gain, ln2_shift;

  const BasicTensor<T>& attn_weight(LinearSlot slot) const;
};

template <typename T>
struct FrozenWeights {
  ModelDims dims;
  BasicTensor<T> embedding;   // vocab x d, tied with the output projection
  BasicTensor<T> positional;  // seq_len x d
  std::vector<BlockWeights<T>> blocks;
  BasicTensor<T> lnf_gain, lnf_shift;
  T logit_scale = T(1);
};

template <typename U, typename T>
FrozenWeights<U> cast_weights(const FrozenWeights<T>& w);

std::size_t backbone_param_count(const ModelDims& dims);

// ---------------------------------------------------------------------------
// PEFT state

enum class PeftMethod { kLora, kAdapter, kBitfit };
const char* peft_method_name(PeftMethod m);
PeftMethod parse_peft_method(const std::string& name);

struct PeftConfig {
  PeftMethod method = PeftMethod::kLora;
  std::size_t lora_rank = 4;
  double lora_scaling = 1.0;
  double lora_init_std = 0.02;
  std::vector<LinearSlot> lora_targets = {LinearSlot::kQ, LinearSlot::kV, LinearSlot::kUp, LinearSlot::kDown};
  std::size_t adapter_rank = 8;
  double adapter_init_std = 0.02;
};

/// z = x W + scaling * (x Aᵀ) Bᵀ; A is r x d_in, B is d_out x r.
template <typename T>
struct LoraAdapter {
  BasicTensor<T> a;
  BasicTensor<T> b;
  T scaling = T(1);
};

/// y = x + relu(x * down) * up
template <typename T>
struct AdapterLayer {
  BasicTensor<T> down;  // d x r
  BasicTensor<T> up;    // r x d
};

template <typename T>
struct BlockPeft {
  std::array<std::optional<LoraAdapter<T>>, kLinearSlots> lora;
  std::optional<AdapterLayer<T>> attn_adapter;
  std::optional<AdapterLayer<T>> mlp_adapter;
  /// BitFit: trainable copies of the biases, used in place of the frozen ones.
  std::optional<std::array<BasicTensor<T>, kLinearSlots>> bias;
};

template <typename T>
struct PeftParams {
  PeftConfig config;
  std::vector<BlockPeft<T>> blocks;
};

/// LoRA: A ~ N(0, init_std²), B = 0. Adapter: down ~ N(0, init_std²), up = 0.
/// BitFit: copies of the frozen biases.
template <typename T>
PeftParams<T> init_peft(const FrozenWeights<T>& weights, const PeftConfig& config, Rng& rng);

template <typename U, typename T>
PeftParams<U> cast_peft(const PeftParams<T>& p);

template <typename T>
struct ParamRef {
  std::string name;
  BasicTensor<T>* value;
};

/// Trainable tensors in a fixed order, named e.g. "layer0.lora.q.a",
/// "layer1.adapter.mlp.up", "layer2.bias.w1".
template <typename T>
std::vector<ParamRef<T>> trainable_params(PeftParams<T>& peft);
template <typename T>
std::size_t trainable_param_count(const PeftParams<T>& peft);

/// Bias used by the forward pass for `slot`: the BitFit copy when present.
template <typename T>
const BasicTensor<T>& effective_bias(const BlockWeights<T>& w, const BlockPeft<T>& p, LinearSlot slot);

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct LayerNormCache {
  BasicTensor<T> normed;  // (x - mean) * rstd
  std::vector<T> rstd;
};

template <typename T>
struct AttentionCache {
  BasicTensor<T> x;                                // normalized input
  BasicTensor<T> q, k, v;                          // projections, s x d
  std::array<BasicTensor<T>, 4> lora_xa;           // x Aᵀ per attention slot (ctx Aᵀ for o)
  std::vector<BlockSparseMatrix<T>> probs;         // per head
  CombinedLayout layout;                           // after causal restriction
  BasicTensor<T> ctx;                              // concatenated head outputs
};

template <typename T>
struct MlpCache {
  BasicTensor<T> x;            // normalized input
  BasicTensor<T> lora_xa_up;   // x A_upᵀ
  NeuronActivations<T> z;      // pre-activation, active columns only
  NeuronActivations<T> h;      // relu(z)
  BasicTensor<T> lora_ha_down; // h A_downᵀ
  NeuronBlockMask mask;
};

template <typename T>
struct AdapterCache {
  BasicTensor<T> input;
  BasicTensor<T> hidden;  // relu(input * down)
};

template <typename T>
struct BlockCache {
  LayerNormCache<T> ln1;
  AttentionCache<T> attn;
  AdapterCache<T> attn_adapter;
  LayerNormCache<T> ln2;
  MlpCache<T> mlp;
  AdapterCache<T> mlp_adapter;
};

template <typename T>
struct ModelCache {
  std::vector<BlockCache<T>> blocks;
  LayerNormCache<T> lnf;
  BasicTensor<T> logits;
  std::vector<std::int32_t> targets;
};

/// Supplies the sparse patterns for each layer, right before the sublayer
/// that consumes them runs. `normed_inputs` holds the normalized sublayer
/// input of every sequence in the batch; one pattern serves the whole batch.
template <typename T>
class MaskProvider {
 public:
  virtual ~MaskProvider() = default;
  virtual CombinedLayout attention_layout(std::size_t layer, std::span<const BasicTensor<T>> normed_inputs) = 0;
  virtual NeuronBlockMask mlp_mask(std::size_t layer, std::span<const BasicTensor<T>> normed_inputs) = 0;
};

/// Dense patterns everywhere.
template <typename T>
class DenseMasks final : public MaskProvider<T> {
 public:
  explicit DenseMasks(const ModelDims& dims);
  CombinedLayout attention_layout(std::size_t, std::span<const BasicTensor<T>>) override { return layout_; }
  NeuronBlockMask mlp_mask(std::size_t, std::span<const BasicTensor<T>>) override { return mask_; }

 private:
  CombinedLayout layout_;
  NeuronBlockMask mask_;
};

struct LayerMasks {
  CombinedLayout attention;
  NeuronBlockMask mlp;
};

/// Precomputed masks, one entry per layer.
template <typename T>
class FixedMasks final : public MaskProvider<T> {
 public:
  explicit FixedMasks(std::vector<LayerMasks> masks) : masks_(std::move(masks)) {}
  CombinedLayout attention_layout(std::size_t layer, std::span<const BasicTensor<T>>) override {
    return masks_.at(layer).attention;
  }
  NeuronBlockMask mlp_mask(std::size_t layer, std::span<const BasicTensor<T>>) override {
    return masks_.at(layer).mlp;
  }

 private:
  std::vector<LayerMasks> masks_;
};

/// z = x W + bias + scaling * (x Aᵀ) Bᵀ. `bias` and `lora` may be null.
/// When `xa_out` is given it receives x Aᵀ.
template <typename T>
BasicTensor<T> lora_linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const std::type_identity_t<BasicTensor<T>>* bias,
                                   const std::type_identity_t<LoraAdapter<T>>* lora, std::type_identity_t<BasicTensor<T>>* xa_out = nullptr);

template <typename T>
BasicTensor<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& shift,
                                  std::type_identity_t<LayerNormCache<T>>* cache);

/// Q, K or V projection of a normalized input, including bias and LoRA.
template <typename T>
BasicTensor<T> attention_projection(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                                    LinearSlot slot, std::type_identity_t<BasicTensor<T>>* xa_out = nullptr);

/// Multi-head attention over a normalized input. Scores are computed only on
/// the layout's active blocks (restricted to the lower triangle when causal).
template <typename T>
BasicTensor<T> mha_forward(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                           const CombinedLayout& layout, const ModelDims& dims, std::type_identity_t<AttentionCache<T>>* cache);

template <typename T>
BasicTensor<T> mha_forward(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                           const HeadPatternAssignment& patterns, const PatternPool& pool, const ModelDims& dims,
                           std::type_identity_t<AttentionCache<T>>* cache);

/// ReLU MLP over a normalized input; inactive neuron blocks are never touched.
template <typename T>
BasicTensor<T> mlp_forward(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                           const NeuronBlockMask& mask, const ModelDims& dims, std::type_identity_t<MlpCache<T>>* cache);

template <typename T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& x, const AdapterLayer<T>& adapter, std::type_identity_t<AdapterCache<T>>* cache);

/// Pre-norm residual block: y = x + MHA(LN1(x)); out = y + MLP(LN2(y)).
template <typename T>
BasicTensor<T> block_forward(const BasicTensor<T>& x, const BlockWeights<T>& w, const BlockPeft<T>& p,
                             const ModelDims& dims, std::size_t layer, MaskProvider<T>& masks,
                             std::type_identity_t<BlockCache<T>>* cache);

/// Embedding + positional input for `tokens` (length seq_len).
template <typename T>
BasicTensor<T> embed(const FrozenWeights<T>& w, std::span<const std::int32_t> tokens);

/// Logits for every position of `inputs`. Throws ConfigError on bad token ids.
template <typename T>
BasicTensor<T> model_forward(const FrozenWeights<T>& w, const PeftParams<T>& p, std::span<const std::int32_t> inputs,
                             MaskProvider<T>& masks, std::type_identity_t<ModelCache<T>>* cache);

/// Layer-synchronous forward over a batch: every layer's masks are requested
/// once, with all sequences' normalized inputs. `caches`, when given, is
/// resized to the batch.
template <typename T>
std::vector<BasicTensor<T>> model_forward_batch(const FrozenWeights<T>& w, const PeftParams<T>& p,
                                                const std::vector<std::vector<std::int32_t>>& inputs,
                                                MaskProvider<T>& masks,
                                                std::vector<ModelCache<T>>* caches = nullptr);

/// Mean cross-entropy over positions. Throws ConfigError for targets outside the vocabulary.
template <typename T>
T loss_forward(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);

/// d(mean CE)/d(logits).
template <typename T>
BasicTensor<T> loss_backward(const BasicTensor<T>& logits, std::span<const std::int32_t> targets);

}  // namespace shadowtune
