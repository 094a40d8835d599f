// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Manual backward pass over the caches written by model.hpp. Gradients are
// produced only for trainable PEFT tensors; inactive neuron blocks and
// attention blocks are never visited.

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>

#include "shadowtune/model.hpp"

namespace shadowtune {

/// Trainable-parameter name -> gradient.
template <typename T>
class GradientSet {
 public:
  /// Adds `g` into the entry for `name`, creating it when absent.
  void accumulate(const std::string& name, const BasicTensor<T>& g, T factor = T(1));
  void accumulate(const GradientSet& other, T factor = T(1));
  void scale(T factor);

  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  const BasicTensor<T>& at(const std::string& name) const;
  std::size_t size() const { return grads_.size(); }
  const std::map<std::string, BasicTensor<T>>& entries() const { return grads_; }

  bool all_finite() const;
  /// Largest elementwise difference; ConfigError when the name sets differ.
  T max_abs_diff(const GradientSet& other) const;

  /// Zero-filled entries for every trainable tensor of `peft`.
  static GradientSet zeros_like(PeftParams<T>& peft);

 private:
  std::map<std::string, BasicTensor<T>> grads_;
};

template <typename T>
struct MlpBackward {
  BasicTensor<T> grad_input;      // dL/dx, s x d
  NeuronActivations<T> grad_z;    // dL/dz on the active columns
};

/// Backward through mlp_forward. `prefix` names the layer ("layer0.").
/// Throws ConfigError when `mask` differs from the cached one.
template <typename T>
MlpBackward<T> mlp_backward(const BasicTensor<T>& grad_out, const MlpCache<T>& cache, const NeuronBlockMask& mask,
                            const BlockWeights<T>& w, const BlockPeft<T>& p, const std::string& prefix,
                            GradientSet<T>& grads);

/// Backward through mha_forward; returns dL/dx (empty when `need_input_grad`
/// is false). Throws ConfigError when `layout` is not the cached one.
template <typename T>
BasicTensor<T> mha_backward(const BasicTensor<T>& grad_out, const AttentionCache<T>& cache,
                            const CombinedLayout& layout, const BlockWeights<T>& w, const BlockPeft<T>& p,
                            const ModelDims& dims, const std::string& prefix, GradientSet<T>& grads,
                            bool need_input_grad = true);

template <typename T>
BasicTensor<T> adapter_backward(const BasicTensor<T>& grad_out, const AdapterCache<T>& cache,
                                const AdapterLayer<T>& adapter, const std::string& name, GradientSet<T>& grads);

template <typename T>
BasicTensor<T> layer_norm_backward(const BasicTensor<T>& grad_out, const LayerNormCache<T>& cache,
                                   const BasicTensor<T>& gain);

template <typename T>
BasicTensor<T> block_backward(const BasicTensor<T>& grad_out, const BlockCache<T>& cache, const BlockWeights<T>& w,
                              const BlockPeft<T>& p, const ModelDims& dims, std::size_t layer, GradientSet<T>& grads,
                              bool need_input_grad = true);

/// Gradients of the mean cross-entropy for one sequence, with an entry for
/// every trainable tensor.
template <typename T>
GradientSet<T> model_backward(const FrozenWeights<T>& w, PeftParams<T>& p, const ModelCache<T>& cache,
                              std::span<const std::int32_t> targets);

/// Central differences on sampled coordinates of `param` against `analytic`.
/// `loss` is re-evaluated after each in-place perturbation. Returns the max
/// of |fd - an| / max(|fd|, |an|, 1e-8). Throws ConfigError for eps outside
/// [1e-5, 1e-2] and NumericError for a non-finite loss.
double finite_diff_check(std::span<double> param, std::span<const double> analytic,
                         const std::function<double()>& loss, double eps, std::size_t max_coords = 64,
                         std::uint64_t seed = 0);

/// Finite-difference check of one named trainable tensor of the model on the
/// 64-bit path. Frozen or unknown names throw ConfigError.
double finite_diff_check(const std::string& param_name, const FrozenWeights<double>& w, PeftParams<double>& p,
                         std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                         MaskProvider<double>& masks, double eps, std::size_t max_coords = 64,
                         std::uint64_t seed = 0);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::map<std::string, BasicTensor<T>> m;
  std::map<std::string, BasicTensor<T>> v;
  std::size_t step = 0;
};

/// One Adam update of every trainable tensor. `grads` must name exactly the
/// trainable set (ConfigError otherwise).
template <typename T>
void optimizer_step(PeftParams<T>& peft, AdamState<T>& state, const GradientSet<T>& grads, const AdamConfig& config);

}  // namespace shadowtune
