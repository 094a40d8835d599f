// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shadowtune/error.hpp"

namespace shadowtune {

namespace {

std::size_t slot_index(LinearSlot slot) { return static_cast<std::size_t>(slot); }

std::string lora_name(const std::string& prefix, LinearSlot slot) {
  return prefix + "lora." + slot_name(slot);
}

std::string bias_name(const std::string& prefix, LinearSlot slot) { return prefix + "bias." + slot_name(slot); }

/// Backward of z = ... + s (x Aᵀ) Bᵀ for a dense input; adds s (g B) A into dx when given.
template <typename T>
void lora_backward(const BasicTensor<T>& g, const BasicTensor<T>& x, const BasicTensor<T>& xa,
                   const LoraAdapter<T>& lora, const std::string& name, GradientSet<T>& grads, BasicTensor<T>* dx) {
  grads.accumulate(name + ".b", matmul_tn(g, xa), lora.scaling);
  const BasicTensor<T> gb = matmul(g, lora.b);
  grads.accumulate(name + ".a", matmul_tn(gb, x), lora.scaling);
  if (dx != nullptr) add_inplace(*dx, matmul(gb, lora.a), lora.scaling);
}

}  // namespace

// ---------------------------------------------------------------------------
// GradientSet

template <typename T>
void GradientSet<T>::accumulate(const std::string& name, const BasicTensor<T>& g, T factor) {
  auto it = grads_.find(name);
  if (it == grads_.end()) {
    BasicTensor<T> copy = g;
    if (factor != T(1))
      for (auto& v : copy.storage()) v *= factor;
    grads_.emplace(name, std::move(copy));
    return;
  }
  if (it->second.shape() != g.shape()) throw ShapeError("gradient shape mismatch for " + name);
  add_inplace(it->second, g, factor);
}

template <typename T>
void GradientSet<T>::accumulate(const GradientSet& other, T factor) {
  for (const auto& [name, g] : other.grads_) accumulate(name, g, factor);
}

template <typename T>
void GradientSet<T>::scale(T factor) {
  for (auto& [name, g] : grads_)
    for (auto& v : g.storage()) v *= factor;
}

template <typename T>
const BasicTensor<T>& GradientSet<T>::at(const std::string& name) const {
  auto it = grads_.find(name);
  if (it == grads_.end()) throw ConfigError("no gradient for '" + name + "'");
  return it->second;
}

template <typename T>
bool GradientSet<T>::all_finite() const {
  return std::all_of(grads_.begin(), grads_.end(), [](const auto& kv) { return shadowtune::all_finite(kv.second); });
}

template <typename T>
T GradientSet<T>::max_abs_diff(const GradientSet& other) const {
  if (grads_.size() != other.grads_.size()) throw ConfigError("gradient sets name different parameters");
  T worst = 0;
  for (const auto& [name, g] : grads_) worst = std::max(worst, shadowtune::max_abs_diff(g, other.at(name)));
  return worst;
}

template <typename T>
GradientSet<T> GradientSet<T>::zeros_like(PeftParams<T>& peft) {
  GradientSet out;
  for (const auto& ref : trainable_params(peft)) out.grads_.emplace(ref.name, BasicTensor<T>(ref.value->shape()));
  return out;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
MlpBackward<T> mlp_backward(const BasicTensor<T>& grad_out, const MlpCache<T>& cache, const NeuronBlockMask& mask,
                            const BlockWeights<T>& w, const BlockPeft<T>& p, const std::string& prefix,
                            GradientSet<T>& grads) {
  if (!(mask == cache.mask)) throw ConfigError("mlp_backward: mask differs from the forward mask");
  if (grad_out.rows() != cache.x.rows() || grad_out.cols() != w.mlp.w2.cols()) {
    throw ShapeError("mlp_backward: gradient shape does not match the cached forward");
  }
  const ActiveNeuronSet& set = cache.z.set;
  const std::size_t s = grad_out.rows(), width = set.width();

  if (p.bias) grads.accumulate(bias_name(prefix, LinearSlot::kDown), column_sums(grad_out));

  NeuronActivations<T> dh = neuron_matmul_bwd_hidden(grad_out, w.mlp.w2, set);
  if (const auto& down = p.lora[slot_index(LinearSlot::kDown)]) {
    const std::string name = lora_name(prefix, LinearSlot::kDown);
    grads.accumulate(name + ".b", matmul_tn(grad_out, cache.lora_ha_down), down->scaling);
    const BasicTensor<T> gb = matmul(grad_out, down->b);  // s x r
    // dA[q, c] = s * sum_t gb[t, q] h[t, p(c)], zero for inactive columns.
    const BasicTensor<T> packed = matmul_tn(gb, cache.h.values);  // r x width
    BasicTensor<T> da(down->a.shape());
    for (std::size_t i = 0; i < set.blocks.size(); ++i)
      for (std::size_t j = 0; j < set.block_width(i); ++j)
        for (std::size_t q = 0; q < da.rows(); ++q) da(q, set.block_begin(i) + j) = packed(q, set.offsets[i] + j);
    grads.accumulate(name + ".a", da, down->scaling);
    // dh += s * gb * A[:, active]
    BasicTensor<T> a_active({da.rows(), width});
    for (std::size_t i = 0; i < set.blocks.size(); ++i)
      for (std::size_t j = 0; j < set.block_width(i); ++j)
        for (std::size_t q = 0; q < da.rows(); ++q) a_active(q, set.offsets[i] + j) = down->a(q, set.block_begin(i) + j);
    add_inplace(dh.values, matmul(gb, a_active), down->scaling);
  }

  NeuronActivations<T> dz{std::move(dh.values), set};
  const T* pz = cache.z.values.data().data();
  T* pdz = dz.values.data().data();
  for (std::size_t i = 0; i < s * width; ++i)
    if (!(pz[i] > T(0))) pdz[i] = T(0);

  if (p.bias) {
    const BasicTensor<T> packed = column_sums(dz.values);
    BasicTensor<T> db({set.d_ff});
    for (std::size_t i = 0; i < set.blocks.size(); ++i)
      for (std::size_t j = 0; j < set.block_width(i); ++j) db[set.block_begin(i) + j] = packed[set.offsets[i] + j];
    grads.accumulate(bias_name(prefix, LinearSlot::kUp), db);
  }

  BasicTensor<T> dx = neuron_matmul_bwd_input(dz, w.mlp.w1);
  if (const auto& up = p.lora[slot_index(LinearSlot::kUp)]) {
    const std::string name = lora_name(prefix, LinearSlot::kUp);
    // dB rows of inactive neurons stay exactly zero.
    const BasicTensor<T> packed = matmul_tn(dz.values, cache.lora_xa_up);  // width x r
    BasicTensor<T> db(up->b.shape());
    for (std::size_t i = 0; i < set.blocks.size(); ++i) {
      for (std::size_t j = 0; j < set.block_width(i); ++j) {
        const auto src = packed.row(set.offsets[i] + j);
        std::copy(src.begin(), src.end(), db.row(set.block_begin(i) + j).begin());
      }
    }
    grads.accumulate(name + ".b", db, up->scaling);
    BasicTensor<T> b_active({width, up->b.cols()});
    for (std::size_t i = 0; i < set.blocks.size(); ++i) {
      for (std::size_t j = 0; j < set.block_width(i); ++j) {
        const auto src = up->b.row(set.block_begin(i) + j);
        std::copy(src.begin(), src.end(), b_active.row(set.offsets[i] + j).begin());
      }
    }
    const BasicTensor<T> gb = matmul(dz.values, b_active);  // s x r
    grads.accumulate(name + ".a", matmul_tn(gb, cache.x), up->scaling);
    add_inplace(dx, matmul(gb, up->a), up->scaling);
  }
  return {std::move(dx), std::move(dz)};
}

template <typename T>
BasicTensor<T> mha_backward(const BasicTensor<T>& grad_out, const AttentionCache<T>& cache,
                            const CombinedLayout& layout, const BlockWeights<T>& w, const BlockPeft<T>& p,
                            const ModelDims& dims, const std::string& prefix, GradientSet<T>& grads,
                            bool need_input_grad) {
  if (!(layout == cache.layout) && !(dims.causal && causal_restrict(layout) == cache.layout)) {
    throw ConfigError("mha_backward: layout differs from the forward layout");
  }
  if (grad_out.rows() != dims.seq_len || grad_out.cols() != dims.d_model) {
    throw ShapeError("mha_backward: gradient must be s x d");
  }
  const std::size_t hd = dims.head_dim();
  const T score_scale = T(1) / std::sqrt(static_cast<T>(hd));

  if (p.bias) grads.accumulate(bias_name(prefix, LinearSlot::kO), column_sums(grad_out));
  BasicTensor<T> dctx = matmul_nt(grad_out, w.wo);
  if (const auto& lo = p.lora[slot_index(LinearSlot::kO)]) {
    lora_backward(grad_out, cache.ctx, cache.lora_xa[3], *lo, lora_name(prefix, LinearSlot::kO), grads, &dctx);
  }

  BasicTensor<T> dq({dims.seq_len, dims.d_model}), dk({dims.seq_len, dims.d_model}), dv({dims.seq_len, dims.d_model});
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    const auto& probs = cache.probs.at(h);
    const auto dctx_h = slice_cols(dctx, h * hd, (h + 1) * hd);
    const auto qh = slice_cols(cache.q, h * hd, (h + 1) * hd);
    const auto kh = slice_cols(cache.k, h * hd, (h + 1) * hd);
    const auto vh = slice_cols(cache.v, h * hd, (h + 1) * hd);
    const auto dp = sdd(dctx_h, vh, probs.blocks(), dims.attn_blk, T(1));
    set_cols(dv, h * hd, dsd_transposed(probs, dctx_h));
    const auto ds = sparse_softmax_backward(probs, dp);
    set_cols(dq, h * hd, scale(dsd(ds, kh), score_scale));
    set_cols(dk, h * hd, scale(dsd_transposed(ds, qh), score_scale));
  }

  BasicTensor<T> dx;
  if (need_input_grad) dx = BasicTensor<T>({dims.seq_len, dims.d_model});
  const std::array<std::pair<LinearSlot, const BasicTensor<T>*>, 3> proj = {
      {{LinearSlot::kQ, &dq}, {LinearSlot::kK, &dk}, {LinearSlot::kV, &dv}}};
  for (std::size_t i = 0; i < proj.size(); ++i) {
    const auto [slot, g] = proj[i];
    if (p.bias) grads.accumulate(bias_name(prefix, slot), column_sums(*g));
    if (const auto& lora = p.lora[slot_index(slot)]) {
      lora_backward(*g, cache.x, cache.lora_xa[i], *lora, lora_name(prefix, slot), grads,
                    need_input_grad ? &dx : nullptr);
    }
    if (need_input_grad) add_inplace(dx, matmul_nt(*g, w.attn_weight(slot)));
  }
  return dx;
}

template <typename T>
BasicTensor<T> adapter_backward(const BasicTensor<T>& grad_out, const AdapterCache<T>& cache,
                                const AdapterLayer<T>& adapter, const std::string& name, GradientSet<T>& grads) {
  grads.accumulate(name + ".up", matmul_tn(cache.hidden, grad_out));
  BasicTensor<T> gh = matmul_nt(grad_out, adapter.up);
  for (std::size_t i = 0; i < gh.size(); ++i)
    if (!(cache.hidden[i] > T(0))) gh[i] = T(0);
  grads.accumulate(name + ".down", matmul_tn(cache.input, gh));
  BasicTensor<T> dx = grad_out;
  add_inplace(dx, matmul_nt(gh, adapter.down));
  return dx;
}

template <typename T>
BasicTensor<T> layer_norm_backward(const BasicTensor<T>& grad_out, const LayerNormCache<T>& cache,
                                   const BasicTensor<T>& gain) {
  const std::size_t s = grad_out.rows(), d = grad_out.cols();
  if (cache.normed.rows() != s || cache.normed.cols() != d) throw ShapeError("layer_norm_backward: shape mismatch");
  BasicTensor<T> dx({s, d});
  std::vector<T> dn(d);
  for (std::size_t t = 0; t < s; ++t) {
    T mean_dn = 0, mean_dn_n = 0;
    for (std::size_t i = 0; i < d; ++i) {
      dn[i] = grad_out(t, i) * gain[i];
      mean_dn += dn[i];
      mean_dn_n += dn[i] * cache.normed(t, i);
    }
    mean_dn /= static_cast<T>(d);
    mean_dn_n /= static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx(t, i) = cache.rstd[t] * (dn[i] - mean_dn - cache.normed(t, i) * mean_dn_n);
    }
  }
  return dx;
}

template <typename T>
BasicTensor<T> block_backward(const BasicTensor<T>& grad_out, const BlockCache<T>& cache, const BlockWeights<T>& w,
                              const BlockPeft<T>& p, const ModelDims& dims, std::size_t layer, GradientSet<T>& grads,
                              bool need_input_grad) {
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  BasicTensor<T> dy = grad_out;

  BasicTensor<T> gm = grad_out;
  if (p.mlp_adapter) gm = adapter_backward(gm, cache.mlp_adapter, *p.mlp_adapter, prefix + "adapter.mlp", grads);
  const auto mlp = mlp_backward(gm, cache.mlp, cache.mlp.mask, w, p, prefix, grads);
  add_inplace(dy, layer_norm_backward(mlp.grad_input, cache.ln2, w.ln2_gain));

  BasicTensor<T> ga = dy;
  if (p.attn_adapter) ga = adapter_backward(ga, cache.attn_adapter, *p.attn_adapter, prefix + "adapter.attn", grads);
  const auto dxn1 = mha_backward(ga, cache.attn, cache.attn.layout, w, p, dims, prefix, grads, need_input_grad);
  if (!need_input_grad) return {};
  add_inplace(dy, layer_norm_backward(dxn1, cache.ln1, w.ln1_gain));
  return dy;
}

template <typename T>
GradientSet<T> model_backward(const FrozenWeights<T>& w, PeftParams<T>& p, const ModelCache<T>& cache,
                              std::span<const std::int32_t> targets) {
  if (cache.blocks.size() != w.blocks.size()) throw ConfigError("model_backward: cache does not match the model");
  GradientSet<T> grads = GradientSet<T>::zeros_like(p);
  const BasicTensor<T> dlogits = loss_backward(cache.logits, targets);
  BasicTensor<T> dx = layer_norm_backward(scale(matmul(dlogits, w.embedding), w.logit_scale), cache.lnf, w.lnf_gain);
  for (std::size_t l = w.blocks.size(); l-- > 0;) {
    dx = block_backward(dx, cache.blocks[l], w.blocks[l], p.blocks[l], w.dims, l, grads, l > 0);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Gradient checks

double finite_diff_check(std::span<double> param, std::span<const double> analytic,
                         const std::function<double()>& loss, double eps, std::size_t max_coords,
                         std::uint64_t seed) {
  if (!(eps >= 1e-5 && eps <= 1e-2)) throw ConfigError("finite_diff_check: eps must lie in [1e-5, 1e-2]");
  if (param.size() != analytic.size()) throw ShapeError("finite_diff_check: analytic gradient size mismatch");
  std::vector<std::size_t> coords(param.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (coords.size() > max_coords) {
    Rng rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng.engine());
    coords.resize(max_coords);
  }
  auto eval = [&] {
    const double v = loss();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
    return v;
  };
  double worst = 0;
  for (std::size_t i : coords) {
    const double orig = param[i];
    param[i] = orig + eps;
    const double up = eval();
    param[i] = orig - eps;
    const double down = eval();
    param[i] = orig;
    const double fd = (up - down) / (2 * eps);
    const double an = analytic[i];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

double finite_diff_check(const std::string& param_name, const FrozenWeights<double>& w, PeftParams<double>& p,
                         std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                         MaskProvider<double>& masks, double eps, std::size_t max_coords, std::uint64_t seed) {
  BasicTensor<double>* param = nullptr;
  for (auto& ref : trainable_params(p))
    if (ref.name == param_name) param = ref.value;
  if (param == nullptr) throw ConfigError("'" + param_name + "' is not a trainable parameter");

  ModelCache<double> cache;
  model_forward(w, p, inputs, masks, &cache);
  const GradientSet<double> grads = model_backward(w, p, cache, targets);
  const BasicTensor<double> analytic = grads.at(param_name);
  auto loss = [&] { return loss_forward(model_forward<double>(w, p, inputs, masks, nullptr), targets); };
  return finite_diff_check(param->data(), analytic.data(), loss, eps, max_coords, seed);
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
void optimizer_step(PeftParams<T>& peft, AdamState<T>& state, const GradientSet<T>& grads, const AdamConfig& config) {
  auto params = trainable_params(peft);
  if (params.size() != grads.size()) throw ConfigError("optimizer_step: gradients do not cover the trainable set");
  for (const auto& ref : params) {
    if (!grads.contains(ref.name)) throw ConfigError("optimizer_step: missing gradient for " + ref.name);
    if (grads.at(ref.name).shape() != ref.value->shape()) throw ShapeError("optimizer_step: shape mismatch for " + ref.name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (const auto& ref : params) {
    const auto& g = grads.at(ref.name);
    auto& m = state.m.try_emplace(ref.name, BasicTensor<T>(g.shape())).first->second;
    auto& v = state.v.try_emplace(ref.name, BasicTensor<T>(g.shape())).first->second;
    auto& x = *ref.value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = config.beta1 * static_cast<double>(m[i]) + (1.0 - config.beta1) * gi;
      const double vi = config.beta2 * static_cast<double>(v[i]) + (1.0 - config.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = config.lr * (mi / bc1) / (std::sqrt(vi / bc2) + config.eps);
      x[i] = static_cast<T>(static_cast<double>(x[i]) - update);
    }
  }
}

#define SHADOWTUNE_INSTANTIATE_AUTOGRAD(T)                                                                         \
  template class GradientSet<T>;                                                                                   \
  template MlpBackward<T> mlp_backward(const BasicTensor<T>&, const MlpCache<T>&, const NeuronBlockMask&,          \
                                       const BlockWeights<T>&, const BlockPeft<T>&, const std::string&,            \
                                       GradientSet<T>&);                                                           \
  template BasicTensor<T> mha_backward(const BasicTensor<T>&, const AttentionCache<T>&, const CombinedLayout&,     \
                                       const BlockWeights<T>&, const BlockPeft<T>&, const ModelDims&,              \
                                       const std::string&, GradientSet<T>&, bool);                                 \
  template BasicTensor<T> adapter_backward(const BasicTensor<T>&, const AdapterCache<T>&, const AdapterLayer<T>&,  \
                                           const std::string&, GradientSet<T>&);                                   \
  template BasicTensor<T> layer_norm_backward(const BasicTensor<T>&, const LayerNormCache<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> block_backward(const BasicTensor<T>&, const BlockCache<T>&, const BlockWeights<T>&,      \
                                         const BlockPeft<T>&, const ModelDims&, std::size_t, GradientSet<T>&, bool); \
  template GradientSet<T> model_backward(const FrozenWeights<T>&, PeftParams<T>&, const ModelCache<T>&,            \
                                         std::span<const std::int32_t>);                                           \
  template void optimizer_step(PeftParams<T>&, AdamState<T>&, const GradientSet<T>&, const AdamConfig&);

SHADOWTUNE_INSTANTIATE_AUTOGRAD(float)
SHADOWTUNE_INSTANTIATE_AUTOGRAD(double)

#undef SHADOWTUNE_INSTANTIATE_AUTOGRAD

}  // namespace shadowtune
