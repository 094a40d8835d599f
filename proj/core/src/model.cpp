// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/model.hpp"

#include <cmath>
#include <string>

#include "shadowtune/error.hpp"

namespace shadowtune {

namespace {

constexpr double kLayerNormEps = 1e-5;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

std::size_t slot_index(LinearSlot slot) { return static_cast<std::size_t>(slot); }

std::pair<std::size_t, std::size_t> slot_dims(LinearSlot slot, const ModelDims& dims) {
  switch (slot) {
    case LinearSlot::kUp:
      return {dims.d_model, dims.d_ff};
    case LinearSlot::kDown:
      return {dims.d_ff, dims.d_model};
    default:
      return {dims.d_model, dims.d_model};
  }
}

/// Packs rows of `m` (d_ff x r) for the active neurons: width x r.
template <typename T>
BasicTensor<T> gather_neuron_rows(const BasicTensor<T>& m, const ActiveNeuronSet& set) {
  const std::size_t r = m.cols();
  BasicTensor<T> out({set.width(), r});
  for (std::size_t i = 0; i < set.blocks.size(); ++i) {
    for (std::size_t j = 0; j < set.block_width(i); ++j) {
      const auto src = m.row(set.block_begin(i) + j);
      std::copy(src.begin(), src.end(), out.row(set.offsets[i] + j).begin());
    }
  }
  return out;
}

/// Packs columns of `m` (r x d_ff) for the active neurons, transposed: width x r.
template <typename T>
BasicTensor<T> gather_neuron_cols(const BasicTensor<T>& m, const ActiveNeuronSet& set) {
  const std::size_t r = m.rows();
  BasicTensor<T> out({set.width(), r});
  for (std::size_t i = 0; i < set.blocks.size(); ++i) {
    for (std::size_t j = 0; j < set.block_width(i); ++j) {
      const std::size_t c = set.block_begin(i) + j;
      for (std::size_t q = 0; q < r; ++q) out(set.offsets[i] + j, q) = m(q, c);
    }
  }
  return out;
}

}  // namespace

void ModelDims::validate() const {
  require(d_model > 0 && n_heads > 0 && d_ff > 0 && seq_len > 0 && blk_size > 0 && attn_blk > 0,
          "model dimensions must be positive");
  require(vocab > 1, "vocabulary needs at least two tokens");
  require(n_layers > 0, "model needs at least one layer");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(seq_len % attn_blk == 0, "seq_len must be divisible by attn_blk");
}

const char* slot_name(LinearSlot slot) {
  static constexpr const char* kNames[kLinearSlots] = {"q", "k", "v", "o", "w1", "w2"};
  return kNames[slot_index(slot)];
}

LinearSlot parse_slot(const std::string& name) {
  for (std::size_t i = 0; i < kLinearSlots; ++i) {
    if (name == slot_name(static_cast<LinearSlot>(i))) return static_cast<LinearSlot>(i);
  }
  throw ConfigError("unknown linear slot '" + name + "' (expected q, k, v, o, w1 or w2)");
}

template <typename T>
const BasicTensor<T>& BlockWeights<T>::attn_weight(LinearSlot slot) const {
  switch (slot) {
    case LinearSlot::kQ:
      return wq;
    case LinearSlot::kK:
      return wk;
    case LinearSlot::kV:
      return wv;
    case LinearSlot::kO:
      return wo;
    default:
      throw ConfigError(std::string("not an attention projection: ") + slot_name(slot));
  }
}

template <typename U, typename T>
FrozenWeights<U> cast_weights(const FrozenWeights<T>& w) {
  FrozenWeights<U> out;
  out.dims = w.dims;
  out.embedding = w.embedding.template cast<U>();
  out.positional = w.positional.template cast<U>();
  out.lnf_gain = w.lnf_gain.template cast<U>();
  out.lnf_shift = w.lnf_shift.template cast<U>();
  out.logit_scale = static_cast<U>(w.logit_scale);
  for (const auto& b : w.blocks) {
    BlockWeights<U> nb;
    nb.wq = b.wq.template cast<U>();
    nb.wk = b.wk.template cast<U>();
    nb.wv = b.wv.template cast<U>();
    nb.wo = b.wo.template cast<U>();
    for (std::size_t i = 0; i < kLinearSlots; ++i) nb.bias[i] = b.bias[i].template cast<U>();
    nb.mlp = LayeredWeights<U>::from_logical(b.mlp.w1.to_logical().template cast<U>(),
                                             b.mlp.w2.to_logical().template cast<U>());
    nb.ln1_gain = b.ln1_gain.template cast<U>();
    nb.ln1_shift = b.ln1_shift.template cast<U>();
    nb.ln2_gain = b.ln2_gain.template cast<U>();
    nb.ln2_shift = b.ln2_shift.template cast<U>();
    out.blocks.push_back(std::move(nb));
  }
  return out;
}

std::size_t backbone_param_count(const ModelDims& dims) {
  const std::size_t d = dims.d_model, f = dims.d_ff;
  const std::size_t per_layer = 4 * d * d + 2 * d * f + (5 * d + f) + 4 * d;
  return dims.vocab * d + dims.n_layers * per_layer + 2 * d;
}

const char* peft_method_name(PeftMethod m) {
  switch (m) {
    case PeftMethod::kLora:
      return "lora";
    case PeftMethod::kAdapter:
      return "adapter";
    case PeftMethod::kBitfit:
      return "bitfit";
  }
  return "?";
}

PeftMethod parse_peft_method(const std::string& name) {
  if (name == "lora") return PeftMethod::kLora;
  if (name == "adapter") return PeftMethod::kAdapter;
  if (name == "bitfit") return PeftMethod::kBitfit;
  throw ConfigError("unknown PEFT method '" + name + "' (expected lora, adapter or bitfit)");
}

template <typename T>
PeftParams<T> init_peft(const FrozenWeights<T>& weights, const PeftConfig& config, Rng& rng) {
  const ModelDims& dims = weights.dims;
  PeftParams<T> out;
  out.config = config;
  out.blocks.resize(weights.blocks.size());
  for (std::size_t l = 0; l < weights.blocks.size(); ++l) {
    BlockPeft<T>& bp = out.blocks[l];
    switch (config.method) {
      case PeftMethod::kLora:
        require(config.lora_rank > 0, "lora_rank must be positive");
        for (LinearSlot slot : config.lora_targets) {
          const auto [d_in, d_out] = slot_dims(slot, dims);
          require(config.lora_rank < std::min(d_in, d_out), "lora_rank must be below the layer width");
          LoraAdapter<T> a;
          a.a = randn<T>(rng, {config.lora_rank, d_in}, config.lora_init_std);
          a.b = BasicTensor<T>({d_out, config.lora_rank});
          a.scaling = static_cast<T>(config.lora_scaling);
          bp.lora[slot_index(slot)] = std::move(a);
        }
        break;
      case PeftMethod::kAdapter:
        require(config.adapter_rank > 0 && config.adapter_rank < dims.d_model,
                "adapter_rank must be in (0, d_model)");
        for (auto* slot : {&bp.attn_adapter, &bp.mlp_adapter}) {
          AdapterLayer<T> a;
          a.down = randn<T>(rng, {dims.d_model, config.adapter_rank}, config.adapter_init_std);
          a.up = BasicTensor<T>({config.adapter_rank, dims.d_model});
          *slot = std::move(a);
        }
        break;
      case PeftMethod::kBitfit:
        bp.bias = weights.blocks[l].bias;
        break;
    }
  }
  return out;
}

template <typename U, typename T>
PeftParams<U> cast_peft(const PeftParams<T>& p) {
  PeftParams<U> out;
  out.config = p.config;
  for (const auto& b : p.blocks) {
    BlockPeft<U> nb;
    for (std::size_t i = 0; i < kLinearSlots; ++i) {
      if (b.lora[i]) {
        nb.lora[i] = LoraAdapter<U>{b.lora[i]->a.template cast<U>(), b.lora[i]->b.template cast<U>(),
                                    static_cast<U>(b.lora[i]->scaling)};
      }
    }
    if (b.attn_adapter) nb.attn_adapter = AdapterLayer<U>{b.attn_adapter->down.template cast<U>(), b.attn_adapter->up.template cast<U>()};
    if (b.mlp_adapter) nb.mlp_adapter = AdapterLayer<U>{b.mlp_adapter->down.template cast<U>(), b.mlp_adapter->up.template cast<U>()};
    if (b.bias) {
      std::array<BasicTensor<U>, kLinearSlots> biases;
      for (std::size_t i = 0; i < kLinearSlots; ++i) biases[i] = (*b.bias)[i].template cast<U>();
      nb.bias = std::move(biases);
    }
    out.blocks.push_back(std::move(nb));
  }
  return out;
}

template <typename T>
std::vector<ParamRef<T>> trainable_params(PeftParams<T>& peft) {
  std::vector<ParamRef<T>> out;
  for (std::size_t l = 0; l < peft.blocks.size(); ++l) {
    auto& b = peft.blocks[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for (std::size_t i = 0; i < kLinearSlots; ++i) {
      if (!b.lora[i]) continue;
      const std::string base = prefix + "lora." + slot_name(static_cast<LinearSlot>(i));
      out.push_back({base + ".a", &b.lora[i]->a});
      out.push_back({base + ".b", &b.lora[i]->b});
    }
    if (b.attn_adapter) {
      out.push_back({prefix + "adapter.attn.down", &b.attn_adapter->down});
      out.push_back({prefix + "adapter.attn.up", &b.attn_adapter->up});
    }
    if (b.mlp_adapter) {
      out.push_back({prefix + "adapter.mlp.down", &b.mlp_adapter->down});
      out.push_back({prefix + "adapter.mlp.up", &b.mlp_adapter->up});
    }
    if (b.bias) {
      for (std::size_t i = 0; i < kLinearSlots; ++i) {
        out.push_back({prefix + "bias." + slot_name(static_cast<LinearSlot>(i)), &(*b.bias)[i]});
      }
    }
  }
  return out;
}

template <typename T>
std::size_t trainable_param_count(const PeftParams<T>& peft) {
  std::size_t n = 0;
  for (const auto& ref : trainable_params(const_cast<PeftParams<T>&>(peft))) n += ref.value->size();
  return n;
}

template <typename T>
const BasicTensor<T>& effective_bias(const BlockWeights<T>& w, const BlockPeft<T>& p, LinearSlot slot) {
  return p.bias ? (*p.bias)[slot_index(slot)] : w.bias[slot_index(slot)];
}

template <typename T>
DenseMasks<T>::DenseMasks(const ModelDims& dims) : mask_(NeuronBlockMask::all_active(dims.n_blk())) {
  const std::size_t g = dims.attn_grid();
  std::vector<BlockIndex> all;
  all.reserve(g * g);
  for (std::uint32_t r = 0; r < g; ++r)
    for (std::uint32_t c = 0; c < g; ++c) all.push_back({r, c});
  layout_ = uniform_layout(dims.n_heads, g, std::move(all));
}

template <typename T>
BasicTensor<T> lora_linear_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const std::type_identity_t<BasicTensor<T>>* bias,
                                   const std::type_identity_t<LoraAdapter<T>>* lora, std::type_identity_t<BasicTensor<T>>* xa_out) {
  require_rank2(x.shape(), "lora_linear_forward");
  require_rank2(w.shape(), "lora_linear_forward");
  if (x.cols() != w.rows()) throw ShapeError("lora_linear_forward: input width does not match W");
  BasicTensor<T> z = matmul(x, w);
  if (bias != nullptr) add_row_bias(z, *bias);
  if (lora != nullptr) {
    if (lora->a.rank() != 2 || lora->b.rank() != 2 || lora->a.cols() != w.rows() || lora->b.rows() != w.cols() ||
        lora->a.rows() != lora->b.cols()) {
      throw ShapeError("lora_linear_forward: adapter shapes " + shape_string(lora->a.shape()) + " / " +
                       shape_string(lora->b.shape()) + " do not fit W " + shape_string(w.shape()));
    }
    BasicTensor<T> xa = matmul_nt(x, lora->a);
    add_inplace(z, matmul_nt(xa, lora->b), lora->scaling);
    if (xa_out != nullptr) *xa_out = std::move(xa);
  }
  return z;
}

template <typename T>
BasicTensor<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& shift,
                                  std::type_identity_t<LayerNormCache<T>>* cache) {
  require_rank2(x.shape(), "layer_norm_forward");
  const std::size_t s = x.rows(), d = x.cols();
  if (gain.size() != d || shift.size() != d) throw ShapeError("layer_norm_forward: gain/shift width mismatch");
  BasicTensor<T> normed({s, d});
  BasicTensor<T> out({s, d});
  std::vector<T> rstd(s);
  for (std::size_t t = 0; t < s; ++t) {
    const auto row = x.row(t);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    rstd[t] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    for (std::size_t i = 0; i < d; ++i) {
      normed(t, i) = (row[i] - mean) * rstd[t];
      out(t, i) = normed(t, i) * gain[i] + shift[i];
    }
  }
  if (cache != nullptr) {
    cache->normed = std::move(normed);
    cache->rstd = std::move(rstd);
  }
  return out;
}

template <typename T>
BasicTensor<T> attention_projection(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                                    LinearSlot slot, std::type_identity_t<BasicTensor<T>>* xa_out) {
  const auto& lora = p.lora[slot_index(slot)];
  return lora_linear_forward(xn, w.attn_weight(slot), &effective_bias(w, p, slot), lora ? &*lora : nullptr, xa_out);
}

template <typename T>
BasicTensor<T> mha_forward(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                           const CombinedLayout& layout, const ModelDims& dims, std::type_identity_t<AttentionCache<T>>* cache) {
  require_rank2(xn.shape(), "mha_forward");
  if (xn.rows() != dims.seq_len || xn.cols() != dims.d_model) throw ShapeError("mha_forward: input must be s x d");
  if (layout.n_heads() != dims.n_heads || layout.grid() != dims.attn_grid()) {
    throw ConfigError("mha_forward: layout does not match head count or attention grid");
  }
  AttentionCache<T> local;
  AttentionCache<T>& c = cache != nullptr ? *cache : local;
  c.x = xn;
  c.layout = dims.causal ? causal_restrict(layout) : layout;
  c.q = attention_projection(xn, w, p, LinearSlot::kQ, &c.lora_xa[0]);
  c.k = attention_projection(xn, w, p, LinearSlot::kK, &c.lora_xa[1]);
  c.v = attention_projection(xn, w, p, LinearSlot::kV, &c.lora_xa[2]);

  const std::size_t hd = dims.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  c.ctx = BasicTensor<T>({dims.seq_len, dims.d_model});
  c.probs.clear();
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    const auto qh = slice_cols(c.q, h * hd, (h + 1) * hd);
    const auto kh = slice_cols(c.k, h * hd, (h + 1) * hd);
    const auto vh = slice_cols(c.v, h * hd, (h + 1) * hd);
    auto scores = sdd(qh, kh, c.layout.head_blocks(h), dims.attn_blk, scale);
    auto probs = sparse_softmax(scores, dims.causal);
    set_cols(c.ctx, h * hd, dsd(probs, vh));
    c.probs.push_back(std::move(probs));
  }
  const auto& lora_o = p.lora[slot_index(LinearSlot::kO)];
  return lora_linear_forward(c.ctx, w.wo, &effective_bias(w, p, LinearSlot::kO), lora_o ? &*lora_o : nullptr,
                             &c.lora_xa[3]);
}

template <typename T>
BasicTensor<T> mha_forward(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                           const HeadPatternAssignment& patterns, const PatternPool& pool, const ModelDims& dims,
                           std::type_identity_t<AttentionCache<T>>* cache) {
  if (pool.grid() != dims.attn_grid()) throw ConfigError("mha_forward: pool grid does not match seq_len / attn_blk");
  if (patterns.n_heads() != dims.n_heads) throw ConfigError("mha_forward: need one pattern id per head");
  return mha_forward(xn, w, p, combine_layouts(patterns, pool), dims, cache);
}

template <typename T>
BasicTensor<T> mlp_forward(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                           const NeuronBlockMask& mask, const ModelDims& dims, std::type_identity_t<MlpCache<T>>* cache) {
  require_rank2(xn.shape(), "mlp_forward");
  if (mask.size() != dims.n_blk()) {
    throw ConfigError("mlp_forward: neuron mask has " + std::to_string(mask.size()) + " blocks, expected " +
                      std::to_string(dims.n_blk()));
  }
  MlpCache<T> local;
  MlpCache<T>& c = cache != nullptr ? *cache : local;
  c.x = xn;
  c.mask = mask;
  c.z = neuron_matmul_fwd1(xn, w.mlp.w1, mask, dims.blk_size);
  const ActiveNeuronSet& set = c.z.set;
  const std::size_t width = set.width();

  const auto& b1 = effective_bias(w, p, LinearSlot::kUp);
  BasicTensor<T> packed_b1({width});
  for (std::size_t i = 0; i < set.blocks.size(); ++i)
    for (std::size_t j = 0; j < set.block_width(i); ++j) packed_b1[set.offsets[i] + j] = b1[set.block_begin(i) + j];
  add_row_bias(c.z.values, packed_b1);

  if (const auto& up = p.lora[slot_index(LinearSlot::kUp)]) {
    c.lora_xa_up = matmul_nt(xn, up->a);
    add_inplace(c.z.values, matmul_nt(c.lora_xa_up, gather_neuron_rows(up->b, set)), up->scaling);
  }

  c.h = NeuronActivations<T>{relu(c.z.values), set};
  BasicTensor<T> out = neuron_matmul_fwd2(c.h, w.mlp.w2, mask);
  add_row_bias(out, effective_bias(w, p, LinearSlot::kDown));
  if (const auto& down = p.lora[slot_index(LinearSlot::kDown)]) {
    c.lora_ha_down = matmul(c.h.values, gather_neuron_cols(down->a, set));
    add_inplace(out, matmul_nt(c.lora_ha_down, down->b), down->scaling);
  }
  return out;
}

template <typename T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& x, const AdapterLayer<T>& adapter, std::type_identity_t<AdapterCache<T>>* cache) {
  BasicTensor<T> hidden = relu(matmul(x, adapter.down));
  BasicTensor<T> out = x;
  add_inplace(out, matmul(hidden, adapter.up));
  if (cache != nullptr) {
    cache->input = x;
    cache->hidden = std::move(hidden);
  }
  return out;
}

namespace {

template <typename T>
BasicTensor<T> attention_residual(const BasicTensor<T>& x, const BasicTensor<T>& xn1, const BlockWeights<T>& w,
                                  const BlockPeft<T>& p, const CombinedLayout& layout, const ModelDims& dims,
                                  BlockCache<T>& c) {
  auto a = mha_forward(xn1, w, p, layout, dims, &c.attn);
  if (p.attn_adapter) a = adapter_forward(a, *p.attn_adapter, &c.attn_adapter);
  BasicTensor<T> y = x;
  add_inplace(y, a);
  return y;
}

template <typename T>
void mlp_residual(BasicTensor<T>& y, const BasicTensor<T>& xn2, const BlockWeights<T>& w, const BlockPeft<T>& p,
                  const NeuronBlockMask& mask, const ModelDims& dims, BlockCache<T>& c) {
  auto m = mlp_forward(xn2, w, p, mask, dims, &c.mlp);
  if (p.mlp_adapter) m = adapter_forward(m, *p.mlp_adapter, &c.mlp_adapter);
  add_inplace(y, m);
}

}  // namespace

template <typename T>
BasicTensor<T> block_forward(const BasicTensor<T>& x, const BlockWeights<T>& w, const BlockPeft<T>& p,
                             const ModelDims& dims, std::size_t layer, MaskProvider<T>& masks,
                             std::type_identity_t<BlockCache<T>>* cache) {
  BlockCache<T> local;
  BlockCache<T>& c = cache != nullptr ? *cache : local;
  const auto xn1 = layer_norm_forward(x, w.ln1_gain, w.ln1_shift, &c.ln1);
  BasicTensor<T> y =
      attention_residual(x, xn1, w, p, masks.attention_layout(layer, std::span<const BasicTensor<T>>(&xn1, 1)), dims, c);
  const auto xn2 = layer_norm_forward(y, w.ln2_gain, w.ln2_shift, &c.ln2);
  mlp_residual(y, xn2, w, p, masks.mlp_mask(layer, std::span<const BasicTensor<T>>(&xn2, 1)), dims, c);
  return y;
}

template <typename T>
BasicTensor<T> embed(const FrozenWeights<T>& w, std::span<const std::int32_t> tokens) {
  const ModelDims& dims = w.dims;
  if (tokens.size() != dims.seq_len) {
    throw ConfigError("expected " + std::to_string(dims.seq_len) + " tokens, got " + std::to_string(tokens.size()));
  }
  BasicTensor<T> x({dims.seq_len, dims.d_model});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto id = tokens[t];
    if (id < 0 || static_cast<std::size_t>(id) >= dims.vocab) {
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(dims.vocab));
    }
    const auto e = w.embedding.row(static_cast<std::size_t>(id));
    const auto pos = w.positional.row(t);
    auto out = x.row(t);
    for (std::size_t i = 0; i < dims.d_model; ++i) out[i] = e[i] + pos[i];
  }
  return x;
}

template <typename T>
std::vector<BasicTensor<T>> model_forward_batch(const FrozenWeights<T>& w, const PeftParams<T>& p,
                                                const std::vector<std::vector<std::int32_t>>& inputs,
                                                MaskProvider<T>& masks, std::vector<ModelCache<T>>* caches) {
  if (p.blocks.size() != w.blocks.size()) throw ConfigError("PEFT state does not match the layer count");
  if (inputs.empty()) throw ConfigError("model_forward_batch: empty batch");
  const std::size_t n = inputs.size();
  std::vector<ModelCache<T>> local;
  std::vector<ModelCache<T>>& c = caches != nullptr ? *caches : local;
  c.assign(n, ModelCache<T>{});
  std::vector<BasicTensor<T>> x(n), normed(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = embed(w, std::span<const std::int32_t>(inputs[i]));
    c[i].blocks.resize(w.blocks.size());
  }
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& bw = w.blocks[l];
    const auto& bp = p.blocks[l];
    for (std::size_t i = 0; i < n; ++i)
      normed[i] = layer_norm_forward(x[i], bw.ln1_gain, bw.ln1_shift, &c[i].blocks[l].ln1);
    const CombinedLayout layout = masks.attention_layout(l, normed);
    for (std::size_t i = 0; i < n; ++i)
      x[i] = attention_residual(x[i], normed[i], bw, bp, layout, w.dims, c[i].blocks[l]);
    for (std::size_t i = 0; i < n; ++i)
      normed[i] = layer_norm_forward(x[i], bw.ln2_gain, bw.ln2_shift, &c[i].blocks[l].ln2);
    const NeuronBlockMask mask = masks.mlp_mask(l, normed);
    for (std::size_t i = 0; i < n; ++i) mlp_residual(x[i], normed[i], bw, bp, mask, w.dims, c[i].blocks[l]);
  }
  std::vector<BasicTensor<T>> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xf = layer_norm_forward(x[i], w.lnf_gain, w.lnf_shift, &c[i].lnf);
    logits[i] = scale(matmul_nt(xf, w.embedding), w.logit_scale);
    c[i].logits = logits[i];
  }
  return logits;
}

template <typename T>
BasicTensor<T> model_forward(const FrozenWeights<T>& w, const PeftParams<T>& p, std::span<const std::int32_t> inputs,
                             MaskProvider<T>& masks, std::type_identity_t<ModelCache<T>>* cache) {
  const std::vector<std::vector<std::int32_t>> batch{std::vector<std::int32_t>(inputs.begin(), inputs.end())};
  if (cache == nullptr) return model_forward_batch(w, p, batch, masks).front();
  std::vector<ModelCache<T>> caches;
  auto logits = model_forward_batch(w, p, batch, masks, &caches);
  *cache = std::move(caches.front());
  return std::move(logits.front());
}

namespace {

template <typename T>
void check_targets(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  require_rank2(logits.shape(), "loss");
  if (targets.size() != logits.rows()) throw ShapeError("loss: one target per logit row required");
  for (auto id : targets) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.cols()) {
      throw ConfigError("target id " + std::to_string(id) + " outside vocabulary of " + std::to_string(logits.cols()));
    }
  }
}

}  // namespace

template <typename T>
T loss_forward(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  check_targets(logits, targets);
  double total = 0;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    const auto row = logits.row(t);
    const T m = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (T v : row) z += std::exp(static_cast<double>(v - m));
    total += std::log(z) + static_cast<double>(m) - static_cast<double>(row[static_cast<std::size_t>(targets[t])]);
  }
  return static_cast<T>(total / static_cast<double>(logits.rows()));
}

template <typename T>
BasicTensor<T> loss_backward(const BasicTensor<T>& logits, std::span<const std::int32_t> targets) {
  check_targets(logits, targets);
  BasicTensor<T> g = softmax_rows(logits);
  const T inv = T(1) / static_cast<T>(logits.rows());
  for (std::size_t t = 0; t < g.rows(); ++t) {
    g(t, static_cast<std::size_t>(targets[t])) -= T(1);
    for (auto& v : g.row(t)) v *= inv;
  }
  return g;
}

#define SHADOWTUNE_INSTANTIATE_MODEL(T)                                                                           \
  template struct BlockWeights<T>;                                                                                \
  template PeftParams<T> init_peft(const FrozenWeights<T>&, const PeftConfig&, Rng&);                             \
  template std::vector<ParamRef<T>> trainable_params(PeftParams<T>&);                                             \
  template std::size_t trainable_param_count(const PeftParams<T>&);                                               \
  template const BasicTensor<T>& effective_bias(const BlockWeights<T>&, const BlockPeft<T>&, LinearSlot);         \
  template class DenseMasks<T>;                                                                                   \
  template BasicTensor<T> lora_linear_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*, \
                                              const LoraAdapter<T>*, BasicTensor<T>*);                            \
  template BasicTensor<T> layer_norm_forward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,  \
                                             LayerNormCache<T>*);                                                 \
  template BasicTensor<T> attention_projection(const BasicTensor<T>&, const BlockWeights<T>&, const BlockPeft<T>&, \
                                               LinearSlot, BasicTensor<T>*);                                      \
  template BasicTensor<T> mha_forward(const BasicTensor<T>&, const BlockWeights<T>&, const BlockPeft<T>&,         \
                                      const CombinedLayout&, const ModelDims&, AttentionCache<T>*);               \
  template BasicTensor<T> mha_forward(const BasicTensor<T>&, const BlockWeights<T>&, const BlockPeft<T>&,         \
                                      const HeadPatternAssignment&, const PatternPool&, const ModelDims&,         \
                                      AttentionCache<T>*);                                                        \
  template BasicTensor<T> mlp_forward(const BasicTensor<T>&, const BlockWeights<T>&, const BlockPeft<T>&,         \
                                      const NeuronBlockMask&, const ModelDims&, MlpCache<T>*);                    \
  template BasicTensor<T> adapter_forward(const BasicTensor<T>&, const AdapterLayer<T>&, AdapterCache<T>*);       \
  template BasicTensor<T> block_forward(const BasicTensor<T>&, const BlockWeights<T>&, const BlockPeft<T>&,       \
                                        const ModelDims&, std::size_t, MaskProvider<T>&, BlockCache<T>*);         \
  template BasicTensor<T> embed(const FrozenWeights<T>&, std::span<const std::int32_t>);                          \
  template BasicTensor<T> model_forward(const FrozenWeights<T>&, const PeftParams<T>&,                            \
                                        std::span<const std::int32_t>, MaskProvider<T>&, ModelCache<T>*);         \
  template std::vector<BasicTensor<T>> model_forward_batch(const FrozenWeights<T>&, const PeftParams<T>&,         \
                                                           const std::vector<std::vector<std::int32_t>>&,          \
                                                           MaskProvider<T>&, std::vector<ModelCache<T>>*);        \
  template T loss_forward(const BasicTensor<T>&, std::span<const std::int32_t>);                                  \
  template BasicTensor<T> loss_backward(const BasicTensor<T>&, std::span<const std::int32_t>);

SHADOWTUNE_INSTANTIATE_MODEL(float)
SHADOWTUNE_INSTANTIATE_MODEL(double)

#undef SHADOWTUNE_INSTANTIATE_MODEL

template FrozenWeights<double> cast_weights<double, float>(const FrozenWeights<float>&);
template FrozenWeights<float> cast_weights<float, double>(const FrozenWeights<double>&);
template PeftParams<double> cast_peft<double, float>(const PeftParams<float>&);
template PeftParams<float> cast_peft<float, double>(const PeftParams<double>&);

}  // namespace shadowtune
