// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/exposer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace shadowtune {

NeuronBlockMask shadowy_combine(std::span<const NeuronBlockMask> per_token_active) {
  if (per_token_active.empty()) throw ConfigError("shadowy_combine: empty token list");
  NeuronBlockMask out = per_token_active.front();
  for (const auto& m : per_token_active.subspan(1)) out |= m;
  return out;
}

double sparsity_ratio(const NeuronBlockMask& mask) {
  if (mask.size() == 0) throw ConfigError("sparsity_ratio: empty mask");
  return 1.0 - static_cast<double>(mask.active_count()) / static_cast<double>(mask.size());
}

double sparsity_ratio(std::span<const BlockIndex> active, std::size_t grid) { return layout_sparsity(active, grid); }

template <typename T>
std::vector<BasicTensor<T>> exact_attention_scores(const BasicTensor<T>& xn, const BlockWeights<T>& w,
                                                   const BlockPeft<T>& p, const ModelDims& dims) {
  const auto q = attention_projection(xn, w, p, LinearSlot::kQ);
  const auto k = attention_projection(xn, w, p, LinearSlot::kK);
  const std::size_t hd = dims.head_dim(), s = xn.rows();
  const T score_scale = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<BasicTensor<T>> out;
  out.reserve(dims.n_heads);
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    BasicTensor<T> scores = scale(matmul_nt(slice_cols(q, h * hd, (h + 1) * hd), slice_cols(k, h * hd, (h + 1) * hd)),
                                  score_scale);
    if (dims.causal) {
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = i + 1; j < s; ++j) scores(i, j) = -std::numeric_limits<T>::infinity();
    }
    out.push_back(softmax_rows(scores));
  }
  return out;
}

template <typename T>
BasicTensor<T> exact_preactivations(const BasicTensor<T>& xn, const BlockWeights<T>& w, const BlockPeft<T>& p,
                                    const ModelDims& dims) {
  MlpCache<T> cache;
  mlp_forward(xn, w, p, NeuronBlockMask::all_active(dims.n_blk()), dims, &cache);
  return cache.z.to_dense();
}

template <typename T>
void accumulate_block_mass(const BasicTensor<T>& scores, std::size_t blk, BasicTensor<double>& into) {
  require_rank2(scores.shape(), "block mass");
  if (blk == 0 || scores.rows() % blk != 0 || scores.rows() != scores.cols()) {
    throw ShapeError("block mass: scores must be square with side divisible by the block size");
  }
  const std::size_t grid = scores.rows() / blk;
  if (into.size() == 0) into = BasicTensor<double>({grid, grid});
  if (into.rows() != grid || into.cols() != grid) throw ShapeError("block mass: accumulator grid mismatch");
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const auto row = scores.row(i);
    for (std::size_t j = 0; j < scores.cols(); ++j) into(i / blk, j / blk) += static_cast<double>(row[j]);
  }
}

double pattern_coverage(const BasicTensor<double>& mass, const LayoutTable& table) {
  if (mass.rows() != table.grid || mass.cols() != table.grid) throw ShapeError("pattern_coverage: grid mismatch");
  double total = 0, covered = 0;
  for (double v : mass.storage()) total += v;
  if (table.pattern.kind == PatternKind::kDense || total <= 0) return 1.0;
  for (const auto& b : table.blocks) covered += mass(b.row, b.col);
  return covered / total;
}

std::size_t select_pattern(const BasicTensor<double>& mass, const PatternPool& pool, double tau) {
  if (!(tau > 0 && tau <= 1)) throw ConfigError("coverage tau must lie in (0, 1]");
  std::size_t best = PatternPool::dense_id();
  std::size_t best_blocks = pool.at(best).active_blocks();
  for (const auto& table : pool.tables()) {
    if (table.active_blocks() < best_blocks && pattern_coverage(mass, table) >= tau) {
      best = table.id;
      best_blocks = table.active_blocks();
    }
  }
  return best;
}

template <typename T>
std::size_t select_head_pattern(const BasicTensor<T>& scores, const PatternPool& pool, double tau, std::size_t blk) {
  BasicTensor<double> mass;
  accumulate_block_mass(scores, blk, mass);
  return select_pattern(mass, pool, tau);
}

template <typename T>
std::vector<double> block_importance(const BasicTensor<T>& z, std::size_t blk_size) {
  require_rank2(z.shape(), "block_importance");
  const std::size_t n_blk = n_neuron_blocks(z.cols(), blk_size);
  std::vector<double> imp(n_blk, 0.0);
  for (std::size_t t = 0; t < z.rows(); ++t) {
    const auto row = z.row(t);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double v = static_cast<double>(row[c]);
      if (v > imp[c / blk_size]) imp[c / blk_size] = v;
    }
  }
  return imp;
}

NeuronBlockMask filter_neuron_blocks(std::span<const double> importance, double theta) {
  if (!(theta >= 0 && theta <= 1)) throw ConfigError("theta must lie in [0, 1]");
  NeuronBlockMask mask(importance.size(), false);
  double peak = 0;
  for (double v : importance) peak = std::max(peak, v);
  if (peak <= 0) return mask;
  for (std::size_t b = 0; b < importance.size(); ++b) {
    // theta = 1 keeps every block equal to the peak
    mask.set(b, theta >= 1 ? importance[b] >= peak : importance[b] > theta * peak);
  }
  return mask;
}

ExposedAttention expose_attention(std::span<const BasicTensor<double>> head_mass, const PatternPool& pool, double tau) {
  ExposedAttention out;
  std::vector<BlockIndex> all;
  for (const auto& mass : head_mass) {
    const std::size_t id = select_pattern(mass, pool, tau);
    out.heads.pattern_ids.push_back(id);
    const auto& blocks = pool.at(id).blocks;
    all.insert(all.end(), blocks.begin(), blocks.end());
  }
  out.head_layout = combine_layouts(out.heads, pool);
  out.union_layout = uniform_layout(head_mass.size(), pool.grid(), std::move(all));
  return out;
}

template <typename T>
ExposerMasks<T>::ExposerMasks(const FrozenWeights<T>& weights, const PeftParams<T>& peft, const PatternPool& pool,
                              ExposerOptions options)
    : weights_(weights), peft_(peft), pool_(pool), options_(options), layers_(weights.blocks.size()) {
  if (pool.grid() != weights.dims.attn_grid()) throw ConfigError("exposer: pool grid does not match the model");
  if (!(options.tau > 0 && options.tau <= 1)) throw ConfigError("coverage tau must lie in (0, 1]");
  if (!(options.theta >= 0 && options.theta <= 1)) throw ConfigError("theta must lie in [0, 1]");
}

template <typename T>
CombinedLayout ExposerMasks<T>::attention_layout(std::size_t layer, std::span<const BasicTensor<T>> normed_inputs) {
  const ModelDims& dims = weights_.dims;
  std::vector<BasicTensor<double>> mass(dims.n_heads);
  for (const auto& xn : normed_inputs) {
    const auto scores = exact_attention_scores(xn, weights_.blocks.at(layer), peft_.blocks.at(layer), dims);
    for (std::size_t h = 0; h < dims.n_heads; ++h) accumulate_block_mass(scores[h], dims.attn_blk, mass[h]);
  }
  auto& rec = layers_.at(layer);
  rec.attention = expose_attention(mass, pool_, options_.tau);
  if (!options_.apply) return combine_layouts(HeadPatternAssignment{std::vector<std::size_t>(dims.n_heads, 0)}, pool_);
  return options_.uniform_union ? rec.attention.union_layout : rec.attention.head_layout;
}

template <typename T>
NeuronBlockMask ExposerMasks<T>::mlp_mask(std::size_t layer, std::span<const BasicTensor<T>> normed_inputs) {
  const ModelDims& dims = weights_.dims;
  auto& rec = layers_.at(layer);
  rec.importance.assign(dims.n_blk(), 0.0);
  for (const auto& xn : normed_inputs) {
    const auto imp = block_importance(exact_preactivations(xn, weights_.blocks.at(layer), peft_.blocks.at(layer), dims),
                                      dims.blk_size);
    for (std::size_t b = 0; b < imp.size(); ++b) rec.importance[b] = std::max(rec.importance[b], imp[b]);
  }
  if (!options_.apply) return NeuronBlockMask::all_active(dims.n_blk());
  return filter_neuron_blocks(rec.importance, options_.uniform_union ? 0.0 : options_.theta);
}

std::vector<SparsityRow> layer_sparsity_report(const FrozenWeights<float>& w, const PeftParams<float>& p,
                                               const std::vector<std::vector<std::int32_t>>& batch,
                                               std::span<const double> thetas, double tau, const PatternPool& pool) {
  ExposerOptions opts;
  opts.tau = tau;
  opts.apply = false;
  ExposerMasks<float> exposer(w, p, pool, opts);
  model_forward_batch(w, p, batch, exposer);
  std::vector<SparsityRow> rows;
  const std::size_t grid = pool.grid();
  for (std::size_t l = 0; l < exposer.layers().size(); ++l) {
    const auto& rec = exposer.layers()[l];
    const auto& hl = rec.attention.head_layout;
    rows.push_back({l, "attention", "shadowy", tau, sparsity_ratio(rec.attention.union_layout.head_blocks(0), grid)});
    const double cells = static_cast<double>(hl.n_heads() * grid * grid);
    rows.push_back({l, "attention", "head-specific", tau, 1.0 - static_cast<double>(hl.total_blocks()) / cells});
    rows.push_back({l, "mlp", "shadowy", 0.0, sparsity_ratio(filter_neuron_blocks(rec.importance, 0.0))});
    for (double theta : thetas) {
      rows.push_back({l, "mlp", "threshold", theta, sparsity_ratio(filter_neuron_blocks(rec.importance, theta))});
    }
  }
  return rows;
}

std::string sparsity_csv(std::span<const SparsityRow> rows) {
  std::ostringstream out;
  out << "layer,component,method,theta,sparsity_ratio\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.layer << ',' << r.component << ',' << r.method << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f\n", r.theta, r.sparsity);
    out << buf;
  }
  return out.str();
}

#define SHADOWTUNE_INSTANTIATE_EXPOSER(T)                                                                         \
  template std::vector<BasicTensor<T>> exact_attention_scores(const BasicTensor<T>&, const BlockWeights<T>&,      \
                                                              const BlockPeft<T>&, const ModelDims&);             \
  template BasicTensor<T> exact_preactivations(const BasicTensor<T>&, const BlockWeights<T>&, const BlockPeft<T>&, \
                                               const ModelDims&);                                                 \
  template void accumulate_block_mass(const BasicTensor<T>&, std::size_t, BasicTensor<double>&);                 \
  template std::size_t select_head_pattern(const BasicTensor<T>&, const PatternPool&, double, std::size_t);      \
  template std::vector<double> block_importance(const BasicTensor<T>&, std::size_t);                             \
  template class ExposerMasks<T>;

SHADOWTUNE_INSTANTIATE_EXPOSER(float)
SHADOWTUNE_INSTANTIATE_EXPOSER(double)

}  // namespace shadowtune
