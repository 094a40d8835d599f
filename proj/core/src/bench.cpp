// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "shadowtune/error.hpp"
#include "shadowtune/rng.hpp"
#include "shadowtune/sparse_ops.hpp"

namespace shadowtune {

std::string bench_op_name(BenchOp op) {
  switch (op) {
    case BenchOp::kNeuronFwd1:
      return "neuron_fwd1";
    case BenchOp::kNeuronFwd2:
      return "neuron_fwd2";
    case BenchOp::kNeuronMlp:
      return "neuron_mlp";
    case BenchOp::kAttention:
      return "attention";
  }
  throw ConfigError("unknown bench op");
}

BenchOp parse_bench_op(const std::string& name) {
  for (auto op : {BenchOp::kNeuronFwd1, BenchOp::kNeuronFwd2, BenchOp::kNeuronMlp, BenchOp::kAttention})
    if (bench_op_name(op) == name) return op;
  throw ConfigError("unknown bench op '" + name + "'");
}

void BenchConfig::validate() const {
  if (repetitions < 5) throw ConfigError("bench needs at least 5 repetitions");
  if (ops.empty() || sizes.empty() || sparsities.empty()) throw ConfigError("bench grid is empty");
  for (double s : sparsities)
    if (!(s >= 0 && s < 1)) throw ConfigError("bench sparsity must lie in [0, 1)");
  if (tokens == 0 || d_model == 0 || blk_size == 0 || attn_blk == 0 || head_dim == 0)
    throw ConfigError("bench dimensions must be positive");
  for (auto n : sizes)
    if (n == 0 || n % blk_size != 0 || n % attn_blk != 0) throw ConfigError("bench size must be a multiple of the block sizes");
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

template <typename F>
double time_median_ns(F&& fn, std::size_t warmups, std::size_t reps) {
  for (std::size_t i = 0; i < warmups; ++i) fn();
  std::vector<double> ns;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ns.push_back(std::chrono::duration<double, std::nano>(std::chrono::steady_clock::now() - t0).count());
  }
  return median(std::move(ns));
}

std::size_t active_count(std::size_t total, double sparsity, std::size_t floor) {
  const auto n = static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(total)));
  return std::clamp<std::size_t>(n, std::max<std::size_t>(floor, 1), total);
}

NeuronBlockMask random_neuron_mask(std::size_t n_blk, std::size_t active, Rng& rng) {
  std::vector<std::size_t> ids(n_blk);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), rng.engine());
  NeuronBlockMask mask(n_blk, false);
  for (std::size_t i = 0; i < active; ++i) mask.set(ids[i], true);
  return mask;
}

/// Diagonal first (softmax needs every row), then random off-diagonal blocks.
std::vector<BlockIndex> random_layout(std::size_t grid, std::size_t active, Rng& rng) {
  std::vector<BlockIndex> off;
  for (std::uint32_t r = 0; r < grid; ++r)
    for (std::uint32_t c = 0; c < grid; ++c)
      if (r != c) off.push_back({r, c});
  std::shuffle(off.begin(), off.end(), rng.engine());
  std::vector<BlockIndex> blocks;
  for (std::uint32_t i = 0; i < grid; ++i) blocks.push_back({i, i});
  for (std::size_t i = 0; blocks.size() < active; ++i) blocks.push_back(off[i]);
  std::sort(blocks.begin(), blocks.end());
  return blocks;
}

struct Measured {
  std::size_t active = 0;
  std::size_t total = 0;
  double ns = 0;
};

Measured measure_neuron(BenchOp op, std::size_t d_ff, double sparsity, const BenchConfig& cfg, Rng& rng) {
  const std::size_t n_blk = n_neuron_blocks(d_ff, cfg.blk_size);
  const Tensor x = randn<float>(rng, {cfg.tokens, cfg.d_model}, 1.0);
  const auto weights = LayeredWeights<float>::from_logical(randn<float>(rng, {cfg.d_model, d_ff}, 0.05),
                                                           randn<float>(rng, {d_ff, cfg.d_model}, 0.05));
  const auto mask = random_neuron_mask(n_blk, active_count(n_blk, sparsity, 1), rng);
  Measured m{mask.active_count(), n_blk, 0};
  const auto hidden = neuron_matmul_fwd1(x, weights.w1, mask, cfg.blk_size);
  volatile float sink = 0;
  switch (op) {
    case BenchOp::kNeuronFwd1:
      m.ns = time_median_ns([&] { sink = neuron_matmul_fwd1(x, weights.w1, mask, cfg.blk_size).values[0]; },
                            cfg.warmups, cfg.repetitions);
      break;
    case BenchOp::kNeuronFwd2:
      m.ns = time_median_ns([&] { sink = neuron_matmul_fwd2(hidden, weights.w2, mask)[0]; }, cfg.warmups,
                            cfg.repetitions);
      break;
    default:
      m.ns = time_median_ns(
          [&] {
            const auto h = neuron_matmul_fwd1(x, weights.w1, mask, cfg.blk_size);
            sink = neuron_matmul_fwd2(h, weights.w2, mask)[0];
          },
          cfg.warmups, cfg.repetitions);
  }
  (void)sink;
  return m;
}

Measured measure_attention(std::size_t s, double sparsity, const BenchConfig& cfg, Rng& rng) {
  const std::size_t grid = s / cfg.attn_blk;
  const Tensor q = randn<float>(rng, {s, cfg.head_dim}, 1.0);
  const Tensor k = randn<float>(rng, {s, cfg.head_dim}, 1.0);
  const Tensor v = randn<float>(rng, {s, cfg.head_dim}, 1.0);
  const auto blocks = random_layout(grid, active_count(grid * grid, sparsity, grid), rng);
  const float scale = 1.0f / std::sqrt(static_cast<float>(cfg.head_dim));
  Measured m{blocks.size(), grid * grid, 0};
  volatile float sink = 0;
  m.ns = time_median_ns(
      [&] {
        const auto probs = sparse_softmax(sdd(q, k, blocks, cfg.attn_blk, scale));
        sink = dsd(probs, v)[0];
      },
      cfg.warmups, cfg.repetitions);
  (void)sink;
  return m;
}

}  // namespace

std::vector<BenchRecord> run_bench(const BenchConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<BenchRecord> out;
  for (auto op : cfg.ops) {
    for (auto size : cfg.sizes) {
      auto measure = [&](double sparsity) {
        return op == BenchOp::kAttention ? measure_attention(size, sparsity, cfg, rng)
                                         : measure_neuron(op, size, sparsity, cfg, rng);
      };
      const double dense = measure(0.0).ns;
      for (double sparsity : cfg.sparsities) {
        const auto m = measure(sparsity);
        out.push_back({bench_op_name(op), size, sparsity, m.active, m.total, m.ns, dense, dense / m.ns});
      }
    }
  }
  return out;
}

std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::string csv = "op,size,sparsity,active_blocks,median_ns,dense_median_ns,speedup\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%s,%zu,%.9g,%zu,%.9g,%.9g,%.9g\n", r.op.c_str(), r.size, r.sparsity,
                  r.active_blocks, r.median_ns, r.dense_median_ns, r.speedup);
    csv += line;
  }
  return csv;
}

LinearFit fit_time_vs_density(const std::vector<BenchRecord>& records) {
  if (records.size() < 2) throw ConfigError("linear fit needs at least two records");
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  const double n = static_cast<double>(records.size());
  for (const auto& r : records) {
    const double x = static_cast<double>(r.active_blocks) / static_cast<double>(r.total_blocks), y = r.median_ns;
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    syy += y * y;
  }
  const double vx = sxx - sx * sx / n, vy = syy - sy * sy / n, cxy = sxy - sx * sy / n;
  LinearFit fit;
  if (vx <= 0) return fit;
  fit.slope = cxy / vx;
  fit.intercept = (sy - fit.slope * sx) / n;
  fit.r2 = vy > 0 ? cxy * cxy / (vx * vy) : 1.0;
  return fit;
}

}  // namespace shadowtune
