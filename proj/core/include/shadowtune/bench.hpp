// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Operator timing sweeps over block sparsity. The dense baseline for each
// shape runs the same kernel with a full mask or layout.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace shadowtune {

enum class BenchOp {
  kNeuronFwd1,  // X * W1[:, active]
  kNeuronFwd2,  // H_active * W2[active, :]
  kNeuronMlp,   // both, composed
  kAttention,   // sdd -> sparse_softmax -> dsd, one head
};

std::string bench_op_name(BenchOp op);
/// Throws ConfigError for unknown names.
BenchOp parse_bench_op(const std::string& name);

struct BenchConfig {
  std::vector<BenchOp> ops = {BenchOp::kNeuronMlp, BenchOp::kAttention};
  /// d_ff for neuron ops, sequence length for attention.
  std::vector<std::size_t> sizes = {1024, 2048};
  std::vector<double> sparsities = {0.0, 0.2, 0.4, 0.6, 0.8, 0.9};
  std::size_t repetitions = 5;
  std::size_t warmups = 2;
  std::size_t tokens = 256;      // rows of X for neuron ops
  std::size_t d_model = 256;     // width of X for neuron ops
  std::size_t blk_size = 16;     // neuron block
  std::size_t attn_blk = 16;     // attention block side
  std::size_t head_dim = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

struct BenchRecord {
  std::string op;
  std::size_t size = 0;
  double sparsity = 0;  // requested block sparsity
  std::size_t active_blocks = 0;
  std::size_t total_blocks = 0;
  double median_ns = 0;
  double dense_median_ns = 0;
  double speedup = 0;
};

std::vector<BenchRecord> run_bench(const BenchConfig& cfg);

/// op,size,sparsity,active_blocks,median_ns,dense_median_ns,speedup
std::string bench_csv(const std::vector<BenchRecord>& records);

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};
/// Least squares of median_ns against active-block fraction.
LinearFit fit_time_vs_density(const std::vector<BenchRecord>& records);

/// Median of a non-empty sample.
double median(std::vector<double> values);

}  // namespace shadowtune
