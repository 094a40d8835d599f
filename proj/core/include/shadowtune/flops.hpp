// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace shadowtune {

/// What a counted operation belongs to.
enum class MacCategory : std::size_t {
  kAttentionScores,   // sdd
  kAttentionContext,  // dsd and its transpose
  kNeuronUp,          // first MLP linear (active columns)
  kNeuronDown,        // second MLP linear (active rows)
  kPredictorAttn,     // downsampled Q̂/K̂ projections and Q̂K̂ᵀ
  kPredictorMlp,      // X·Ŵ_A
  kPredictorReduce,   // batch/sequence OR reductions, one word-OR per token row
  kCount
};

/// Counting convention: one unit per multiply-accumulate; thresholding,
/// bias adds and softmax are not counted; an OR over a packed bitmask row of
/// at most 64 blocks counts one unit.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t get(MacCategory c) const { return counts_[static_cast<std::size_t>(c)]; }
  std::uint64_t total() const;
  void reset() { counts_.fill(0); }
  void add(MacCategory c, std::uint64_t n) { counts_[static_cast<std::size_t>(c)] += n; }

 private:
  std::array<std::uint64_t, static_cast<std::size_t>(MacCategory::kCount)> counts_{};
  MacCounter* previous_;
};

/// Adds to the innermost live MacCounter on this thread; no-op when none.
void count_macs(MacCategory c, std::uint64_t n);

}  // namespace shadowtune
