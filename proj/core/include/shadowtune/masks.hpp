// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace shadowtune {

/// Active/inactive flag per MLP neuron block. A block's flag governs both its
/// W1 columns and its W2 rows.
class NeuronBlockMask {
 public:
  NeuronBlockMask() = default;
  explicit NeuronBlockMask(std::size_t n_blocks, bool active = true)
      : bits_(n_blocks, active ? 1 : 0) {}
  explicit NeuronBlockMask(const std::vector<int>& flags) {
    bits_.reserve(flags.size());
    for (int f : flags) bits_.push_back(f != 0 ? 1 : 0);
  }

  static NeuronBlockMask all_active(std::size_t n) { return NeuronBlockMask(n, true); }
  static NeuronBlockMask none_active(std::size_t n) { return NeuronBlockMask(n, false); }

  std::size_t size() const { return bits_.size(); }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set(std::size_t i, bool active) { bits_[i] = active ? 1 : 0; }

  std::size_t active_count() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }

  std::vector<std::uint32_t> active_blocks() const {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i]) out.push_back(static_cast<std::uint32_t>(i));
    return out;
  }

  /// Elementwise OR into this mask. Sizes must agree.
  NeuronBlockMask& operator|=(const NeuronBlockMask& other);

  bool operator==(const NeuronBlockMask&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

/// One atomic-pattern id per attention head.
struct HeadPatternAssignment {
  std::vector<std::size_t> pattern_ids;

  std::size_t n_heads() const { return pattern_ids.size(); }
  bool operator==(const HeadPatternAssignment&) const = default;
};

}  // namespace shadowtune
