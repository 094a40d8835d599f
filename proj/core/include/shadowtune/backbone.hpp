// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Frozen backbone construction. The structured style builds weights with
// known positional attention heads and topic-selective MLP neuron blocks,
// standing in for a pretrained checkpoint at desk scale.

#include <cstddef>
#include <cstdint>
#include <string>

#include "shadowtune/model.hpp"

namespace shadowtune {

inline constexpr std::int32_t kBosToken = 0;

enum class BackboneStyle { kRandom, kStructured };
const char* backbone_style_name(BackboneStyle s);
BackboneStyle parse_backbone_style(const std::string& name);

struct BackboneConfig {
  BackboneStyle style = BackboneStyle::kStructured;
  std::size_t n_topics = 8;
  std::size_t n_pos = 16;          // token-level sinusoid dims
  double pos_amp = 1.0;
  double topic_amp = 2.0;
  double bos_amp = 3.0;
  double token_noise = 1.0;        // norm of the token-specific embedding part
  double local_gain = 0.8;         // local heads: scale on positional dims
  double stride_gain = 1.8;        // strided heads: scale on block-phase dims
  double global_gain = 3.0;        // BOS-attending heads
  double content_gain = 1.0;
  double attn_noise = 0.02;
  double attn_out = 0.15;
  double mlp_gain = 1.0;           // W1 weight on the topic feature
  double mlp_bias = 4.0;           // negative W1 bias
  double mlp_noise = 0.5;
  double mlp_out = 0.1;
  double logit_gain = 8.0;         // structured logit scale is logit_gain / sqrt(d)
};

/// Topic of a token; BOS and out-of-range ids map to n_topics.
std::size_t token_topic(std::int32_t token, std::size_t vocab, std::size_t n_topics);

/// Embedding dimensions reserved for structure (positional, BOS flag, topics).
std::size_t reserved_dims(const BackboneConfig& cfg, const ModelDims& dims);

/// seq_len x d positional table; non-zero only in the reserved positional dims.
Tensor positional_table(const ModelDims& dims, const BackboneConfig& cfg);

/// Deterministic in `seed`. Throws ConfigError when the structured layout
/// does not fit d_model.
FrozenWeights<float> init_backbone(const ModelDims& dims, const BackboneConfig& cfg, std::uint64_t seed);

/// Hex SHA-256 over every frozen tensor's bytes in a fixed order.
std::string frozen_digest(const FrozenWeights<float>& w);

}  // namespace shadowtune
