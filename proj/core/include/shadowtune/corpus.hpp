// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Seeded Markov token corpus. Every sequence starts with the BOS token and
// holds seq_len + 1 tokens, so it yields seq_len (input, target) pairs.

#include <cstddef>
#include <cstdint>
#include <vector>

namespace shadowtune {

struct CorpusConfig {
  std::size_t vocab = 256;
  std::size_t n_sequences = 64;
  std::size_t seq_len = 256;
  std::size_t n_topics = 8;           // topic of token t is (t - 1) % n_topics
  std::vector<std::size_t> topics;    // allowed topics; empty means all
  std::size_t branching = 4;          // successors per token
  double topic_locality = 0.8;        // chance a successor shares the token's topic
  double smoothing = 0.05;            // chance of a uniform jump among allowed tokens
  std::uint64_t seed = 0;

  void validate() const;
};

using Sequence = std::vector<std::int32_t>;

/// Deterministic in the config. The transition table is drawn first, then
/// the sequences, so a longer corpus extends a shorter one with the same seed.
std::vector<Sequence> gen_corpus(const CorpusConfig& cfg);

/// Tokens the config may emit after BOS.
std::vector<std::int32_t> allowed_tokens(const CorpusConfig& cfg);

}  // namespace shadowtune
