// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/corpus.hpp"

#include <algorithm>
#include <cmath>

#include "shadowtune/backbone.hpp"
#include "shadowtune/error.hpp"
#include "shadowtune/rng.hpp"

namespace shadowtune {

void CorpusConfig::validate() const {
  if (vocab < 2) throw ConfigError("corpus vocab must be at least 2");
  if (seq_len == 0) throw ConfigError("corpus seq_len must be positive");
  if (n_topics == 0) throw ConfigError("corpus needs at least one topic");
  for (auto t : topics)
    if (t >= n_topics) throw ConfigError("corpus topic " + std::to_string(t) + " out of range");
  if (branching == 0) throw ConfigError("corpus branching must be positive");
  if (!(topic_locality >= 0 && topic_locality <= 1)) throw ConfigError("topic_locality must lie in [0, 1]");
  if (!(smoothing >= 0 && smoothing <= 1)) throw ConfigError("smoothing must lie in [0, 1]");
  if (allowed_tokens(*this).empty()) throw ConfigError("corpus topics select no tokens");
}

std::vector<std::int32_t> allowed_tokens(const CorpusConfig& cfg) {
  std::vector<std::int32_t> out;
  for (std::size_t v = 1; v < cfg.vocab; ++v) {
    const auto topic = token_topic(static_cast<std::int32_t>(v), cfg.vocab, cfg.n_topics);
    if (cfg.topics.empty() || std::find(cfg.topics.begin(), cfg.topics.end(), topic) != cfg.topics.end())
      out.push_back(static_cast<std::int32_t>(v));
  }
  return out;
}

std::vector<Sequence> gen_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  const auto allowed = allowed_tokens(cfg);
  Rng rng(cfg.seed);

  std::vector<std::vector<std::int32_t>> by_topic(cfg.n_topics);
  for (auto v : allowed) by_topic[token_topic(v, cfg.vocab, cfg.n_topics)].push_back(v);

  struct Row {
    std::vector<std::int32_t> next;
    std::vector<double> cumulative;
  };
  std::vector<Row> table(cfg.vocab);
  for (auto v : allowed) {
    const auto& local = by_topic[token_topic(v, cfg.vocab, cfg.n_topics)];
    Row& row = table[static_cast<std::size_t>(v)];
    double total = 0;
    for (std::size_t k = 0; k < cfg.branching; ++k) {
      const auto& from = rng.bernoulli(cfg.topic_locality) ? local : allowed;
      row.next.push_back(from[rng.index(from.size())]);
      total += -std::log(1.0 - rng.uniform());
      row.cumulative.push_back(total);
    }
    for (auto& c : row.cumulative) c /= total;
  }

  std::vector<Sequence> corpus;
  corpus.reserve(cfg.n_sequences);
  for (std::size_t n = 0; n < cfg.n_sequences; ++n) {
    Sequence seq = {kBosToken, allowed[rng.index(allowed.size())]};
    while (seq.size() < cfg.seq_len + 1) {
      if (rng.bernoulli(cfg.smoothing)) {
        seq.push_back(allowed[rng.index(allowed.size())]);
        continue;
      }
      const Row& row = table[static_cast<std::size_t>(seq.back())];
      const double u = rng.uniform();
      const auto it = std::lower_bound(row.cumulative.begin(), row.cumulative.end(), u);
      seq.push_back(row.next[std::min<std::size_t>(static_cast<std::size_t>(it - row.cumulative.begin()),
                                                   row.next.size() - 1)]);
    }
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace shadowtune
