// Copyright (c) 2026, The shadowtune Authors
// SPDX-License-Identifier: Apache-2.0

#include "shadowtune/flops.hpp"

namespace shadowtune {

namespace {
thread_local MacCounter* active_counter = nullptr;
}

MacCounter::MacCounter() : previous_(active_counter) { active_counter = this; }

MacCounter::~MacCounter() { active_counter = previous_; }

std::uint64_t MacCounter::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

void count_macs(MacCategory c, std::uint64_t n) {
  if (active_counter != nullptr) active_counter->add(c, n);
}

}  // namespace shadowtune
