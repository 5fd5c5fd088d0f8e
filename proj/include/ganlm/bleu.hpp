// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Corpus BLEU over whitespace tokens: clipped n-gram precisions for
// n = 1..4 pooled over the corpus, geometric mean with uniform weights, and
// brevity penalty exp(1 - r/c) when the hypothesis total c is below the
// reference total r. Orders with no hypothesis n-grams at all (every
// hypothesis shorter than n) are left out of the mean. Reported on 0..100.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ganlm/error.hpp"
#include "ganlm/vocab.hpp"

namespace ganlm {

struct BleuStats {
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

struct BleuResult {
  double bleu = 0.0;
  double brevity_penalty = 1.0;
  double precisions[4] = {0, 0, 0, 0};
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

inline void accumulate_bleu(BleuStats& stats, const std::vector<std::string>& hyp,
                            const std::vector<std::string>& ref) {
  stats.hyp_length += hyp.size();
  stats.ref_length += ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    if (hyp.size() < n) continue;
    std::map<std::vector<std::string>, std::size_t> ref_counts, hyp_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hyp_counts[{hyp.begin() + i, hyp.begin() + i + n}];
    for (const auto& [gram, count] : hyp_counts) {
      auto it = ref_counts.find(gram);
      stats.matches[n - 1] += std::min(count, it == ref_counts.end() ? 0 : it->second);
    }
    stats.totals[n - 1] += hyp.size() - n + 1;
  }
}

inline BleuResult bleu_from_stats(const BleuStats& s) {
  BleuResult r;
  r.hyp_length = s.hyp_length;
  r.ref_length = s.ref_length;
  if (s.hyp_length == 0) return r;
  double log_sum = 0.0;
  std::size_t orders = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.totals[n] == 0) continue;
    r.precisions[n] = static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]);
    if (s.matches[n] == 0) zero = true;
    else log_sum += std::log(r.precisions[n]);
    ++orders;
  }
  r.brevity_penalty = s.hyp_length < s.ref_length
                          ? std::exp(1.0 - static_cast<double>(s.ref_length) / static_cast<double>(s.hyp_length))
                          : 1.0;
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / static_cast<double>(orders));
  return r;
}

inline BleuResult corpus_bleu(std::span<const std::string> hyps, std::span<const std::string> refs) {
  if (hyps.size() != refs.size()) {
    throw ConfigError("bleu: " + std::to_string(hyps.size()) + " hypotheses but " + std::to_string(refs.size()) +
                      " references");
  }
  BleuStats stats;
  for (std::size_t i = 0; i < hyps.size(); ++i) accumulate_bleu(stats, split_whitespace(hyps[i]), split_whitespace(refs[i]));
  return bleu_from_stats(stats);
}

// Fraction of lines whose token sequences match exactly.
inline double exact_match(std::span<const std::string> hyps, std::span<const std::string> refs) {
  if (hyps.size() != refs.size()) throw ConfigError("exact_match: line counts differ");
  if (hyps.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) hits += split_whitespace(hyps[i]) == split_whitespace(refs[i]);
  return static_cast<double>(hits) / static_cast<double>(hyps.size());
}

}  // namespace ganlm
