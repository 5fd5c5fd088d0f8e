// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora for smoke runs and desk-scale experiments.

#pragma once

#include <string>
#include <vector>

#include "ganlm/rng.hpp"

namespace ganlm {

struct SyntheticSpec {
  std::size_t content_symbols = 24;  // w0 .. w{n-1}
  std::size_t noise_symbols = 8;     // z0 .. z{n-1}
  std::size_t min_len = 4;
  std::size_t max_len = 10;
  double noise_rate = 0.3;  // chance of a noise token before each content token
};

inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (const auto& t : toks) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

inline std::vector<std::string> synthetic_tokens(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t n = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < n; ++i) toks.push_back("w" + std::to_string(rng.below(spec.content_symbols)));
  return toks;
}

inline std::vector<std::string> synthetic_sentences(std::size_t count, const SyntheticSpec& spec, Rng& rng) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(join_tokens(synthetic_tokens(spec, rng)));
  return out;
}

// Noisy-copy pairs: the source interleaves noise tokens into the content,
// the target is the clean content.
struct SyntheticPairs {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
};

inline SyntheticPairs noisy_copy_pairs(std::size_t count, const SyntheticSpec& spec, Rng& rng) {
  SyntheticPairs out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto clean = synthetic_tokens(spec, rng);
    std::vector<std::string> noisy;
    for (const auto& t : clean) {
      if (rng.uniform() < spec.noise_rate) noisy.push_back("z" + std::to_string(rng.below(spec.noise_symbols)));
      noisy.push_back(t);
    }
    out.sources.push_back(join_tokens(noisy));
    out.targets.push_back(join_tokens(clean));
  }
  return out;
}

// Every symbol of the task once, so vocabularies agree across splits.
inline std::vector<std::string> synthetic_alphabet(const SyntheticSpec& spec) {
  std::vector<std::string> line;
  for (std::size_t i = 0; i < spec.content_symbols; ++i) line.push_back("w" + std::to_string(i));
  for (std::size_t i = 0; i < spec.noise_symbols; ++i) line.push_back("z" + std::to_string(i));
  return {join_tokens(line)};
}

}  // namespace ganlm
