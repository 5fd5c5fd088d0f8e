// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Inference with the encoder and generator only.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "ganlm/error.hpp"
#include "ganlm/model.hpp"
#include "ganlm/tensor.hpp"
#include "ganlm/vocab.hpp"

namespace ganlm {

struct DecodeConfig {
  std::size_t beam_size = 1;  // 1 is greedy
  std::size_t max_len = 64;   // generated tokens, [EOS] included
  double length_penalty = 1.0;
  bool allow_special = false;  // when false, [PAD], [BOS] and [MASK] are never emitted

  void validate() const {
    if (beam_size == 0) throw ConfigError("decode: beam_size must be at least 1");
    if (max_len == 0) throw ConfigError("decode: max_len must be at least 1");
  }
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // generated ids, [EOS] last when finished
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / length^alpha
  bool finished = false;
};

namespace detail {

inline bool blocked(TokenId id, const DecodeConfig& cfg) {
  return !cfg.allow_special && (id == kPad || id == kBos || id == kMask);
}

inline double normalized(double log_prob, std::size_t length, double alpha) {
  return log_prob / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), alpha);
}

// Encoder output repeated `copies` times along the row axis.
template <typename T>
EncoderOutput<T> repeat_rows(const EncoderOutput<T>& enc, std::size_t copies) {
  if (copies == enc.rows) return enc;
  EncoderOutput<T> out;
  std::vector<Tensor<T>> parts(copies, enc.hidden);
  out.hidden = concat(parts, 0);
  out.rows = enc.rows * copies;
  out.length = enc.length;
  for (std::size_t i = 0; i < copies; ++i) out.mask.insert(out.mask.end(), enc.mask.begin(), enc.mask.end());
  return out;
}

// Log-softmax of the last position of every row: [rows, vocab].
template <typename T>
std::vector<double> next_log_probs(const EncoderOutput<T>& enc, const std::vector<std::vector<TokenId>>& prefixes,
                                   const ModelParams<T>& params) {
  const std::size_t rows = prefixes.size(), len = prefixes.front().size() + 1;
  std::vector<TokenId> ids;
  ids.reserve(rows * len);
  for (const auto& p : prefixes) {
    ids.push_back(kBos);
    ids.insert(ids.end(), p.begin(), p.end());
  }
  std::vector<std::uint8_t> mask(ids.size(), 1);
  Tensor<T> logits = generator_decode(enc, std::span<const TokenId>(ids), mask, params);
  Tensor<T> last = reshape(slice(logits, 1, len - 1, len), {rows, params.config.vocab_size});
  Tensor<T> lp = log_softmax(last, -1);
  return std::vector<double>(lp.data().begin(), lp.data().end());
}

}  // namespace detail

template <typename T>
EncoderOutput<T> encode_source(std::span<const TokenId> src, const ModelParams<T>& params) {
  if (src.empty()) throw ConfigError("decode: empty source");
  std::vector<std::uint8_t> mask(src.size(), 1);
  return encode(src, mask, 1, params);
}

// Beam search; beam_size 1 is greedy. Ties are broken by lower token id.
template <typename T>
Hypothesis beam_search(std::span<const TokenId> src, const ModelParams<T>& params, const DecodeConfig& cfg) {
  cfg.validate();
  NoGradGuard no_grad;
  const std::size_t V = params.config.vocab_size;
  const std::size_t max_len = std::min(cfg.max_len, params.config.max_positions);
  const EncoderOutput<T> enc = encode_source(src, params);

  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;
  for (std::size_t t = 0; t < max_len && !alive.empty(); ++t) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.tokens);
    const auto lp = detail::next_log_probs(detail::repeat_rows(enc, alive.size()), prefixes, params);

    struct Candidate {
      double log_prob;
      std::size_t beam;
      TokenId token;
    };
    std::vector<Candidate> pool;
    pool.reserve(alive.size() * V);
    for (std::size_t b = 0; b < alive.size(); ++b) {
      for (std::size_t v = 0; v < V; ++v) {
        if (detail::blocked(static_cast<TokenId>(v), cfg)) continue;
        pool.push_back({alive[b].log_prob + lp[b * V + v], b, static_cast<TokenId>(v)});
      }
    }
    const std::size_t keep = std::min(cfg.beam_size, pool.size());
    std::partial_sort(pool.begin(), pool.begin() + static_cast<long>(keep), pool.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis h = alive[pool[i].beam];
      h.tokens.push_back(pool[i].token);
      h.log_prob = pool[i].log_prob;
      h.score = detail::normalized(h.log_prob, h.tokens.size(), cfg.length_penalty);
      if (pool[i].token == kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
  }
  // Hypotheses cut at max_len compete unfinished.
  for (auto& h : alive) finished.push_back(std::move(h));
  return *std::max_element(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.score < b.score;
  });
}

template <typename T>
std::vector<TokenId> generate(std::span<const TokenId> src, const ModelParams<T>& params, const DecodeConfig& cfg) {
  return beam_search(src, params, cfg).tokens;
}

// Greedy decoding of many sources at once.
template <typename T>
std::vector<std::vector<TokenId>> greedy_batch(const std::vector<std::vector<TokenId>>& sources,
                                               const ModelParams<T>& params, const DecodeConfig& cfg) {
  cfg.validate();
  if (sources.empty()) return {};
  NoGradGuard no_grad;
  const std::size_t rows = sources.size(), V = params.config.vocab_size;
  const std::size_t max_len = std::min(cfg.max_len, params.config.max_positions);
  std::size_t width = 0;
  for (const auto& s : sources) {
    if (s.empty()) throw ConfigError("decode: empty source");
    width = std::max(width, s.size());
  }
  std::vector<TokenId> src(rows * width, kPad);
  std::vector<std::uint8_t> mask(rows * width, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(sources[r].begin(), sources[r].end(), src.begin() + static_cast<long>(r * width));
    std::fill_n(mask.begin() + static_cast<long>(r * width), sources[r].size(), 1);
  }
  const EncoderOutput<T> enc = encode(std::span<const TokenId>(src), mask, rows, params);

  std::vector<std::vector<TokenId>> out(rows);
  std::vector<bool> done(rows, false);
  std::size_t remaining = rows;
  for (std::size_t t = 0; t < max_len && remaining > 0; ++t) {
    const auto lp = detail::next_log_probs(enc, out, params);
    for (std::size_t r = 0; r < rows; ++r) {
      TokenId best = kEos;
      double best_lp = -std::numeric_limits<double>::infinity();
      for (std::size_t v = 0; v < V; ++v) {
        if (detail::blocked(static_cast<TokenId>(v), cfg)) continue;
        if (lp[r * V + v] > best_lp) {
          best_lp = lp[r * V + v];
          best = static_cast<TokenId>(v);
        }
      }
      // Finished rows keep emitting [EOS]; it is trimmed below.
      out[r].push_back(done[r] ? kEos : best);
      if (!done[r] && best == kEos) {
        done[r] = true;
        --remaining;
      }
    }
  }
  for (auto& o : out) {
    auto eos = std::find(o.begin(), o.end(), kEos);
    if (eos != o.end()) o.erase(eos + 1, o.end());
  }
  return out;
}

// Teacher-forced sum of log-probabilities of `trg` (taken as given; include
// [EOS] to score a finished sequence).
template <typename T>
double score(std::span<const TokenId> src, std::span<const TokenId> trg, const ModelParams<T>& params) {
  if (trg.empty()) throw ConfigError("score: empty target");
  NoGradGuard no_grad;
  const EncoderOutput<T> enc = encode_source(src, params);
  std::vector<TokenId> input{kBos};
  input.insert(input.end(), trg.begin(), trg.end() - 1);
  std::vector<std::uint8_t> mask(input.size(), 1);
  Tensor<T> lp = log_softmax(generator_decode(enc, std::span<const TokenId>(input), mask, params), -1);
  const std::size_t V = params.config.vocab_size;
  double total = 0.0;
  for (std::size_t t = 0; t < trg.size(); ++t) total += static_cast<double>(lp.data()[t * V + trg[t]]);
  return total;
}

inline std::vector<TokenId> strip_eos(std::vector<TokenId> ids) {
  auto eos = std::find(ids.begin(), ids.end(), kEos);
  ids.erase(eos, ids.end());
  return ids;
}

}  // namespace ganlm
