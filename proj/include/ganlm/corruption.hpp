// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Span corruption: sample spans, replace every covered token with [MASK] in
// the source, and collect the covered tokens (plus [EOS]) as the target.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/error.hpp"
#include "ganlm/rng.hpp"
#include "ganlm/tensor.hpp"
#include "ganlm/vocab.hpp"

namespace ganlm {

// Inclusive token range [begin, end].
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - begin + 1; }
  friend bool operator==(const Span&, const Span&) = default;
};

// Sorted, non-overlapping spans over one sequence.
struct SpanSet {
  std::vector<Span> spans;

  bool empty() const { return spans.empty(); }
  std::size_t covered() const {
    std::size_t n = 0;
    for (const auto& s : spans) n += s.length();
    return n;
  }
  friend bool operator==(const SpanSet&, const SpanSet&) = default;
};

inline constexpr std::size_t kMaxSpanLength = 10;

// Draws spans until the masked-token budget round(mask_ratio * n) is met.
// Lengths are geometric with mean `mean_span`, clipped to [1, max_span]. When
// a drawn span would overshoot the remaining budget r, it is kept whole with
// probability r / length and otherwise sampling stops, so the expected
// coverage equals the budget without truncating span lengths. The first span
// is redrawn instead of stopping, so at least one token is masked whenever
// mask_ratio > 0. A single span never covers a whole sequence longer than one
// token.
inline SpanSet sample_spans(std::size_t n, double mask_ratio, double mean_span, Rng& rng,
                            std::size_t max_span = kMaxSpanLength) {
  if (mask_ratio < 0.0 || mask_ratio >= 1.0) throw ConfigError("sample_spans: mask_ratio must lie in [0, 1)");
  if (mean_span < 1.0) throw ConfigError("sample_spans: mean_span must be at least 1");
  SpanSet out;
  if (n == 0 || mask_ratio == 0.0) return out;

  std::size_t budget = static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(n)));
  budget = std::clamp<std::size_t>(budget, 1, n);
  const double p = 1.0 / mean_span;

  std::vector<std::uint8_t> taken(n, 0);
  std::size_t covered = 0;
  std::vector<std::size_t> candidates;
  auto fits = [&](std::size_t start, std::size_t len, bool need_gap) {
    for (std::size_t i = start; i < start + len; ++i) {
      if (taken[i]) return false;
    }
    if (need_gap) {
      if (start > 0 && taken[start - 1]) return false;
      if (start + len < n && taken[start + len]) return false;
    }
    return true;
  };

  while (covered < budget) {
    std::size_t len = std::min<std::size_t>({rng.geometric(p), max_span, std::max<std::size_t>(n - 1, 1)});
    const std::size_t remaining = budget - covered;
    if (len > remaining) {
      const double keep = static_cast<double>(remaining) / static_cast<double>(len);
      if (rng.uniform() >= keep) {
        if (out.spans.empty()) continue;
        break;
      }
    }
    bool placed = false;
    for (; len >= 1 && !placed; --len) {
      for (const bool need_gap : {true, false}) {
        candidates.clear();
        for (std::size_t s = 0; s + len <= n; ++s) {
          if (fits(s, len, need_gap)) candidates.push_back(s);
        }
        if (candidates.empty()) continue;
        const std::size_t start = candidates[rng.below(candidates.size())];
        std::fill(taken.begin() + static_cast<std::ptrdiff_t>(start),
                  taken.begin() + static_cast<std::ptrdiff_t>(start + len), 1);
        out.spans.push_back({start, start + len - 1});
        covered += len;
        placed = true;
        break;
      }
      if (placed) break;
    }
    if (!placed) break;  // sequence fully covered
  }
  std::sort(out.spans.begin(), out.spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
  return out;
}

// One pre-training instance.
struct MaskedPair {
  std::vector<TokenId> src_ids;       // original with masked positions set to [MASK]
  std::vector<TokenId> trg_ids;       // masked tokens in order, then [EOS]
  std::vector<std::size_t> span_map;  // trg position -> original index (excludes [EOS])
  std::vector<TokenId> original_ids;
  int language = 0;
};

inline MaskedPair apply_mask(std::span<const TokenId> original, const SpanSet& spans, int language = 0) {
  MaskedPair pair;
  pair.original_ids.assign(original.begin(), original.end());
  pair.src_ids = pair.original_ids;
  pair.language = language;
  std::size_t prev_end = 0;
  bool first = true;
  for (const auto& span : spans.spans) {
    if (span.begin > span.end || span.end >= original.size()) {
      throw ConfigError("apply_mask: span [" + std::to_string(span.begin) + "," + std::to_string(span.end) +
                        "] out of bounds for sequence of " + std::to_string(original.size()));
    }
    if (!first && span.begin <= prev_end) throw ConfigError("apply_mask: spans overlap or are unsorted");
    for (std::size_t i = span.begin; i <= span.end; ++i) {
      pair.src_ids[i] = kMask;
      pair.trg_ids.push_back(original[i]);
      pair.span_map.push_back(i);
    }
    prev_end = span.end;
    first = false;
  }
  pair.trg_ids.push_back(kEos);
  return pair;
}

// Writes the target tokens back through span_map into the source.
inline std::vector<TokenId> reconstruct(const MaskedPair& pair) {
  std::vector<TokenId> out = pair.src_ids;
  for (std::size_t t = 0; t < pair.span_map.size(); ++t) out.at(pair.span_map[t]) = pair.trg_ids.at(t);
  return out;
}

// Padded seq2seq batch, row-major [rows, len]. Masks are 1 on real tokens.
struct PretrainBatch {
  std::size_t rows = 0;
  std::size_t src_len = 0;
  std::size_t trg_len = 0;
  std::vector<TokenId> src;
  std::vector<std::uint8_t> src_mask;
  std::vector<TokenId> trg_in;   // [BOS] + trg[:-1]
  std::vector<TokenId> trg_out;  // gold target
  std::vector<std::uint8_t> trg_mask;
  std::vector<std::vector<std::size_t>> span_maps;
  std::vector<int> language;
  std::vector<std::size_t> source_index;  // input position of each row

  std::size_t src_tokens() const { return static_cast<std::size_t>(std::count(src_mask.begin(), src_mask.end(), 1)); }
  std::size_t trg_tokens() const { return static_cast<std::size_t>(std::count(trg_mask.begin(), trg_mask.end(), 1)); }
};

namespace detail {

struct RowView {
  std::span<const TokenId> src;
  std::span<const TokenId> trg;  // ends with [EOS]
  const std::vector<std::size_t>* span_map;
  int language;
};

inline PretrainBatch assemble_batch(const std::vector<RowView>& rows, std::size_t max_positions) {
  if (rows.empty()) throw ConfigError("make_batch: no pairs");
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].src.empty()) throw ConfigError("make_batch: pair " + std::to_string(i) + " has an empty source");
    if (rows[i].src.size() > max_positions || rows[i].trg.size() > max_positions) {
      throw ConfigError("make_batch: pair " + std::to_string(i) + " (source " + std::to_string(rows[i].src.size()) +
                        ", target " + std::to_string(rows[i].trg.size()) + " tokens) exceeds " +
                        std::to_string(max_positions) + " positions");
    }
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rows[a].src.size() < rows[b].src.size(); });

  PretrainBatch batch;
  batch.rows = rows.size();
  for (const auto& r : rows) {
    batch.src_len = std::max(batch.src_len, r.src.size());
    batch.trg_len = std::max(batch.trg_len, r.trg.size());
  }
  batch.src.assign(batch.rows * batch.src_len, kPad);
  batch.src_mask.assign(batch.rows * batch.src_len, 0);
  batch.trg_in.assign(batch.rows * batch.trg_len, kPad);
  batch.trg_out.assign(batch.rows * batch.trg_len, kPad);
  batch.trg_mask.assign(batch.rows * batch.trg_len, 0);
  for (std::size_t row = 0; row < batch.rows; ++row) {
    const auto& r = rows[order[row]];
    for (std::size_t i = 0; i < r.src.size(); ++i) {
      batch.src[row * batch.src_len + i] = r.src[i];
      batch.src_mask[row * batch.src_len + i] = 1;
    }
    for (std::size_t t = 0; t < r.trg.size(); ++t) {
      batch.trg_out[row * batch.trg_len + t] = r.trg[t];
      batch.trg_in[row * batch.trg_len + t] = t == 0 ? kBos : r.trg[t - 1];
      batch.trg_mask[row * batch.trg_len + t] = 1;
    }
    batch.span_maps.push_back(r.span_map ? *r.span_map : std::vector<std::size_t>{});
    batch.language.push_back(r.language);
    batch.source_index.push_back(order[row]);
  }
  return batch;
}

}  // namespace detail

// Rows are sorted by source length (ascending, stable) to reduce padding.
inline PretrainBatch make_batch(std::span<const MaskedPair> pairs, std::size_t max_positions) {
  std::vector<detail::RowView> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) rows.push_back({p.src_ids, p.trg_ids, &p.span_map, p.language});
  return detail::assemble_batch(rows, max_positions);
}

// Batch of parallel (x, y) examples without masking. Targets are given
// without [EOS]; one is appended here.
inline PretrainBatch make_parallel_batch(std::span<const std::vector<TokenId>> sources,
                                         std::span<const std::vector<TokenId>> targets, std::size_t max_positions,
                                         int language = 0) {
  if (sources.size() != targets.size()) {
    throw ConfigError("make_parallel_batch: " + std::to_string(sources.size()) + " sources vs " +
                      std::to_string(targets.size()) + " targets");
  }
  std::vector<std::vector<TokenId>> with_eos;
  with_eos.reserve(targets.size());
  for (const auto& t : targets) {
    with_eos.push_back(t);
    with_eos.back().push_back(kEos);
  }
  std::vector<detail::RowView> rows;
  for (std::size_t i = 0; i < sources.size(); ++i) rows.push_back({sources[i], with_eos[i], nullptr, language});
  return detail::assemble_batch(rows, max_positions);
}

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

struct CorpusEntry {
  std::filesystem::path path;
  std::string language_tag;
};

// Manifest: JSON list of {"path": ..., "language_tag": ...}; relative paths
// resolve against the manifest's directory.
inline std::vector<CorpusEntry> load_corpus_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot read corpus manifest " + manifest.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("corpus manifest " + manifest.string() + ": " + e.what());
  }
  if (!doc.is_array() || doc.empty()) throw ConfigError("corpus manifest must be a non-empty JSON list");
  std::vector<CorpusEntry> out;
  for (const auto& item : doc) {
    if (!item.is_object() || !item.contains("path")) throw ConfigError("corpus manifest entry lacks \"path\"");
    CorpusEntry entry;
    entry.path = item.at("path").get<std::string>();
    if (entry.path.is_relative()) entry.path = manifest.parent_path() / entry.path;
    entry.language_tag = item.value("language_tag", std::string());
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace ganlm
