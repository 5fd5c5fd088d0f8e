// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ganlm/error.hpp"
#include "ganlm/tensor.hpp"

namespace ganlm {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kMask = 4;
inline constexpr std::array<std::string_view, 5> kSpecialTokens = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"};

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& tok : split_whitespace(text)) {
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

// Bidirectional token/id map. Ids 0-4 are always the special tokens, then any
// language tags, then corpus tokens. Reserved tokens are never reachable from
// text: encoding their literal spelling yields [UNK].
class Vocab {
 public:
  Vocab() : Vocab(std::vector<std::string>(kSpecialTokens.begin(), kSpecialTokens.end()), 0) {}

  // `tokens` must start with the five specials; the next `num_tags` entries
  // are language tags.
  Vocab(std::vector<std::string> tokens, std::size_t num_tags) : id_to_token_(std::move(tokens)) {
    if (id_to_token_.size() < kSpecialTokens.size() + num_tags) {
      throw ConfigError("vocab: fewer entries than reserved tokens");
    }
    for (std::size_t i = 0; i < kSpecialTokens.size(); ++i) {
      if (id_to_token_[i] != kSpecialTokens[i]) {
        throw ConfigError("vocab: entry " + std::to_string(i) + " must be " + std::string(kSpecialTokens[i]) +
                          ", found '" + id_to_token_[i] + "'");
      }
    }
    num_reserved_ = kSpecialTokens.size() + num_tags;
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
      if (id_to_token_[i].empty()) throw ConfigError("vocab: empty token at id " + std::to_string(i));
      if (!token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i)).second) {
        throw ConfigError("vocab: duplicate token '" + id_to_token_[i] + "'");
      }
    }
  }

  std::size_t size() const { return id_to_token_.size(); }
  std::size_t num_reserved() const { return num_reserved_; }
  std::size_t num_language_tags() const { return num_reserved_ - kSpecialTokens.size(); }

  // Id for a corpus token; [UNK] for unknown or reserved spellings.
  TokenId id_of(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end() || static_cast<std::size_t>(it->second) < num_reserved_) return kUnk;
    return it->second;
  }

  std::optional<TokenId> language_tag(std::string_view tag) const {
    for (std::size_t i = kSpecialTokens.size(); i < num_reserved_; ++i) {
      if (id_to_token_[i] == tag) return static_cast<TokenId>(i);
    }
    return std::nullopt;
  }

  const std::string& token_of(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      throw ConfigError("vocab: id " + std::to_string(id) + " out of range for vocab of " +
                        std::to_string(id_to_token_.size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::span<const std::string> tokens() const { return id_to_token_; }

  // One token per line; line number is the id. The language-tag count is not
  // part of the file and is passed back to load().
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("vocab: cannot write " + path.string());
    for (const auto& tok : id_to_token_) out << tok << '\n';
    if (!out) throw IoError("vocab: write failed for " + path.string());
  }

  static Vocab load(const std::filesystem::path& path, std::size_t num_tags = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("vocab: cannot read " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      tokens.push_back(line);
    }
    return Vocab(std::move(tokens), num_tags);
  }

  static bool is_tag_spelling(std::string_view tok) {
    return tok.size() > 2 && tok.front() == '<' && tok.back() == '>';
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::size_t num_reserved_ = kSpecialTokens.size();
};

// Corpus tokens ordered by (frequency desc, lexicographic) after the reserved
// block. Tokens seen fewer than min_freq times are dropped; max_size caps the
// total size including reserved tokens (0 = unlimited).
inline Vocab build_vocab(std::span<const std::string> corpus_lines, std::size_t min_freq = 1,
                         std::size_t max_size = 0, const std::vector<std::string>& language_tags = {}) {
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be at least 1");
  for (const auto& tag : language_tags) {
    if (!Vocab::is_tag_spelling(tag)) throw ConfigError("build_vocab: language tag '" + tag + "' must look like <xx>");
  }
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& line : corpus_lines) {
    for (auto& tok : split_whitespace(line)) {
      ++counts[std::move(tok)];
      ++total;
    }
  }
  if (total == 0) throw ConfigError("build_vocab: empty corpus");

  std::vector<std::string> tokens(kSpecialTokens.begin(), kSpecialTokens.end());
  tokens.insert(tokens.end(), language_tags.begin(), language_tags.end());
  const std::size_t reserved = tokens.size();
  if (max_size != 0 && max_size < reserved) {
    throw ConfigError("build_vocab: max_size " + std::to_string(max_size) + " below reserved token count");
  }

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, count] : counts) {
    if (count < min_freq) continue;
    const bool reserved_spelling = std::find(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(reserved),
                                             tok) != tokens.begin() + static_cast<std::ptrdiff_t>(reserved);
    if (reserved_spelling) continue;
    ranked.emplace_back(tok, count);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (auto& [tok, count] : ranked) {
    if (max_size != 0 && tokens.size() >= max_size) break;
    tokens.push_back(std::move(tok));
  }
  return Vocab(std::move(tokens), language_tags.size());
}

inline Vocab build_vocab(std::istream& corpus, std::size_t min_freq = 1, std::size_t max_size = 0,
                         const std::vector<std::string>& language_tags = {}) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(corpus, line)) lines.push_back(std::move(line));
  return build_vocab(std::span<const std::string>(lines), min_freq, max_size, language_tags);
}

inline std::vector<TokenId> encode(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& tok : split_whitespace(text)) ids.push_back(vocab.id_of(tok));
  return ids;
}

inline std::string decode(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += vocab.token_of(ids[i]);
  }
  return out;
}

}  // namespace ganlm
