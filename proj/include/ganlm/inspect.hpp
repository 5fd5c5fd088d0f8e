// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Text dump of one pre-training batch after the generator, discriminator and
// noisy-context stages.

#pragma once

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ganlm/corruption.hpp"
#include "ganlm/objectives.hpp"
#include "ganlm/vocab.hpp"

namespace ganlm {

struct InspectedRow {
  std::vector<std::string> src;      // with [MASK]
  std::vector<std::string> gold;     // target tokens, [EOS] last
  std::vector<std::string> sampled;  // generator samples, gold where unscored
  std::vector<int> labels;           // 1 original, 0 replaced, -1 unscored
  std::vector<double> original_prob;
  std::vector<std::size_t> v;  // positions handed to the noisy context
  std::vector<std::string> noisy;
};

template <typename T>
std::vector<InspectedRow> inspect_rows(const PretrainBatch& batch, const TrainStepOutput<T>& out, const Vocab& vocab) {
  std::vector<InspectedRow> rows(batch.rows);
  const std::size_t S = batch.src_len, L = batch.trg_len;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    InspectedRow& row = rows[r];
    for (std::size_t i = 0; i < S; ++i) {
      if (batch.src_mask[r * S + i]) row.src.push_back(vocab.token_of(batch.src[r * S + i]));
    }
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t k = r * L + t;
      if (!batch.trg_mask[k]) continue;
      row.gold.push_back(vocab.token_of(batch.trg_out[k]));
      row.sampled.push_back(out.sampled.empty() ? row.gold.back() : vocab.token_of(out.sampled[k]));
      row.labels.push_back(out.scored.empty() || !out.scored[k] ? -1 : out.labels[k]);
      row.original_prob.push_back(out.original_probs.empty() ? 1.0 : out.original_probs[k]);
      row.noisy.push_back(out.noisy.noisy_ids.empty() ? row.gold.back() : vocab.token_of(out.noisy.noisy_ids[k]));
    }
    for (std::size_t pos : out.noisy.positions) {
      if (pos / L == r) row.v.push_back(pos % L);
    }
  }
  return rows;
}

// Replaced samples and noisy-context substitutions are marked with '*'.
inline std::string format_inspection(const std::vector<InspectedRow>& rows) {
  std::ostringstream os;
  auto join = [](const std::vector<std::string>& toks) {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) s += (i ? " " : "") + toks[i];
    return s;
  };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const InspectedRow& row = rows[r];
    std::vector<std::string> sampled = row.sampled, noisy = row.noisy, labels, probs;
    for (std::size_t t = 0; t < row.gold.size(); ++t) {
      if (row.labels[t] == 0) sampled[t] = "*" + sampled[t] + "*";
      if (std::find(row.v.begin(), row.v.end(), t) != row.v.end()) noisy[t] = "*" + noisy[t] + "*";
      labels.push_back(row.labels[t] < 0 ? "-" : std::to_string(row.labels[t]));
      std::ostringstream p;
      p << std::fixed << std::setprecision(3) << row.original_prob[t];
      probs.push_back(row.labels[t] < 0 ? "-" : p.str());
    }
    std::vector<std::string> v;
    for (std::size_t t : row.v) v.push_back(std::to_string(t));
    os << "row " << r << '\n';
    os << "  src      " << join(row.src) << '\n';
    os << "  gold     " << join(row.gold) << '\n';
    os << "  sampled  " << join(sampled) << '\n';
    os << "  labels   " << join(labels) << '\n';
    os << "  D(orig)  " << join(probs) << '\n';
    os << "  v        " << (v.empty() ? "(none)" : join(v)) << '\n';
    os << "  noisy    " << join(noisy) << '\n';
  }
  return os.str();
}

}  // namespace ganlm
