// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives:
//   L_G   teacher-forced (label-smoothed) cross-entropy of the generator
//   L_D   replaced-token detection, BCE on the discriminator's P(ORIGINAL)
//   L_DG  replaced-token denoising, cross-entropy on the gold target with the
//         decoder fed a context corrupted at the discriminator's mistakes
// combined = L_G + lambda * L_D + L_DG.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ganlm/corruption.hpp"
#include "ganlm/error.hpp"
#include "ganlm/model.hpp"
#include "ganlm/rng.hpp"
#include "ganlm/tensor.hpp"
#include "ganlm/vocab.hpp"

namespace ganlm {

// Detection labels: 1 = ORIGINAL (sampled token equals gold), 0 = REPLACED.
inline constexpr std::uint8_t kOriginal = 1;
inline constexpr std::uint8_t kReplaced = 0;

// Per-position categorical distributions, row-major [rows, vocab].
struct CategoricalTable {
  std::size_t rows = 0;
  std::size_t vocab = 0;
  std::vector<double> probs;

  std::span<const double> row(std::size_t i) const { return std::span<const double>(probs).subspan(i * vocab, vocab); }
};

template <typename T>
CategoricalTable categorical_from_logits(const Tensor<T>& logits, double temperature = 1.0) {
  if (temperature <= 0.0) throw ConfigError("sampling: temperature must be positive");
  CategoricalTable table;
  table.vocab = logits.dim(-1);
  table.rows = logits.numel() / table.vocab;
  table.probs.resize(logits.numel());
  auto x = logits.data();
  for (std::size_t r = 0; r < table.rows; ++r) {
    const T* row = x.data() + r * table.vocab;
    double mx = static_cast<double>(row[0]) / temperature;
    for (std::size_t v = 1; v < table.vocab; ++v) mx = std::max(mx, static_cast<double>(row[v]) / temperature);
    double z = 0.0;
    for (std::size_t v = 0; v < table.vocab; ++v) {
      const double e = std::exp(static_cast<double>(row[v]) / temperature - mx);
      table.probs[r * table.vocab + v] = e;
      z += e;
    }
    for (std::size_t v = 0; v < table.vocab; ++v) table.probs[r * table.vocab + v] /= z;
  }
  return table;
}

// Inverse-CDF draw from one row.
inline TokenId draw_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t v = 0; v < probs.size(); ++v) {
    if (probs[v] <= 0.0) continue;
    acc += probs[v];
    last_nonzero = v;
    if (u < acc) return static_cast<TokenId>(v);
  }
  return static_cast<TokenId>(last_nonzero);
}

// One independent draw per position; one uniform is consumed per row.
inline std::vector<TokenId> sample_tokens(const CategoricalTable& table, Rng& rng) {
  std::vector<TokenId> out(table.rows);
  for (std::size_t r = 0; r < table.rows; ++r) out[r] = draw_categorical(table.row(r), rng);
  return out;
}

template <typename T>
std::vector<TokenId> sample_tokens(const Tensor<T>& logits, double temperature, Rng& rng) {
  return sample_tokens(categorical_from_logits(logits, temperature), rng);
}

inline std::vector<std::uint8_t> replaced_labels(std::span<const TokenId> sampled, std::span<const TokenId> gold) {
  if (sampled.size() != gold.size()) throw ShapeError("replaced_labels: sampled and gold lengths differ");
  std::vector<std::uint8_t> labels(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) labels[i] = sampled[i] == gold[i] ? kOriginal : kReplaced;
  return labels;
}

// Positions scored by the detector: real tokens other than [EOS].
inline std::vector<std::uint8_t> detection_mask(std::span<const TokenId> gold, std::span<const std::uint8_t> trg_mask) {
  std::vector<std::uint8_t> mask(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) mask[i] = trg_mask[i] && gold[i] != kEos && gold[i] != kPad;
  return mask;
}

// Token-mean cross-entropy over positions with trg_mask set.
template <typename T>
Tensor<T> generator_loss(const Tensor<T>& logits, std::span<const TokenId> gold, std::span<const std::uint8_t> trg_mask,
                         double smoothing) {
  if (gold.size() != trg_mask.size()) throw ShapeError("generator_loss: gold and mask lengths differ");
  std::vector<TokenId> targets(gold.begin(), gold.end());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!trg_mask[i]) targets[i] = -1;
  }
  try {
    return cross_entropy(logits, std::span<const TokenId>(targets), smoothing, -1);
  } catch (const NumericError&) {
    throw NumericError("generator_loss: every target position is padding");
  }
}

// Mean over masked-in positions of -[1(orig) log V + 1(replaced) log(1 - V)].
template <typename T>
Tensor<T> detection_loss(const Tensor<T>& probs, std::span<const std::uint8_t> labels,
                         std::span<const std::uint8_t> mask) {
  return binary_cross_entropy(probs, labels, mask);
}

// Indices where the thresholded prediction (V >= threshold means ORIGINAL)
// disagrees with the true label, restricted to mask.
template <typename V>
std::vector<std::size_t> misclassified_positions(std::span<const V> probs, std::span<const std::uint8_t> labels,
                                                 std::span<const std::uint8_t> mask, double threshold = 0.5) {
  if (probs.size() != labels.size() || probs.size() != mask.size()) {
    throw ShapeError("misclassified_positions: length mismatch");
  }
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (!mask[t]) continue;
    const bool predicted_original = static_cast<double>(probs[t]) >= threshold;
    if (predicted_original != (labels[t] == kOriginal)) out.push_back(t);
  }
  return out;
}

struct NoisyContext {
  std::vector<TokenId> noisy_ids;
  std::vector<std::size_t> positions;  // v
  std::size_t p() const { return positions.size(); }
};

// Draw from a row with `excluded` removed and the rest renormalized. Falls
// back to uniform over the other tokens when they carry no mass.
inline TokenId draw_excluding(std::span<const double> probs, TokenId excluded, Rng& rng) {
  const std::size_t vocab = probs.size();
  if (vocab < 2) throw ConfigError("resample: vocabulary of size 1 leaves nothing to draw");
  double rest = 0.0;
  for (std::size_t v = 0; v < vocab; ++v) {
    if (static_cast<TokenId>(v) != excluded) rest += probs[v];
  }
  const double u = rng.uniform();
  if (!(rest > 0.0)) {
    auto pick = static_cast<TokenId>(std::min<std::size_t>(static_cast<std::size_t>(u * double(vocab - 1)), vocab - 2));
    return pick >= excluded ? pick + 1 : pick;
  }
  const double target = u * rest;
  double acc = 0.0;
  TokenId last = excluded == 0 ? 1 : 0;
  for (std::size_t v = 0; v < vocab; ++v) {
    if (static_cast<TokenId>(v) == excluded || probs[v] <= 0.0) continue;
    acc += probs[v];
    last = static_cast<TokenId>(v);
    if (target < acc) return last;
  }
  return last;
}

// At every position in v the gold token is replaced: by the sampled token if
// it already differs from gold, otherwise by a resample that excludes gold.
inline NoisyContext build_noisy_context(std::span<const TokenId> gold, std::span<const TokenId> sampled,
                                        const CategoricalTable& distributions, std::span<const std::size_t> v,
                                        Rng& rng) {
  if (gold.size() != sampled.size()) throw ShapeError("build_noisy_context: gold and sampled lengths differ");
  NoisyContext ctx;
  ctx.noisy_ids.assign(gold.begin(), gold.end());
  ctx.positions.assign(v.begin(), v.end());
  for (std::size_t t : v) {
    if (t >= gold.size()) throw ShapeError("build_noisy_context: position " + std::to_string(t) + " out of range");
    if (sampled[t] != gold[t]) {
      ctx.noisy_ids[t] = sampled[t];
    } else {
      if (distributions.vocab < 2) throw ConfigError("build_noisy_context: vocabulary of size 1 admits no replacement");
      ctx.noisy_ids[t] = draw_excluding(distributions.row(t), gold[t], rng);
    }
  }
  return ctx;
}

// Decoder input [BOS] + ids[:-1] for each row of a [rows, len] target.
inline std::vector<TokenId> shift_right(std::span<const TokenId> ids, std::span<const std::uint8_t> mask,
                                        std::size_t rows) {
  const std::size_t len = ids.size() / rows;
  std::vector<TokenId> out(ids.size(), kPad);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < len; ++t) {
      if (!mask[r * len + t]) continue;
      out[r * len + t] = t == 0 ? kBos : ids[r * len + t - 1];
    }
  }
  return out;
}

enum class ReplacementPolicy {
  kMisclassified,  // v = discriminator mistakes
  kAllPositions,   // v = every scored position
  kNone,           // v = {} (denoising sees the gold context)
};

enum class DenoiseDecoder { kGenerator, kDiscriminator };

enum class FinetuneMode { kG, kD, kGD };

struct ObjectiveConfig {
  double lambda = 10.0;
  double smoothing = 0.0;
  double temperature = 1.0;
  double threshold = 0.5;
  bool use_detection = true;
  bool use_denoising = true;
  bool use_generator_loss = true;
  ReplacementPolicy policy = ReplacementPolicy::kMisclassified;
  DenoiseDecoder denoise_decoder = DenoiseDecoder::kGenerator;
};

template <typename T>
struct TrainStepOutput {
  Tensor<T> loss;  // differentiable combined loss
  double generator_loss = 0.0;
  double detection_loss = 0.0;
  double denoising_loss = 0.0;
  double combined = 0.0;
  double detection_accuracy = 1.0;
  double replaced_rate = 0.0;
  std::size_t p = 0;

  // Intermediate artifacts for inspection and tests.
  Tensor<T> generator_logits;
  std::vector<TokenId> sampled;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> scored;  // detection mask
  std::vector<double> original_probs;
  NoisyContext noisy;
};

// Generator decoder fed [BOS] + noisy[:-1], scored against gold. The noisy
// ids are constants; gradient reaches parameters only through this pass.
template <typename T>
Tensor<T> denoising_loss(const EncoderOutput<T>& enc, const NoisyContext& noisy, std::span<const TokenId> gold,
                         std::span<const std::uint8_t> trg_mask, const ModelParams<T>& params, double smoothing,
                         DenoiseDecoder decoder = DenoiseDecoder::kGenerator, const ForwardContext& ctx = {}) {
  const std::vector<TokenId> input = shift_right(noisy.noisy_ids, trg_mask, enc.rows);
  const DecoderParams<T>& stack = decoder == DenoiseDecoder::kGenerator ? params.generator : params.discriminator;
  Tensor<T> hidden = decoder_hidden(stack, params.token_embedding, enc, input, trg_mask, true, params.config, ctx);
  return generator_loss(vocab_logits(hidden, params), gold, trg_mask, smoothing);
}

inline double combined_value(double l_g, double l_d, double l_dg, double lambda) { return l_g + lambda * l_d + l_dg; }

// Shared driver for pre-training and fine-tuning.
template <typename T>
TrainStepOutput<T> combined_loss(const PretrainBatch& batch, const ModelParams<T>& params, const ObjectiveConfig& cfg,
                                 Rng& rng, const ForwardContext& ctx = {}) {
  if (cfg.lambda < 0.0) throw ConfigError("objective: lambda must be non-negative");
  TrainStepOutput<T> out;
  const auto& gold = batch.trg_out;
  const auto& trg_mask = batch.trg_mask;

  EncoderOutput<T> enc = encode(std::span<const TokenId>(batch.src), batch.src_mask, batch.rows, params, ctx);

  // Teacher-forced generator pass. Without L_G (discriminator-only
  // fine-tuning) it still supplies the sampling distribution, untracked.
  Tensor<T> logits;
  if (cfg.use_generator_loss) {
    logits = generator_decode(enc, std::span<const TokenId>(batch.trg_in), trg_mask, params, ctx);
  } else {
    NoGradGuard no_grad;
    logits = generator_decode(enc, std::span<const TokenId>(batch.trg_in), trg_mask, params, ctx);
  }
  out.generator_logits = logits;
  Tensor<T> l_g = generator_loss(logits, gold, trg_mask, cfg.smoothing);
  out.generator_loss = static_cast<double>(l_g.item());
  Tensor<T> total = cfg.use_generator_loss ? l_g : Tensor<T>::scalar(T(0));

  if (cfg.use_detection || cfg.use_denoising) {
    const CategoricalTable dist = categorical_from_logits(logits, cfg.temperature);
    out.sampled = sample_tokens(dist, rng);
    out.scored = detection_mask(gold, trg_mask);
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (!out.scored[i]) out.sampled[i] = gold[i];
    }
    out.labels = replaced_labels(out.sampled, gold);

    std::size_t scored = 0, replaced = 0, correct = 0;
    DiscriminatorOutput<T> disc =
        discriminator_decode(enc, std::span<const TokenId>(out.sampled), trg_mask, params, ctx);
    out.original_probs.assign(disc.probs.data().begin(), disc.probs.data().end());
    for (std::size_t i = 0; i < gold.size(); ++i) {
      if (!out.scored[i]) continue;
      ++scored;
      replaced += out.labels[i] == kReplaced;
      correct += (out.original_probs[i] >= cfg.threshold) == (out.labels[i] == kOriginal);
    }
    out.replaced_rate = scored ? static_cast<double>(replaced) / static_cast<double>(scored) : 0.0;
    out.detection_accuracy = scored ? static_cast<double>(correct) / static_cast<double>(scored) : 1.0;

    if (cfg.use_detection) {
      Tensor<T> l_d = detection_loss(disc.probs, out.labels, out.scored);
      out.detection_loss = static_cast<double>(l_d.item());
      total = add(total, scale(l_d, static_cast<T>(cfg.lambda)));
    }

    if (cfg.use_denoising) {
      std::vector<std::size_t> v;
      switch (cfg.policy) {
        case ReplacementPolicy::kMisclassified:
          v = misclassified_positions(std::span<const double>(out.original_probs), out.labels, out.scored,
                                      cfg.threshold);
          break;
        case ReplacementPolicy::kAllPositions:
          for (std::size_t i = 0; i < gold.size(); ++i) {
            if (out.scored[i]) v.push_back(i);
          }
          break;
        case ReplacementPolicy::kNone:
          break;
      }
      out.noisy = build_noisy_context(gold, out.sampled, dist, v, rng);
      out.p = out.noisy.p();
      Tensor<T> l_dg =
          denoising_loss(enc, out.noisy, gold, trg_mask, params, cfg.smoothing, cfg.denoise_decoder, ctx);
      out.denoising_loss = static_cast<double>(l_dg.item());
      total = add(total, l_dg);
    }
  }
  out.loss = total;
  out.combined = static_cast<double>(total.item());
  return out;
}

// Pre-training loss on a masked batch: L_G + lambda * L_D + L_DG.
template <typename T>
TrainStepOutput<T> pretrain_loss(const PretrainBatch& batch, const ModelParams<T>& params, ObjectiveConfig cfg,
                                 Rng& rng, const ForwardContext& ctx = {}) {
  cfg.use_generator_loss = true;
  return combined_loss(batch, params, cfg, rng, ctx);
}

// Fine-tuning on parallel pairs. G: L_G only. G+D: L_G + lambda L_D + L_DG.
// D: lambda L_D + L_DG with the denoising pass routed through the
// discriminator decoder; the generator only supplies samples.
template <typename T>
TrainStepOutput<T> finetune_loss(const PretrainBatch& batch, const ModelParams<T>& params, ObjectiveConfig cfg,
                                 FinetuneMode mode, Rng& rng, const ForwardContext& ctx = {}) {
  switch (mode) {
    case FinetuneMode::kG:
      cfg.use_generator_loss = true;
      cfg.use_detection = false;
      cfg.use_denoising = false;
      break;
    case FinetuneMode::kGD:
      cfg.use_generator_loss = true;
      cfg.use_detection = true;
      cfg.use_denoising = true;
      break;
    case FinetuneMode::kD:
      cfg.use_generator_loss = false;
      cfg.use_detection = true;
      cfg.use_denoising = true;
      cfg.denoise_decoder = DenoiseDecoder::kDiscriminator;
      break;
  }
  return combined_loss(batch, params, cfg, rng, ctx);
}

inline std::string to_string(FinetuneMode mode) {
  switch (mode) {
    case FinetuneMode::kG: return "G";
    case FinetuneMode::kD: return "D";
    case FinetuneMode::kGD: return "G+D";
  }
  return "?";
}

inline FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "G") return FinetuneMode::kG;
  if (s == "D") return FinetuneMode::kD;
  if (s == "G+D" || s == "GD") return FinetuneMode::kGD;
  throw ConfigError("unknown fine-tune mode '" + s + "' (expected G, D or G+D)");
}

}  // namespace ganlm
