// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training loop for pre-training (masked spans, combined loss) and
// fine-tuning (parallel pairs, modes G / D / G+D).

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/checkpoint.hpp"
#include "ganlm/corruption.hpp"
#include "ganlm/error.hpp"
#include "ganlm/model.hpp"
#include "ganlm/objectives.hpp"
#include "ganlm/optim.hpp"
#include "ganlm/rng.hpp"

namespace ganlm {

enum class TrainMode { kPretrain, kFinetune };

inline ReplacementPolicy parse_policy(const std::string& s) {
  if (s == "misclassified") return ReplacementPolicy::kMisclassified;
  if (s == "all") return ReplacementPolicy::kAllPositions;
  if (s == "none") return ReplacementPolicy::kNone;
  throw ConfigError("unknown replacement policy '" + s + "' (expected misclassified, all or none)");
}

inline std::string to_string(ReplacementPolicy p) {
  switch (p) {
    case ReplacementPolicy::kMisclassified: return "misclassified";
    case ReplacementPolicy::kAllPositions: return "all";
    case ReplacementPolicy::kNone: return "none";
  }
  return "?";
}

inline DenoiseDecoder parse_denoise_decoder(const std::string& s) {
  if (s == "generator") return DenoiseDecoder::kGenerator;
  if (s == "discriminator") return DenoiseDecoder::kDiscriminator;
  throw ConfigError("unknown denoise decoder '" + s + "' (expected generator or discriminator)");
}

inline std::string to_string(DenoiseDecoder d) {
  return d == DenoiseDecoder::kGenerator ? "generator" : "discriminator";
}

struct TrainConfig {
  TrainMode mode = TrainMode::kPretrain;
  FinetuneMode finetune_mode = FinetuneMode::kGD;
  ModelConfig model;
  ObjectiveConfig objective;
  AdamConfig adam;
  double peak_lr = 5e-4;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 1000;
  ScheduleKind schedule = ScheduleKind::kInverseSqrt;
  std::size_t batch_rows = 16;
  std::size_t max_tokens = 0;  // 0: rows only
  std::uint64_t seed = 1;
  double mask_ratio = 0.15;
  double mean_span = 3.0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t min_freq = 1;
  std::size_t max_vocab = 0;

  void validate() const {
    if (batch_rows == 0) throw ConfigError("train: batch_rows must be positive");
    if (peak_lr < 0.0) throw ConfigError("train: peak_lr must be non-negative");
    if (mask_ratio < 0.0 || mask_ratio > 1.0) throw ConfigError("train: mask_ratio must lie in [0, 1]");
    if (mean_span < 1.0) throw ConfigError("train: mean_span must be at least 1");
    if (objective.lambda < 0.0) throw ConfigError("train: lambda must be non-negative");
    if (objective.smoothing < 0.0 || objective.smoothing >= 1.0) throw ConfigError("train: smoothing must lie in [0, 1)");
    if (objective.temperature <= 0.0) throw ConfigError("train: temperature must be positive");
    if (min_freq == 0) throw ConfigError("train: min_freq must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {
      {"mode", c.mode == TrainMode::kPretrain ? "pretrain" : "finetune"},
      {"finetune_mode", to_string(c.finetune_mode)},
      {"model", c.model},
      {"lambda", c.objective.lambda},
      {"smoothing", c.objective.smoothing},
      {"temperature", c.objective.temperature},
      {"threshold", c.objective.threshold},
      {"replacement_policy", to_string(c.objective.policy)},
      {"denoise_decoder", to_string(c.objective.denoise_decoder)},
      {"beta1", c.adam.beta1},
      {"beta2", c.adam.beta2},
      {"adam_eps", c.adam.eps},
      {"clip_norm", c.adam.clip_norm},
      {"peak_lr", c.peak_lr},
      {"warmup_steps", c.warmup_steps},
      {"total_steps", c.total_steps},
      {"schedule", to_string(c.schedule)},
      {"batch_rows", c.batch_rows},
      {"max_tokens", c.max_tokens},
      {"seed", c.seed},
      {"mask_ratio", c.mask_ratio},
      {"mean_span", c.mean_span},
      {"checkpoint_every", c.checkpoint_every},
      {"min_freq", c.min_freq},
      {"max_vocab", c.max_vocab},
  };
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  const nlohmann::json known = TrainConfig{};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  try {
    const std::string mode = j.value("mode", std::string("pretrain"));
    if (mode == "pretrain") {
      c.mode = TrainMode::kPretrain;
    } else if (mode == "finetune") {
      c.mode = TrainMode::kFinetune;
    } else {
      throw ConfigError("train config: mode must be pretrain or finetune, got '" + mode + "'");
    }
    if (j.contains("finetune_mode")) c.finetune_mode = parse_finetune_mode(j["finetune_mode"].get<std::string>());
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    c.objective.lambda = j.value("lambda", c.objective.lambda);
    c.objective.smoothing = j.value("smoothing", c.objective.smoothing);
    c.objective.temperature = j.value("temperature", c.objective.temperature);
    c.objective.threshold = j.value("threshold", c.objective.threshold);
    if (j.contains("replacement_policy")) c.objective.policy = parse_policy(j["replacement_policy"].get<std::string>());
    if (j.contains("denoise_decoder")) {
      c.objective.denoise_decoder = parse_denoise_decoder(j["denoise_decoder"].get<std::string>());
    }
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("adam_eps", c.adam.eps);
    c.adam.clip_norm = j.value("clip_norm", c.adam.clip_norm);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.total_steps = j.value("total_steps", c.total_steps);
    if (j.contains("schedule")) c.schedule = parse_schedule(j["schedule"].get<std::string>());
    c.batch_rows = j.value("batch_rows", c.batch_rows);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.seed = j.value("seed", c.seed);
    c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
    c.mean_span = j.value("mean_span", c.mean_span);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.min_freq = j.value("min_freq", c.min_freq);
    c.max_vocab = j.value("max_vocab", c.max_vocab);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    return nlohmann::json::parse(in).get<TrainConfig>();
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct MonolingualCorpus {
  std::string name;
  int language = 0;
  std::vector<std::vector<TokenId>> sentences;
};

struct ParallelCorpus {
  std::vector<std::vector<TokenId>> sources;
  std::vector<std::vector<TokenId>> targets;
};

using BatchSource = std::function<PretrainBatch(Rng&)>;

// Uniform over datasets.
inline std::size_t sample_dataset(std::size_t num_datasets, Rng& rng) {
  if (num_datasets == 0) throw ConfigError("sample_dataset: no datasets");
  return static_cast<std::size_t>(rng.below(num_datasets));
}

namespace detail {

inline std::size_t rows_for_budget(std::size_t want, std::size_t width, std::size_t max_tokens) {
  if (max_tokens == 0 || width == 0) return want;
  return std::clamp<std::size_t>(max_tokens / width, 1, want);
}

inline std::vector<TokenId> clip(const std::vector<TokenId>& ids, std::size_t max_len) {
  return ids.size() <= max_len ? ids : std::vector<TokenId>(ids.begin(), ids.begin() + static_cast<long>(max_len));
}

}  // namespace detail

// Draws a dataset, then batch_rows sentences with replacement, and masks
// each. Sentences are cut to max_positions - 1 so the target fits.
inline BatchSource make_pretrain_source(std::vector<MonolingualCorpus> corpora, const TrainConfig& cfg) {
  std::erase_if(corpora, [](const MonolingualCorpus& c) { return c.sentences.empty(); });
  for (auto& c : corpora) std::erase_if(c.sentences, [](const auto& s) { return s.empty(); });
  std::erase_if(corpora, [](const MonolingualCorpus& c) { return c.sentences.empty(); });
  if (corpora.empty()) throw ConfigError("pretrain: every corpus is empty");
  const std::size_t max_len = cfg.model.max_positions - 1;
  return [corpora = std::move(corpora), cfg, max_len](Rng& rng) {
    const auto& corpus = corpora[sample_dataset(corpora.size(), rng)];
    std::vector<MaskedPair> pairs;
    std::size_t width = 0;
    for (std::size_t r = 0; r < cfg.batch_rows; ++r) {
      const auto& sentence = corpus.sentences[rng.below(corpus.sentences.size())];
      const auto ids = detail::clip(sentence, max_len);
      const std::size_t new_width = std::max(width, ids.size());
      if (r > 0 && detail::rows_for_budget(cfg.batch_rows, new_width, cfg.max_tokens) <= r) break;
      width = new_width;
      pairs.push_back(apply_mask(ids, sample_spans(ids.size(), cfg.mask_ratio, cfg.mean_span, rng), corpus.language));
    }
    return make_batch(pairs, cfg.model.max_positions);
  };
}

inline BatchSource make_finetune_source(ParallelCorpus data, const TrainConfig& cfg) {
  if (data.sources.size() != data.targets.size()) {
    throw ConfigError("finetune: " + std::to_string(data.sources.size()) + " sources but " +
                      std::to_string(data.targets.size()) + " targets");
  }
  if (data.sources.empty()) throw ConfigError("finetune: no training pairs");
  const std::size_t max_src = cfg.model.max_positions, max_trg = cfg.model.max_positions - 1;
  for (auto& s : data.sources) s = detail::clip(s, max_src);
  for (auto& t : data.targets) t = detail::clip(t, max_trg);
  return [data = std::move(data), cfg](Rng& rng) {
    std::vector<std::vector<TokenId>> src, trg;
    std::size_t width = 0;
    for (std::size_t r = 0; r < cfg.batch_rows; ++r) {
      const std::size_t k = rng.below(data.sources.size());
      const std::size_t new_width = std::max({width, data.sources[k].size(), data.targets[k].size() + 1});
      if (r > 0 && detail::rows_for_budget(cfg.batch_rows, new_width, cfg.max_tokens) <= r) break;
      width = new_width;
      src.push_back(data.sources[k]);
      trg.push_back(data.targets[k]);
    }
    return make_parallel_batch(src, trg, cfg.model.max_positions);
  };
}

// ---------------------------------------------------------------------------
// State and steps
// ---------------------------------------------------------------------------

struct TrainState {
  ModelParams<float> params;
  OptimState<float> optim;
  Rng rng;
  std::size_t step = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  double l_g = 0, l_d = 0, l_dg = 0, combined = 0;
  double det_acc = 0, replaced_rate = 0;
  std::size_t p = 0;
  double lr = 0, grad_norm = 0;
  bool skipped = false;
};

inline nlohmann::json metrics_json(const StepMetrics& m) {
  return {{"step", m.step},   {"L_G", m.l_g},          {"L_D", m.l_d},
          {"L_DG", m.l_dg},   {"combined", m.combined}, {"det_acc", m.det_acc},
          {"replaced_rate", m.replaced_rate}, {"p", m.p}, {"lr", m.lr},
          {"grad_norm", m.grad_norm}, {"skipped", m.skipped}};
}

inline std::vector<Tensor<float>> parameter_list(const ModelParams<float>& params) {
  std::vector<Tensor<float>> out;
  for (auto& [name, t] : params.named_parameters()) out.push_back(t);
  return out;
}

// Fresh state: parameters drawn from the seed, then the same stream drives
// data, masking, sampling and dropout.
inline TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng = Rng(cfg.seed);
  s.params = init_params<float>(cfg.model, s.rng);
  s.optim = OptimState<float>::zeros_like(parameter_list(s.params));
  return s;
}

// Starts fine-tuning from pre-trained weights with a fresh optimizer.
inline TrainState state_from_weights(const TrainConfig& cfg, ModelParams<float> params) {
  TrainState s;
  s.rng = Rng(cfg.seed);
  s.params = std::move(params);
  s.optim = OptimState<float>::zeros_like(parameter_list(s.params));
  return s;
}

inline TrainState state_from_checkpoint(Checkpoint ckpt) {
  TrainState s;
  s.params = std::move(ckpt.params);
  s.optim = ckpt.optim ? std::move(*ckpt.optim) : OptimState<float>::zeros_like(parameter_list(s.params));
  s.rng.restore(ckpt.rng_state);
  s.step = ckpt.step;
  return s;
}

inline Checkpoint make_checkpoint(const TrainState& s, const Vocab& vocab, const TrainConfig& cfg) {
  Checkpoint c;
  c.params = s.params;
  c.vocab = vocab;
  c.optim = s.optim;
  c.step = s.step;
  c.rng_state = s.rng.state();
  c.train_config = cfg;
  return c;
}

inline StepMetrics train_step(TrainState& s, const TrainConfig& cfg, const BatchSource& source) {
  StepMetrics m;
  m.lr = lr_schedule(s.step + 1, cfg.peak_lr, cfg.warmup_steps, cfg.schedule);
  const PretrainBatch batch = source(s.rng);
  const ForwardContext ctx{true, &s.rng};
  TrainStepOutput<float> out = cfg.mode == TrainMode::kPretrain
                                   ? pretrain_loss(batch, s.params, cfg.objective, s.rng, ctx)
                                   : finetune_loss(batch, s.params, cfg.objective, cfg.finetune_mode, s.rng, ctx);
  if (out.loss.requires_grad()) backward(out.loss);
  auto list = parameter_list(s.params);
  const StepReport report = adam_step(list, s.optim, m.lr, cfg.adam);
  s.params.zero_grad();
  ++s.step;

  m.step = s.step;
  m.l_g = out.generator_loss;
  m.l_d = out.detection_loss;
  m.l_dg = out.denoising_loss;
  m.combined = out.combined;
  m.det_acc = out.detection_accuracy;
  m.replaced_rate = out.replaced_rate;
  m.p = out.p;
  m.grad_norm = report.grad_norm;
  m.skipped = !report.applied;
  return m;
}

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;
};

// Runs until s.step reaches cfg.total_steps. on_checkpoint fires every
// checkpoint_every steps and once at the end.
inline void train(TrainState& s, const TrainConfig& cfg, const BatchSource& source, const TrainHooks& hooks = {}) {
  cfg.validate();
  while (s.step < cfg.total_steps) {
    const StepMetrics m = train_step(s, cfg, source);
    if (hooks.on_step) hooks.on_step(m);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 &&
        s.step < cfg.total_steps) {
      hooks.on_checkpoint(s);
    }
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(s);
}

// One JSON object per line.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& out) : out_(out) {}
  void write(const StepMetrics& m) {
    out_ << metrics_json(m).dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("metrics: write failed");
  }

 private:
  std::ostream& out_;
};

}  // namespace ganlm
