// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared-encoder, dual-decoder transformer.
//
//   encoder        bidirectional over the (corrupted) source
//   generator      causal decoder; logits through the shared token embedding
//   discriminator  bidirectional decoder over a sampled target; one sigmoid
//                  per token giving P(token is ORIGINAL)
//
// All blocks are pre-layer-norm with a final layer norm per stack.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/error.hpp"
#include "ganlm/rng.hpp"
#include "ganlm/tensor.hpp"

namespace ganlm {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t ffn_dim = 512;
  std::size_t n_heads = 4;
  std::size_t enc_layers = 4;
  std::size_t gen_dec_layers = 4;
  std::size_t disc_dec_layers = 2;
  std::size_t max_positions = 256;
  double dropout = 0.1;
  bool tie_embeddings = true;
  bool scale_embeddings = true;  // token embeddings times sqrt(d_model) on input
  double init_std = 0.0;         // 0: Xavier-uniform projections, N(0, 1/d_model) embeddings

  void validate() const {
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("model: d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (ffn_dim == 0) throw ConfigError("model: ffn_dim must be positive");
    if (max_positions == 0) throw ConfigError("model: max_positions must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
    if (init_std < 0.0) throw ConfigError("model: init_std must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},     {"d_model", c.d_model},
       {"ffn_dim", c.ffn_dim},           {"n_heads", c.n_heads},
       {"enc_layers", c.enc_layers},     {"gen_dec_layers", c.gen_dec_layers},
       {"disc_dec_layers", c.disc_dec_layers}, {"max_positions", c.max_positions},
       {"dropout", c.dropout},           {"tie_embeddings", c.tie_embeddings},
       {"scale_embeddings", c.scale_embeddings}, {"init_std", c.init_std}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const nlohmann::json known = ModelConfig{};
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
  }
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.enc_layers = j.value("enc_layers", c.enc_layers);
    c.gen_dec_layers = j.value("gen_dec_layers", c.gen_dec_layers);
    c.disc_dec_layers = j.value("disc_dec_layers", c.disc_dec_layers);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.dropout = j.value("dropout", c.dropout);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.scale_embeddings = j.value("scale_embeddings", c.scale_embeddings);
    c.init_std = j.value("init_std", c.init_std);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> self_attn_norm;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ffn_norm;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct DecoderLayerParams {
  LayerNormParams<T> self_attn_norm;
  AttentionParams<T> self_attn;
  LayerNormParams<T> cross_attn_norm;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ffn_norm;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct DecoderParams {
  Tensor<T> positions;
  std::vector<DecoderLayerParams<T>> layers;
  LayerNormParams<T> final_norm;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> token_embedding;    // [V, d]; also the generator output projection when tied
  Tensor<T> output_projection;  // [V, d]; only when tie_embeddings is false
  Tensor<T> encoder_positions;
  std::vector<EncoderLayerParams<T>> encoder_layers;
  LayerNormParams<T> encoder_final_norm;
  DecoderParams<T> generator;
  DecoderParams<T> discriminator;
  Tensor<T> detection_head;  // [d, 1]

  // Visits every learned tensor with its dotted path, in a fixed order.
  void for_each(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("embed_tokens", token_embedding);
    if (!config.tie_embeddings) fn("output_projection", output_projection);
    fn("encoder.embed_positions", encoder_positions);
    for (std::size_t i = 0; i < encoder_layers.size(); ++i) {
      auto& l = encoder_layers[i];
      const std::string p = "encoder.layers." + std::to_string(i) + ".";
      visit_norm(fn, p + "self_attn_norm", l.self_attn_norm);
      visit_attention(fn, p + "self_attn", l.self_attn);
      visit_norm(fn, p + "ffn_norm", l.ffn_norm);
      visit_ffn(fn, p + "ffn", l.ffn);
    }
    visit_norm(fn, "encoder.final_norm", encoder_final_norm);
    visit_decoder(fn, "generator", generator);
    visit_decoder(fn, "discriminator", discriminator);
    fn("discriminator.detection_head", detection_head);
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    const_cast<ModelParams*>(this)->for_each([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void zero_grad() {
    for_each([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
  }

  // Deep copy with independent storage, converted to scalar type U.
  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::skeleton(config);
    auto src = named_parameters();
    std::size_t i = 0;
    out.for_each([&](const std::string&, Tensor<U>& t) {
      t = Tensor<U>(src[i].second.shape(), std::vector<U>(src[i].second.data().begin(), src[i].second.data().end()),
                    src[i].second.requires_grad());
      ++i;
    });
    return out;
  }

  ModelParams clone() const { return cast<T>(); }

  // Structure with undefined tensors; filled by init_params or cast.
  static ModelParams skeleton(const ModelConfig& cfg) {
    ModelParams p;
    p.config = cfg;
    p.encoder_layers.resize(cfg.enc_layers);
    p.generator.layers.resize(cfg.gen_dec_layers);
    p.discriminator.layers.resize(cfg.disc_dec_layers);
    return p;
  }

 private:
  using Visitor = std::function<void(const std::string&, Tensor<T>&)>;
  static void visit_norm(const Visitor& fn, const std::string& p, LayerNormParams<T>& n) {
    fn(p + ".weight", n.gamma);
    fn(p + ".bias", n.beta);
  }
  static void visit_attention(const Visitor& fn, const std::string& p, AttentionParams<T>& a) {
    fn(p + ".q_proj.weight", a.wq);
    fn(p + ".q_proj.bias", a.bq);
    fn(p + ".k_proj.weight", a.wk);
    fn(p + ".k_proj.bias", a.bk);
    fn(p + ".v_proj.weight", a.wv);
    fn(p + ".v_proj.bias", a.bv);
    fn(p + ".out_proj.weight", a.wo);
    fn(p + ".out_proj.bias", a.bo);
  }
  static void visit_ffn(const Visitor& fn, const std::string& p, FeedForwardParams<T>& f) {
    fn(p + ".fc1.weight", f.w1);
    fn(p + ".fc1.bias", f.b1);
    fn(p + ".fc2.weight", f.w2);
    fn(p + ".fc2.bias", f.b2);
  }
  static void visit_decoder(const Visitor& fn, const std::string& p, DecoderParams<T>& d) {
    fn(p + ".embed_positions", d.positions);
    for (std::size_t i = 0; i < d.layers.size(); ++i) {
      auto& l = d.layers[i];
      const std::string q = p + ".layers." + std::to_string(i) + ".";
      visit_norm(fn, q + "self_attn_norm", l.self_attn_norm);
      visit_attention(fn, q + "self_attn", l.self_attn);
      visit_norm(fn, q + "cross_attn_norm", l.cross_attn_norm);
      visit_attention(fn, q + "cross_attn", l.cross_attn);
      visit_norm(fn, q + "ffn_norm", l.ffn_norm);
      visit_ffn(fn, q + "ffn", l.ffn);
    }
    visit_norm(fn, p + ".final_norm", d.final_norm);
  }
};

// Closed-form parameter count for a config; must equal ModelParams::parameter_count.
inline std::size_t analytic_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.ffn_dim;
  const std::size_t norm = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t enc_layer = 2 * norm + attn + ffn;
  const std::size_t dec_layer = 3 * norm + 2 * attn + ffn;
  std::size_t total = c.vocab_size * d;
  if (!c.tie_embeddings) total += c.vocab_size * d;
  total += 3 * c.max_positions * d;
  total += c.enc_layers * enc_layer + norm;
  total += c.gen_dec_layers * dec_layer + norm;
  total += c.disc_dec_layers * dec_layer + norm;
  total += d;  // detection head
  return total;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams<T> p = ModelParams<T>::skeleton(cfg);
  const double std = cfg.init_std;
  const std::size_t d = cfg.d_model;
  // Initialization order follows for_each so a seed fixes every tensor.
  p.for_each([&](const std::string& name, Tensor<T>& t) {
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    const bool is_norm = name.find("_norm.") != std::string::npos;
    Shape shape;
    if (name == "embed_tokens" || name == "output_projection") {
      shape = {cfg.vocab_size, d};
    } else if (ends_with("embed_positions")) {
      shape = {cfg.max_positions, d};
    } else if (name == "discriminator.detection_head") {
      shape = {d, 1};
    } else if (is_norm) {
      shape = {d};
      t = Tensor<T>::full(shape, ends_with(".weight") ? T(1) : T(0), true);
      return;
    } else if (ends_with("fc1.weight")) {
      shape = {d, cfg.ffn_dim};
    } else if (ends_with("fc1.bias")) {
      shape = {cfg.ffn_dim};
    } else if (ends_with("fc2.weight")) {
      shape = {cfg.ffn_dim, d};
    } else if (ends_with(".weight")) {
      shape = {d, d};
    } else {
      shape = {d};
    }
    if (ends_with(".bias")) {
      t = Tensor<T>::zeros(shape, true);
    } else if (std > 0.0) {
      t = Tensor<T>::randn(shape, rng, std, true);
    } else if (name == "embed_tokens" || name == "output_projection" || ends_with("embed_positions")) {
      t = Tensor<T>::randn(shape, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
    } else {
      const double bound = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
      std::vector<T> values(shape[0] * shape[1]);
      for (auto& v : values) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
      t = Tensor<T>(shape, std::move(values), true);
    }
  });
  return p;
}

// Parameter census and shape manifest.
template <typename T>
nlohmann::json shape_manifest(const ModelParams<T>& params) {
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, t] : params.named_parameters()) shapes[name] = t.shape();
  return {{"config", params.config},
          {"parameter_count", params.parameter_count()},
          {"analytic_parameter_count", analytic_parameter_count(params.config)},
          {"shapes", shapes}};
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;  // [rows, src_len, d]
  std::vector<std::uint8_t> mask;  // [rows * src_len], 1 on real tokens
  std::size_t rows = 0;
  std::size_t length = 0;
};

template <typename T>
struct DiscriminatorOutput {
  Tensor<T> hidden;  // [rows, trg_len, d]
  Tensor<T> probs;   // [rows, trg_len], P(ORIGINAL)
};

namespace detail {

template <typename T>
Tensor<T> apply_dropout(const Tensor<T>& x, const ModelConfig& cfg, const ForwardContext& ctx) {
  if (!ctx.training || cfg.dropout <= 0.0) return x;
  if (!ctx.rng) throw ConfigError("forward: dropout in training mode needs an rng");
  return dropout(x, cfg.dropout, *ctx.rng, true);
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta, T(1e-5));
}

// Multi-head attention of queries [B, L, d] over keys/values [B, S, d].
// key_valid is [B * S]; causal additionally hides keys after each query.
template <typename T>
Tensor<T> attention(const Tensor<T>& queries, const Tensor<T>& keys, const AttentionParams<T>& p,
                    const ModelConfig& cfg, std::span<const std::uint8_t> key_valid, bool causal,
                    const ForwardContext& ctx) {
  const std::size_t B = queries.dim(0), L = queries.dim(1), S = keys.dim(1);
  const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = d / H;
  auto heads = [&](const Tensor<T>& x, std::size_t len) {
    return reshape(transpose(reshape(x, {B, len, H, dh}), 1, 2), {B * H, len, dh});
  };
  Tensor<T> q = heads(scale(linear(queries, p.wq, p.bq), T(1) / std::sqrt(static_cast<T>(dh))), L);
  Tensor<T> k = heads(linear(keys, p.wk, p.bk), S);
  Tensor<T> v = heads(linear(keys, p.wv, p.bv), S);
  Tensor<T> scores = matmul(q, transpose(k, 1, 2));  // [B*H, L, S]

  std::vector<std::uint8_t> hidden(B * H * L * S, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < L; ++i) {
        std::uint8_t* row = hidden.data() + ((b * H + h) * L + i) * S;
        for (std::size_t j = 0; j < S; ++j) row[j] = !key_valid[b * S + j] || (causal && j > i);
      }
    }
  }
  Tensor<T> probs = softmax(masked_fill(scores, std::span<const std::uint8_t>(hidden), T(-1e9)), -1);
  probs = apply_dropout(probs, cfg, ctx);
  Tensor<T> context = matmul(probs, v);  // [B*H, L, dh]
  context = reshape(transpose(reshape(context, {B, H, L, dh}), 1, 2), {B, L, d});
  return linear(context, p.wo, p.bo);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& p, const ModelConfig& cfg,
                       const ForwardContext& ctx) {
  Tensor<T> h = gelu(linear(x, p.w1, p.b1));
  return linear(apply_dropout(h, cfg, ctx), p.w2, p.b2);
}

template <typename T>
Tensor<T> embed(const Tensor<T>& tokens, const Tensor<T>& positions, std::span<const TokenId> ids, std::size_t rows,
                std::size_t len, const ModelConfig& cfg, const ForwardContext& ctx) {
  if (len > cfg.max_positions) {
    throw ShapeError("forward: sequence of " + std::to_string(len) + " tokens exceeds max_positions " +
                     std::to_string(cfg.max_positions));
  }
  if (ids.size() != rows * len) throw ShapeError("forward: id count does not match rows x length");
  Tensor<T> tok = embedding(tokens, ids, {rows, len});
  if (cfg.scale_embeddings) tok = scale(tok, static_cast<T>(std::sqrt(static_cast<double>(cfg.d_model))));
  Tensor<T> x = add(tok, slice(positions, 0, 0, len));
  return apply_dropout(x, cfg, ctx);
}

}  // namespace detail

template <typename T>
EncoderOutput<T> encode(std::span<const TokenId> src_ids, std::span<const std::uint8_t> src_mask, std::size_t rows,
                        const ModelParams<T>& params, const ForwardContext& ctx = {}) {
  const auto& cfg = params.config;
  if (rows == 0 || src_ids.size() % rows != 0) throw ShapeError("encode: ids do not split into rows");
  const std::size_t len = src_ids.size() / rows;
  if (src_mask.size() != src_ids.size()) throw ShapeError("encode: mask size differs from ids");
  Tensor<T> x = detail::embed(params.token_embedding, params.encoder_positions, src_ids, rows, len, cfg, ctx);
  for (const auto& layer : params.encoder_layers) {
    Tensor<T> h = detail::norm(x, layer.self_attn_norm);
    x = add(x, detail::apply_dropout(detail::attention(h, h, layer.self_attn, cfg, src_mask, false, ctx), cfg, ctx));
    h = detail::norm(x, layer.ffn_norm);
    x = add(x, detail::apply_dropout(detail::feed_forward(h, layer.ffn, cfg, ctx), cfg, ctx));
  }
  EncoderOutput<T> out;
  out.hidden = detail::norm(x, params.encoder_final_norm);
  out.mask.assign(src_mask.begin(), src_mask.end());
  out.rows = rows;
  out.length = len;
  return out;
}

// Runs one decoder stack over `ids` [rows, len] with cross-attention to the
// encoder. Returns final-normed hidden states [rows, len, d].
template <typename T>
Tensor<T> decoder_hidden(const DecoderParams<T>& dec, const Tensor<T>& token_embedding, const EncoderOutput<T>& enc,
                         std::span<const TokenId> ids, std::span<const std::uint8_t> valid, bool causal,
                         const ModelConfig& cfg, const ForwardContext& ctx) {
  const std::size_t rows = enc.rows;
  if (ids.size() % rows != 0) throw ShapeError("decoder: ids do not split into encoder rows");
  const std::size_t len = ids.size() / rows;
  if (valid.size() != ids.size()) throw ShapeError("decoder: mask size differs from ids");
  Tensor<T> x = detail::embed(token_embedding, dec.positions, ids, rows, len, cfg, ctx);
  for (const auto& layer : dec.layers) {
    Tensor<T> h = detail::norm(x, layer.self_attn_norm);
    x = add(x, detail::apply_dropout(detail::attention(h, h, layer.self_attn, cfg, valid, causal, ctx), cfg, ctx));
    h = detail::norm(x, layer.cross_attn_norm);
    x = add(x, detail::apply_dropout(
                   detail::attention(h, enc.hidden, layer.cross_attn, cfg, enc.mask, false, ctx), cfg, ctx));
    h = detail::norm(x, layer.ffn_norm);
    x = add(x, detail::apply_dropout(detail::feed_forward(h, layer.ffn, cfg, ctx), cfg, ctx));
  }
  return detail::norm(x, dec.final_norm);
}

// Projects hidden states onto the vocabulary with the (tied) output matrix.
template <typename T>
Tensor<T> vocab_logits(const Tensor<T>& hidden, const ModelParams<T>& params) {
  const Tensor<T>& proj = params.config.tie_embeddings ? params.token_embedding : params.output_projection;
  return matmul(hidden, transpose(proj, 0, 1));
}

// Teacher-forced generator: causal self-attention, logits [rows, len, V].
template <typename T>
Tensor<T> generator_decode(const EncoderOutput<T>& enc, std::span<const TokenId> trg_in,
                           std::span<const std::uint8_t> trg_mask, const ModelParams<T>& params,
                           const ForwardContext& ctx = {}) {
  return vocab_logits(
      decoder_hidden(params.generator, params.token_embedding, enc, trg_in, trg_mask, true, params.config, ctx),
      params);
}

// Bidirectional discriminator over an unshifted sampled target.
template <typename T>
DiscriminatorOutput<T> discriminator_decode(const EncoderOutput<T>& enc, std::span<const TokenId> sampled,
                                            std::span<const std::uint8_t> trg_mask, const ModelParams<T>& params,
                                            const ForwardContext& ctx = {}) {
  DiscriminatorOutput<T> out;
  out.hidden = decoder_hidden(params.discriminator, params.token_embedding, enc, sampled, trg_mask, false,
                              params.config, ctx);
  const std::size_t len = sampled.size() / enc.rows;
  out.probs = reshape(sigmoid(matmul(out.hidden, params.detection_head)), {enc.rows, len});
  return out;
}

}  // namespace ganlm
