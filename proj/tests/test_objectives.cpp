// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "ganlm/objectives.hpp"

using namespace ganlm;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.ffn_dim = 12;
  c.n_heads = 2;
  c.enc_layers = 2;
  c.gen_dec_layers = 2;
  c.disc_dec_layers = 1;
  c.max_positions = 12;
  c.dropout = 0.0;
  c.init_std = 0.3;
  return c;
}

PretrainBatch tiny_batch(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<MaskedPair> pairs;
  for (std::size_t n : {6u, 4u, 7u}) {
    std::vector<TokenId> s(n);
    for (auto& id : s) id = static_cast<TokenId>(5 + rng.below(11));
    pairs.push_back(apply_mask(s, sample_spans(n, 0.4, 2.0, rng)));
  }
  return make_batch(pairs, 12);
}

double grad_norm(std::span<const double> g) {
  double n = 0;
  for (double v : g) n += v * v;
  return std::sqrt(n);
}

}  // namespace

TEST_CASE("generator loss closed forms") {
  Tensor<double> uniform = Tensor<double>::zeros({2, 8});
  std::vector<TokenId> gold{3, 5};
  std::vector<std::uint8_t> mask{1, 1};
  CHECK_THAT(generator_loss(uniform, gold, mask, 0.0).item(), WithinAbs(std::log(8.0), 1e-12));
  CHECK_THAT(generator_loss(uniform, gold, mask, 0.1).item(), WithinAbs(std::log(8.0), 1e-12));

  std::vector<double> peaked(16, 0.0);
  peaked[3] = 20.0;
  peaked[8 + 5] = 20.0;
  Tensor<double> correct({2, 8}, peaked);
  CHECK(generator_loss(correct, gold, mask, 0.0).item() < 1e-6);

  std::vector<std::uint8_t> none{0, 0};
  CHECK_THROWS_WITH(generator_loss(uniform, gold, none, 0.0), ContainsSubstring("padding"));
}

TEST_CASE("sampling a dominant logit returns that token") {
  std::vector<double> logits(10, 0.0);
  logits[7] = 1e6;
  Tensor<double> t({1, 10}, logits);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) REQUIRE(sample_tokens(t, 1.0, rng) == std::vector<TokenId>{7});
}

TEST_CASE("uniform binary sampling is balanced") {
  Tensor<double> t = Tensor<double>::zeros({10000, 2});
  Rng rng(2);
  auto draws = sample_tokens(t, 1.0, rng);
  double ones = 0;
  for (TokenId d : draws) ones += d;
  CHECK_THAT(ones / 10000.0, WithinAbs(0.5, 0.02));
}

TEST_CASE("sampling is reproducible per seed") {
  Rng g(3);
  Tensor<double> t = Tensor<double>::randn({50, 9}, g, 2.0);
  Rng a(4), b(4);
  CHECK(sample_tokens(t, 1.0, a) == sample_tokens(t, 1.0, b));
  CHECK_THROWS_AS(sample_tokens(t, 0.0, a), ConfigError);
}

TEST_CASE("detection loss closed forms and brute force") {
  Tensor<double> half = Tensor<double>::full({4}, 0.5);
  std::vector<std::uint8_t> labels{1, 0, 1, 0}, mask{1, 1, 1, 1};
  CHECK_THAT(detection_loss(half, labels, mask).item(), WithinAbs(0.6931, 1e-4));

  Tensor<double> sure = Tensor<double>::full({4}, 1.0 - 1e-7);
  std::vector<std::uint8_t> originals{1, 1, 1, 1};
  CHECK(detection_loss(sure, originals, mask).item() < 1e-6);

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> v(n);
    std::vector<std::uint8_t> l(n), m(n);
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = 0.01 + 0.98 * rng.uniform();
      l[i] = static_cast<std::uint8_t>(rng.below(2));
      m[i] = static_cast<std::uint8_t>(rng.below(4) != 0);
      if (m[i]) {
        total += l[i] ? -std::log(v[i]) : -std::log(1.0 - v[i]);
        ++count;
      }
    }
    Tensor<double> probs({n}, v);
    const double expected = count ? total / double(count) : 0.0;
    REQUIRE_THAT(detection_loss(probs, l, m).item(), WithinAbs(expected, 1e-12));
  }
}

TEST_CASE("misclassified positions examples") {
  std::vector<std::uint8_t> labels{kOriginal, kReplaced}, mask{1, 1};
  std::vector<double> right{0.9, 0.2}, wrong{0.3, 0.8};
  CHECK(misclassified_positions<double>(right, labels, mask).empty());
  CHECK(misclassified_positions<double>(wrong, labels, mask) == std::vector<std::size_t>{0, 1});
  std::vector<std::uint8_t> first_only{1, 0};
  CHECK(misclassified_positions<double>(wrong, labels, first_only) == std::vector<std::size_t>{0});
  std::vector<double> at_threshold{0.5, 0.5};
  CHECK(misclassified_positions<double>(at_threshold, labels, mask) == std::vector<std::size_t>{1});
}

TEST_CASE("misclassified positions match the definition on 1000 random cases") {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = rng.below(16);
    std::vector<double> v(n);
    std::vector<std::uint8_t> l(n), m(n);
    std::vector<std::size_t> expected;
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = rng.uniform();
      l[i] = static_cast<std::uint8_t>(rng.below(2));
      m[i] = static_cast<std::uint8_t>(rng.below(5) != 0);
      const bool says_original = !(v[i] < 0.5);
      const bool is_original = l[i] == 1;
      if (m[i] && says_original != is_original) expected.push_back(i);
    }
    REQUIRE(misclassified_positions<double>(v, l, m) == expected);
  }
}

TEST_CASE("labels equal elementwise comparison, exhaustively on vocab 5 up to length 3") {
  std::size_t checked = 0;
  for (std::size_t len = 1; len <= 3; ++len) {
    const std::size_t combos = static_cast<std::size_t>(std::pow(5, len));
    for (std::size_t a = 0; a < combos; ++a) {
      for (std::size_t b = 0; b < combos; ++b) {
        std::vector<TokenId> s(len), g(len);
        std::size_t x = a, y = b;
        for (std::size_t i = 0; i < len; ++i, x /= 5, y /= 5) {
          s[i] = static_cast<TokenId>(x % 5);
          g[i] = static_cast<TokenId>(y % 5);
        }
        auto labels = replaced_labels(s, g);
        for (std::size_t i = 0; i < len; ++i) REQUIRE((labels[i] == kReplaced) == (s[i] != g[i]));
        ++checked;
      }
    }
  }
  CHECK(checked == 25 + 625 + 15625);
}

TEST_CASE("detection mask drops [EOS] and padding") {
  std::vector<TokenId> gold{7, 8, kEos, kPad};
  std::vector<std::uint8_t> trg_mask{1, 1, 1, 0};
  CHECK(detection_mask(gold, trg_mask) == std::vector<std::uint8_t>{1, 1, 0, 0});
}

TEST_CASE("noisy context forces the resample away from gold") {
  // A=0, B=1, C=2
  CategoricalTable dist{2, 3, {0.5, 0.5, 0.0, 0.2, 0.3, 0.5}};
  std::vector<TokenId> gold{0, 1}, sampled{0, 2};
  std::vector<std::size_t> v{0, 1};
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    auto ctx = build_noisy_context(gold, sampled, dist, v, rng);
    REQUIRE(ctx.noisy_ids == std::vector<TokenId>{1, 2});
    REQUIRE(ctx.p() == 2);
  }
}

TEST_CASE("empty replacement set keeps gold") {
  CategoricalTable dist{2, 3, {0.5, 0.5, 0.0, 0.2, 0.3, 0.5}};
  std::vector<TokenId> gold{0, 1}, sampled{2, 2};
  Rng rng(8);
  auto ctx = build_noisy_context(gold, sampled, dist, {}, rng);
  CHECK(ctx.noisy_ids == gold);
  CHECK(ctx.p() == 0);
}

TEST_CASE("resampling renormalizes the mass left after excluding gold") {
  CategoricalTable dist{1, 3, {0.6, 0.3, 0.1}};
  std::vector<TokenId> gold{0}, sampled{0};
  std::vector<std::size_t> v{0};
  Rng rng(9);
  double b = 0, c = 0;
  for (int i = 0; i < 10000; ++i) {
    const TokenId t = build_noisy_context(gold, sampled, dist, v, rng).noisy_ids[0];
    REQUIRE(t != 0);
    (t == 1 ? b : c) += 1;
  }
  CHECK_THAT(b / 10000.0, WithinAbs(0.3 / 0.4, 0.02));
  CHECK_THAT(c / 10000.0, WithinAbs(0.1 / 0.4, 0.02));
}

TEST_CASE("resampling with all mass on gold falls back to the other tokens") {
  CategoricalTable dist{1, 4, {0.0, 0.0, 1.0, 0.0}};
  std::vector<TokenId> gold{2}, sampled{2};
  std::vector<std::size_t> v{0};
  Rng rng(10);
  std::set<TokenId> seen;
  for (int i = 0; i < 200; ++i) seen.insert(build_noisy_context(gold, sampled, dist, v, rng).noisy_ids[0]);
  CHECK(seen == std::set<TokenId>{0, 1, 3});
}

TEST_CASE("vocabulary of size one cannot be resampled") {
  CategoricalTable dist{1, 1, {1.0}};
  std::vector<TokenId> gold{0}, sampled{0};
  std::vector<std::size_t> v{0};
  Rng rng(11);
  CHECK_THROWS_AS(build_noisy_context(gold, sampled, dist, v, rng), ConfigError);
}

TEST_CASE("property: noisy context differs from gold exactly on v") {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(10), vocab = 2 + rng.below(6);
    CategoricalTable dist{n, vocab, std::vector<double>(n * vocab)};
    for (std::size_t r = 0; r < n; ++r) {
      double z = 0;
      for (std::size_t k = 0; k < vocab; ++k) z += dist.probs[r * vocab + k] = rng.uniform() * (rng.below(3) != 0);
      if (z == 0) dist.probs[r * vocab] = z = 1;
      for (std::size_t k = 0; k < vocab; ++k) dist.probs[r * vocab + k] /= z;
    }
    std::vector<TokenId> gold(n), sampled(n);
    std::vector<std::size_t> v;
    for (std::size_t i = 0; i < n; ++i) {
      gold[i] = static_cast<TokenId>(rng.below(vocab));
      sampled[i] = rng.below(2) ? gold[i] : static_cast<TokenId>(rng.below(vocab));
      if (rng.below(2)) v.push_back(i);
    }
    auto ctx = build_noisy_context(gold, sampled, dist, v, rng);
    std::vector<TokenId> restored = ctx.noisy_ids;
    for (std::size_t i = 0, k = 0; i < n; ++i) {
      const bool in_v = k < v.size() && v[k] == i;
      REQUIRE((ctx.noisy_ids[i] != gold[i]) == in_v);
      if (in_v) {
        restored[i] = gold[i];
        ++k;
      }
    }
    REQUIRE(restored == gold);
  }
}

TEST_CASE("combined loss arithmetic") {
  CHECK_THAT(combined_value(2.0, 0.1, 2.5, 10.0), WithinAbs(5.5, 1e-12));
  ObjectiveConfig defaults;
  CHECK(defaults.lambda == 10.0);
  CHECK(defaults.threshold == 0.5);
  CHECK(defaults.policy == ReplacementPolicy::kMisclassified);
  CHECK(defaults.denoise_decoder == DenoiseDecoder::kGenerator);
}

TEST_CASE("pretrain loss reports consistent components") {
  Rng init(13);
  auto params = init_params<double>(tiny_config(), init);
  auto batch = tiny_batch(14);
  Rng rng(15);
  ObjectiveConfig cfg;
  auto out = pretrain_loss(batch, params, cfg, rng);
  CHECK_THAT(out.combined, WithinRel(combined_value(out.generator_loss, out.detection_loss, out.denoising_loss,
                                                    cfg.lambda), 1e-12));
  CHECK(out.sampled.size() == batch.trg_out.size());
  for (std::size_t i = 0; i < out.sampled.size(); ++i) {
    if (!out.scored[i]) REQUIRE(out.sampled[i] == batch.trg_out[i]);
    REQUIRE((out.labels[i] == kReplaced) == (out.sampled[i] != batch.trg_out[i]));
  }
  auto v = misclassified_positions(std::span<const double>(out.original_probs), out.labels, out.scored);
  CHECK(out.noisy.positions == v);
  CHECK(out.p == v.size());
  CHECK_THROWS_AS(pretrain_loss(batch, params, ObjectiveConfig{.lambda = -1.0}, rng), ConfigError);
}

TEST_CASE("combined loss gradients match finite differences in fp64") {
  Rng init(16);
  auto params = init_params<double>(tiny_config(), init);
  auto batch = tiny_batch(17);
  ObjectiveConfig cfg;
  cfg.policy = ReplacementPolicy::kAllPositions;
  auto fn = [&](const Tensor<double>&) {
    Rng rng(18);
    return pretrain_loss(batch, params, cfg, rng).loss;
  };
  std::vector<std::pair<std::string, Tensor<double>>> probes{
      {"encoder q", params.encoder_layers[0].self_attn.wq},
      {"encoder final norm", params.encoder_final_norm.gamma},
      {"generator cross-attn v", params.generator.layers[1].cross_attn.wv},
      {"discriminator ffn", params.discriminator.layers[0].ffn.w2},
      {"detection head", params.detection_head},
      {"generator positions", params.generator.positions},
      {"token embedding", params.token_embedding},
  };
  for (auto& [name, t] : probes) {
    INFO(name);
    CHECK(grad_check<double>(fn, t, 1e-6) < 1e-4);
  }
}

TEST_CASE("lambda 0 with no replacements gives twice the generator loss") {
  Rng init(19);
  auto params = init_params<double>(tiny_config(), init);
  auto batch = tiny_batch(20);
  Rng rng(21);
  ObjectiveConfig cfg;
  cfg.lambda = 0.0;
  cfg.policy = ReplacementPolicy::kNone;
  auto out = pretrain_loss(batch, params, cfg, rng);
  CHECK(out.p == 0);
  CHECK_THAT(out.denoising_loss, WithinAbs(out.generator_loss, 1e-12));
  CHECK_THAT(out.combined, WithinAbs(2.0 * out.generator_loss, 1e-12));
}

TEST_CASE("detection and denoising losses send no gradient into the sampled logits") {
  Rng init(22);
  auto params = init_params<double>(tiny_config(), init);
  auto batch = tiny_batch(23);
  ObjectiveConfig cfg;
  cfg.policy = ReplacementPolicy::kAllPositions;

  Rng rng_a(24);
  auto full = pretrain_loss(batch, params, cfg, rng_a);
  full.generator_logits.retain_grad();
  backward(full.loss);
  auto with_all = full.generator_logits.grad_values();

  params.zero_grad();
  ObjectiveConfig only_g = cfg;
  only_g.use_detection = false;
  only_g.use_denoising = false;
  Rng rng_b(24);
  auto plain = pretrain_loss(batch, params, only_g, rng_b);
  plain.generator_logits.retain_grad();
  backward(plain.loss);
  auto g_only = plain.generator_logits.grad_values();

  REQUIRE(with_all.size() == g_only.size());
  for (std::size_t i = 0; i < g_only.size(); ++i) REQUIRE(with_all[i] == g_only[i]);
}

TEST_CASE("each loss alone reaches the shared encoder") {
  Rng init(25);
  auto params = init_params<double>(tiny_config(), init);
  auto batch = tiny_batch(26);
  struct Case {
    const char* name;
    bool g, d, dg;
  };
  for (Case c : {Case{"L_G", true, false, false}, Case{"L_D", false, true, false}, Case{"L_DG", false, false, true}}) {
    INFO(c.name);
    params.zero_grad();
    ObjectiveConfig cfg;
    cfg.use_generator_loss = c.g;
    cfg.use_detection = c.d;
    cfg.use_denoising = c.dg;
    cfg.policy = ReplacementPolicy::kAllPositions;
    Rng rng(27);
    backward(combined_loss(batch, params, cfg, rng).loss);
    CHECK(grad_norm(params.encoder_layers[0].self_attn.wq.grad()) > 0);
    CHECK(grad_norm(params.encoder_layers[1].ffn.w1.grad()) > 0);
  }
}

TEST_CASE("denoising with an empty set equals the teacher-forced loss") {
  Rng init(28);
  auto params = init_params<double>(tiny_config(), init);
  auto batch = tiny_batch(29);
  auto enc = encode<double>(batch.src, batch.src_mask, batch.rows, params);
  NoisyContext gold_ctx{batch.trg_out, {}};
  const double l_dg = denoising_loss(enc, gold_ctx, batch.trg_out, batch.trg_mask, params, 0.0).item();
  const double l_g =
      generator_loss(generator_decode<double>(enc, batch.trg_in, batch.trg_mask, params), batch.trg_out,
                     batch.trg_mask, 0.0)
          .item();
  CHECK(l_dg == l_g);
}

TEST_CASE("single-token target depends only on [BOS] at its first step") {
  Rng init(30);
  auto params = init_params<double>(tiny_config(), init);
  std::vector<std::vector<TokenId>> src{{5, 6, 7}}, trg{{9}};
  auto batch = make_parallel_batch(src, trg, 12);
  auto enc = encode<double>(batch.src, batch.src_mask, 1, params);
  NoisyContext a{{9, kEos}, {}}, b{{12, kEos}, {0}};
  auto shifted_a = shift_right(a.noisy_ids, batch.trg_mask, 1);
  auto shifted_b = shift_right(b.noisy_ids, batch.trg_mask, 1);
  CHECK(shifted_a == std::vector<TokenId>{kBos, 9});
  CHECK(shifted_b == std::vector<TokenId>{kBos, 12});
  // The first output position sees only [BOS], so its loss term is unchanged.
  std::vector<std::uint8_t> first_only{1, 0};
  const double la = denoising_loss(enc, a, batch.trg_out, first_only, params, 0.0).item();
  const double lb = denoising_loss(enc, b, batch.trg_out, first_only, params, 0.0).item();
  CHECK(la == lb);
  const double full_a = denoising_loss(enc, a, batch.trg_out, batch.trg_mask, params, 0.0).item();
  const double full_b = denoising_loss(enc, b, batch.trg_out, batch.trg_mask, params, 0.0).item();
  CHECK(full_a != full_b);
}

TEST_CASE("fine-tune mode G is plain sequence-to-sequence cross-entropy") {
  Rng init(31);
  auto params = init_params<double>(tiny_config(), init);
  std::vector<std::vector<TokenId>> src{{5, 6, 7}, {8, 9}}, trg{{10, 11}, {12, 13, 14}};
  auto batch = make_parallel_batch(src, trg, 12);
  ObjectiveConfig cfg;
  cfg.smoothing = 0.1;
  Rng rng(32);
  auto out = finetune_loss(batch, params, cfg, FinetuneMode::kG, rng);
  auto enc = encode<double>(batch.src, batch.src_mask, batch.rows, params);
  auto logits = generator_decode<double>(enc, batch.trg_in, batch.trg_mask, params);
  CHECK(out.combined == generator_loss(logits, batch.trg_out, batch.trg_mask, 0.1).item());
  CHECK(out.detection_loss == 0.0);
  CHECK(out.denoising_loss == 0.0);
}

TEST_CASE("fine-tune mode G+D logs a detection loss") {
  Rng init(33);
  auto params = init_params<double>(tiny_config(), init);
  std::vector<std::vector<TokenId>> src{{5, 6, 7}, {8, 9}}, trg{{10, 11}, {12, 13, 14}};
  auto batch = make_parallel_batch(src, trg, 12);
  Rng rng(34);
  auto out = finetune_loss(batch, params, ObjectiveConfig{}, FinetuneMode::kGD, rng);
  CHECK(out.detection_loss > 0.0);
  CHECK(out.denoising_loss > 0.0);
}

TEST_CASE("fine-tune mode D trains through the discriminator only") {
  Rng init(35);
  auto params = init_params<double>(tiny_config(), init);
  std::vector<std::vector<TokenId>> src{{5, 6, 7}, {8, 9}}, trg{{10, 11}, {12, 13, 14}};
  auto batch = make_parallel_batch(src, trg, 12);
  ObjectiveConfig cfg;
  cfg.policy = ReplacementPolicy::kAllPositions;
  Rng rng(36);
  auto out = finetune_loss(batch, params, cfg, FinetuneMode::kD, rng);
  CHECK_THAT(out.combined, WithinRel(cfg.lambda * out.detection_loss + out.denoising_loss, 1e-12));
  backward(out.loss);
  CHECK_FALSE(params.generator.layers[0].self_attn.wq.has_grad());
  CHECK_FALSE(params.generator.positions.has_grad());
  CHECK(grad_norm(params.discriminator.layers[0].self_attn.wq.grad()) > 0);
  CHECK(grad_norm(params.discriminator.positions.grad()) > 0);
  CHECK(grad_norm(params.encoder_layers[0].self_attn.wq.grad()) > 0);
}

TEST_CASE("fine-tune mode names parse") {
  CHECK(parse_finetune_mode("G") == FinetuneMode::kG);
  CHECK(parse_finetune_mode("D") == FinetuneMode::kD);
  CHECK(parse_finetune_mode("G+D") == FinetuneMode::kGD);
  CHECK(to_string(FinetuneMode::kGD) == "G+D");
  CHECK_THROWS_AS(parse_finetune_mode("X"), ConfigError);
}
