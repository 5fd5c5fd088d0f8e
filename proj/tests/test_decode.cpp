// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "ganlm/bleu.hpp"
#include "ganlm/decode.hpp"
#include "ganlm/trainer.hpp"

using namespace ganlm;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.ffn_dim = 16;
  c.n_heads = 2;
  c.enc_layers = 1;
  c.gen_dec_layers = 2;
  c.disc_dec_layers = 1;
  c.max_positions = 12;
  c.dropout = 0.0;
  c.init_std = 0.5;
  return c;
}

// Candidate tokens when specials are blocked and vocab is 7: [EOS], [UNK], 5, 6.
const std::vector<TokenId> kAllowed{kEos, kUnk, 5, 6};

struct Best {
  std::vector<TokenId> seq;
  double score = -std::numeric_limits<double>::infinity();
};

void enumerate(const std::vector<TokenId>& src, const ModelParams<double>& p, std::vector<TokenId>& prefix,
               std::size_t max_len, double alpha, Best& best) {
  for (TokenId t : kAllowed) {
    prefix.push_back(t);
    if (t == kEos || prefix.size() == max_len) {
      const double s = score<double>(src, prefix, p) / std::pow(double(prefix.size()), alpha);
      if (s > best.score) best = {prefix, s};
    } else {
      enumerate(src, p, prefix, max_len, alpha, best);
    }
    prefix.pop_back();
  }
}

}  // namespace

TEST_CASE("beam search with a full beam finds the exhaustive argmax") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    Rng rng(seed);
    auto p = init_params<double>(small_config(7), rng);
    std::vector<TokenId> src{5, 6, 5};
    for (double alpha : {0.0, 1.0}) {
      Best best;
      std::vector<TokenId> prefix;
      enumerate(src, p, prefix, 3, alpha, best);
      DecodeConfig cfg;
      cfg.beam_size = 64;
      cfg.max_len = 3;
      cfg.length_penalty = alpha;
      Hypothesis h = beam_search<double>(src, p, cfg);
      INFO("seed " << seed << " alpha " << alpha);
      CHECK(h.tokens == best.seq);
      CHECK_THAT(h.score, WithinAbs(best.score, 1e-9));
    }
  }
}

TEST_CASE("beam size 1 equals greedy for fixed models") {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    Rng rng(seed);
    auto p = init_params<double>(small_config(11), rng);
    std::vector<TokenId> src{5, 7, 9, 6};
    DecodeConfig cfg;
    cfg.max_len = 8;
    auto beam = generate<double>(src, p, cfg);
    auto greedy = greedy_batch<double>({src}, p, cfg);
    REQUIRE(greedy.size() == 1);
    CHECK(beam == greedy[0]);
  }
}

TEST_CASE("greedy output beats single-token deviations at each step") {
  Rng rng(21);
  auto p = init_params<double>(small_config(11), rng);
  std::vector<TokenId> src{5, 6, 7};
  DecodeConfig cfg;
  cfg.max_len = 5;
  auto out = generate<double>(src, p, cfg);
  for (std::size_t t = 0; t < out.size(); ++t) {
    std::vector<TokenId> prefix(out.begin(), out.begin() + static_cast<long>(t) + 1);
    const double chosen = score<double>(src, prefix, p);
    for (TokenId alt = 0; alt < 11; ++alt) {
      if (alt == out[t] || alt == kPad || alt == kBos || alt == kMask) continue;
      prefix[t] = alt;
      REQUIRE(score<double>(src, prefix, p) <= chosen);
    }
  }
}

TEST_CASE("max_len 1 emits a single token") {
  Rng rng(22);
  auto p = init_params<double>(small_config(11), rng);
  std::vector<TokenId> src{5, 6};
  DecodeConfig cfg;
  cfg.max_len = 1;
  CHECK(generate<double>(src, p, cfg).size() == 1);
  cfg.beam_size = 4;
  CHECK(generate<double>(src, p, cfg).size() == 1);
}

TEST_CASE("score of [EOS] alone is its first-step log-probability") {
  Rng rng(23);
  auto p = init_params<double>(small_config(9), rng);
  std::vector<TokenId> src{5, 6};
  std::vector<TokenId> eos{kEos};
  auto enc = encode_source<double>(src, p);
  std::vector<TokenId> bos{kBos};
  std::vector<std::uint8_t> mask{1};
  auto lp = log_softmax(generator_decode<double>(enc, bos, mask, p), -1);
  CHECK_THAT(score<double>(src, eos, p), WithinAbs(lp.data()[kEos], 1e-12));
}

TEST_CASE("decoding never reads discriminator tensors") {
  Rng rng(24);
  auto p = init_params<double>(small_config(11), rng);
  std::vector<TokenId> src{5, 8, 6};
  DecodeConfig cfg;
  cfg.max_len = 6;
  cfg.beam_size = 3;
  auto before = generate<double>(src, p, cfg);
  const double s_before = score<double>(src, before, p);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (auto& [name, t] : p.named_parameters()) {
    if (name.rfind("discriminator.", 0) == 0) {
      auto mut = t;
      for (double& x : mut.data()) x = nan;
    }
  }
  CHECK(generate<double>(src, p, cfg) == before);
  CHECK(score<double>(src, before, p) == s_before);
}

TEST_CASE("decoding is deterministic") {
  Rng rng(25);
  auto p = init_params<float>(small_config(11), rng);
  std::vector<TokenId> src{5, 8, 6};
  DecodeConfig cfg;
  cfg.beam_size = 4;
  CHECK(generate<float>(src, p, cfg) == generate<float>(src, p, cfg));
  CHECK_THROWS_AS(generate<float>(std::vector<TokenId>{}, p, cfg), ConfigError);
  cfg.beam_size = 0;
  CHECK_THROWS_AS(generate<float>(src, p, cfg), ConfigError);
}

TEST_CASE("blocked specials are never emitted") {
  for (std::uint64_t seed = 30; seed < 40; ++seed) {
    Rng rng(seed);
    auto p = init_params<double>(small_config(9), rng);
    DecodeConfig cfg;
    cfg.max_len = 10;
    for (TokenId t : generate<double>(std::vector<TokenId>{5, 6}, p, cfg)) {
      REQUIRE(t != kPad);
      REQUIRE(t != kBos);
      REQUIRE(t != kMask);
    }
  }
}

TEST_CASE("a model trained on a copy task copies") {
  Vocab v = build_vocab(std::vector<std::string>{"a b c d e"});
  TrainConfig cfg;
  cfg.mode = TrainMode::kFinetune;
  cfg.finetune_mode = FinetuneMode::kG;
  cfg.model = small_config(v.size());
  cfg.model.d_model = 32;
  cfg.model.ffn_dim = 64;
  cfg.model.n_heads = 4;
  cfg.model.init_std = 0.05;
  cfg.peak_lr = 3e-3;
  cfg.warmup_steps = 50;
  cfg.total_steps = 600;
  cfg.batch_rows = 8;
  ParallelCorpus data;
  Rng rng(26);
  std::vector<std::string> letters{"a", "b", "c", "d", "e"};
  for (int i = 0; i < 60; ++i) {
    std::string s;
    const std::size_t n = 2 + rng.below(3);
    for (std::size_t k = 0; k < n; ++k) s += (k ? " " : "") + letters[rng.below(5)];
    data.sources.push_back(encode(s, v));
    data.targets.push_back(encode(s, v));
  }
  data.sources.push_back(encode("a b c", v));
  data.targets.push_back(encode("a b c", v));
  TrainState s = initial_state(cfg);
  train(s, cfg, make_finetune_source(data, cfg));
  DecodeConfig dc;
  dc.max_len = 8;
  CHECK(decode(generate<float>(encode("a b c", v), s.params, dc), v) == "a b c [EOS]");
}

TEST_CASE("BLEU of identical text is 100 and of disjoint text is 0") {
  std::vector<std::string> refs{"the cat sat on the mat", "a b c d e"};
  auto same = corpus_bleu(refs, refs);
  CHECK_THAT(same.bleu, WithinAbs(100.0, 1e-9));
  CHECK(exact_match(refs, refs) == 1.0);
  std::vector<std::string> disjoint{"x y z q r s", "u v w k l"};
  CHECK(corpus_bleu(disjoint, refs).bleu == 0.0);
  CHECK(exact_match(disjoint, refs) == 0.0);
}

// Hand computation:
//   hyp1 "the cat sat on mat"      ref1 "the cat sat on the mat"
//   hyp2 "a quick fox"             ref2 "a quick brown fox"
//   1-grams: 5/5 + 3/3 = 8/8      2-grams: 3/4 + 1/2 = 4/6
//   3-grams: 2/3 + 0/1 = 2/4      4-grams: 1/2 + 0/0 = 1/2
//   c = 8, r = 10, BP = exp(1 - 10/8) = exp(-0.25)
//   BLEU = 100 * exp(-0.25) * (1 * 2/3 * 1/2 * 1/2)^(1/4)
TEST_CASE("BLEU matches a hand-computed two-sentence example") {
  std::vector<std::string> hyps{"the cat sat on mat", "a quick fox"};
  std::vector<std::string> refs{"the cat sat on the mat", "a quick brown fox"};
  auto r = corpus_bleu(hyps, refs);
  const double expected = 100.0 * std::exp(-0.25) * std::pow(1.0 * (2.0 / 3.0) * 0.5 * 0.5, 0.25);
  CHECK_THAT(r.brevity_penalty, WithinAbs(std::exp(-0.25), 1e-12));
  CHECK_THAT(r.precisions[1], WithinAbs(4.0 / 6.0, 1e-12));
  CHECK_THAT(r.bleu, WithinAbs(expected, 1e-9));
  CHECK_THAT(r.bleu, WithinAbs(49.76, 0.01));
  CHECK(exact_match(hyps, refs) == 0.0);
}

TEST_CASE("BLEU on short sentences uses the orders that exist") {
  std::vector<std::string> one{"hello"};
  CHECK_THAT(corpus_bleu(one, one).bleu, WithinAbs(100.0, 1e-9));
  std::vector<std::string> empty{""};
  CHECK(corpus_bleu(empty, one).bleu == 0.0);
  CHECK_THROWS_AS(corpus_bleu(one, std::vector<std::string>{}), ConfigError);
}
