// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <regex>
#include <string>

#include "ganlm/inspect.hpp"
#include "ganlm/plot.hpp"
#include "ganlm/run_manifest.hpp"
#include "ganlm/synthetic.hpp"
#include "ganlm/trainer.hpp"

using namespace ganlm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

fs::path write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

std::size_t count(const std::string& haystack, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) ++n;
  return n;
}

std::string text_of(const std::string& svg, const std::string& cls) {
  std::smatch m;
  const std::regex re("class=\"" + cls + "\"[^>]*>([^<]*)<");
  REQUIRE(std::regex_search(svg, m, re));
  return m[1];
}

}  // namespace

TEST_CASE("a two-point series draws one polyline per loss") {
  TempDir dir("ganlm_plot_two");
  auto path = write(dir.path / "m.jsonl",
                    R"({"step":1,"L_G":3.0,"L_D":0.7,"L_DG":3.1,"combined":13.1})" "\n"
                    R"({"step":2,"L_G":2.5,"L_D":0.6,"L_DG":2.7,"combined":11.2})" "\n");
  const std::string svg = render_svg(read_metrics(path));
  CHECK(count(svg, "<polyline") == 4);
  for (const char* k : kPlotKeys) CHECK(count(svg, std::string("data-key=\"") + k + "\"") == 1);
  CHECK(count(svg, "<svg") == 1);
  CHECK(count(svg, "</svg>") == 1);
}

TEST_CASE("plot axes carry the data ranges") {
  TempDir dir("ganlm_plot_axes");
  auto path = write(dir.path / "m.jsonl",
                    R"({"step":5,"L_G":4.0,"L_D":0.5,"L_DG":4.5,"combined":9.5})" "\n"
                    R"({"step":17,"L_G":1.0,"L_D":0.25,"L_DG":2.0,"combined":5.5})" "\n"
                    R"({"step":30,"L_G":0.5,"L_D":0.1,"L_DG":0.75,"combined":2.25})" "\n");
  const std::string svg = render_svg(read_metrics(path));
  CHECK(text_of(svg, "x-min") == "5");
  CHECK(text_of(svg, "x-max") == "30");
  CHECK(text_of(svg, "y-min") == "0.1");
  CHECK(text_of(svg, "y-max") == "9.5");
}

TEST_CASE("keys missing from every record are not drawn") {
  TempDir dir("ganlm_plot_missing");
  auto path = write(dir.path / "m.jsonl", R"({"step":1,"L_G":3.0})" "\n" R"({"step":2,"L_G":2.0})" "\n");
  const std::string svg = render_svg(read_metrics(path));
  CHECK(count(svg, "<polyline") == 1);
}

TEST_CASE("unusable metrics files are config errors, missing ones IO errors") {
  TempDir dir("ganlm_plot_bad");
  CHECK_THROWS_AS(read_metrics(write(dir.path / "empty.jsonl", "")), ConfigError);
  CHECK_THROWS_AS(read_metrics(write(dir.path / "blank.jsonl", "\n  \n")), ConfigError);
  CHECK_THROWS_AS(read_metrics(write(dir.path / "junk.jsonl", "not json\n")), ConfigError);
  CHECK_THROWS_AS(read_metrics(write(dir.path / "nostep.jsonl", R"({"L_G":1})" "\n")), ConfigError);
  CHECK_THROWS_AS(read_metrics(dir.path / "absent.jsonl"), IoError);
}

TEST_CASE("metrics written by the trainer plot") {
  TempDir dir("ganlm_plot_trainer");
  std::ofstream out(dir.path / "metrics.jsonl");
  MetricsWriter w(out);
  for (std::size_t s = 1; s <= 3; ++s) {
    StepMetrics m;
    m.step = s;
    m.l_g = 1.0 / static_cast<double>(s);
    w.write(m);
  }
  out.close();
  auto records = read_metrics(dir.path / "metrics.jsonl");
  REQUIRE(records.size() == 3);
  CHECK(count(render_svg(records), "<polyline") == 4);
}

TEST_CASE("run manifests round-trip") {
  TempDir dir("ganlm_run_manifest");
  RunManifest m;
  m.command = "pretrain";
  m.config_path = "cfg.json";
  m.seed = 17;
  m.arguments = {"ganlm", "pretrain"};
  m.outputs = {{"metrics", "metrics.jsonl"}};
  const fs::path path = manifest_path_for(dir.path);
  CHECK(path == dir.path / kRunManifestName);
  write_run_manifest(m, path);
  RunManifest back = read_run_manifest(path);
  CHECK(back.command == "pretrain");
  CHECK(back.config_path == "cfg.json");
  CHECK(back.seed == std::optional<std::uint64_t>(17));
  CHECK(back.build_id == m.build_id);
  CHECK(back.arguments == m.arguments);
  CHECK_FALSE(back.finished_at.empty());
  CHECK(std::regex_match(back.started_at, std::regex(R"(\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ)")));
  CHECK(manifest_path_for(dir.path / "out.txt") == dir.path / "out.txt.run.json");
  CHECK_THROWS_AS(read_run_manifest(dir.path / "none.json"), IoError);
}

TEST_CASE("inspected batches show noisy tokens that differ from gold at every v") {
  SyntheticSpec spec;
  Rng data_rng(3);
  auto lines = synthetic_sentences(20, spec, data_rng);
  Vocab vocab = build_vocab(lines);
  TrainConfig cfg;
  cfg.model.vocab_size = vocab.size();
  cfg.model.d_model = 16;
  cfg.model.ffn_dim = 32;
  cfg.model.n_heads = 2;
  cfg.model.enc_layers = cfg.model.gen_dec_layers = cfg.model.disc_dec_layers = 1;
  cfg.model.dropout = 0.0;
  cfg.batch_rows = 6;
  cfg.mask_ratio = 0.4;
  cfg.objective.policy = ReplacementPolicy::kAllPositions;
  MonolingualCorpus c;
  for (const auto& l : lines) c.sentences.push_back(encode(l, vocab));

  auto dump = [&](std::uint64_t seed) {
    cfg.seed = seed;
    TrainState s = initial_state(cfg);
    const PretrainBatch batch = make_pretrain_source({c}, cfg)(s.rng);
    NoGradGuard no_grad;
    auto out = pretrain_loss(batch, s.params, cfg.objective, s.rng);
    auto rows = inspect_rows(batch, out, vocab);
    std::size_t v_total = 0;
    for (const auto& row : rows) {
      for (std::size_t t : row.v) {
        REQUIRE(row.noisy[t] != row.gold[t]);
        ++v_total;
      }
      for (std::size_t t = 0; t < row.gold.size(); ++t) {
        const bool in_v = std::find(row.v.begin(), row.v.end(), t) != row.v.end();
        if (!in_v) REQUIRE(row.noisy[t] == row.gold[t]);
        if (row.labels[t] == 1) REQUIRE(row.sampled[t] == row.gold[t]);
        if (row.labels[t] == 0) REQUIRE(row.sampled[t] != row.gold[t]);
      }
      REQUIRE(row.gold.back() == "[EOS]");
      REQUIRE(row.labels.back() == -1);
    }
    CHECK(v_total == out.p);
    return format_inspection(rows);
  };
  const std::string a = dump(11);
  CHECK(a == dump(11));
  CHECK(a != dump(12));
  CHECK(a.find("[MASK]") != std::string::npos);
  CHECK(a.find("noisy") != std::string::npos);
}

TEST_CASE("inspection of the gardener sentence lines up with its masks") {
  Vocab vocab = build_vocab(std::vector<std::string>{"the gardener watered the flowers"});
  const auto ids = encode("the gardener watered the flowers", vocab);
  SpanSet spans;
  spans.spans = {{1, 1}, {3, 4}};
  const MaskedPair pair = apply_mask(ids, spans);
  const PretrainBatch batch = make_batch(std::vector<MaskedPair>{pair}, 16);
  ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.d_model = 8;
  mc.ffn_dim = 16;
  mc.n_heads = 2;
  mc.enc_layers = mc.gen_dec_layers = mc.disc_dec_layers = 1;
  mc.max_positions = 16;
  mc.dropout = 0.0;
  Rng rng(5);
  auto params = init_params<float>(mc, rng);
  ObjectiveConfig oc;
  oc.policy = ReplacementPolicy::kAllPositions;
  NoGradGuard no_grad;
  auto out = pretrain_loss(batch, params, oc, rng);
  auto rows = inspect_rows(batch, out, vocab);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].src == std::vector<std::string>{"the", "[MASK]", "watered", "[MASK]", "[MASK]"});
  CHECK(rows[0].gold == std::vector<std::string>{"gardener", "the", "flowers", "[EOS]"});
  CHECK(rows[0].v.size() == 3);
}
