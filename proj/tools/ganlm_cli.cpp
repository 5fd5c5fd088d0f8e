// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// ganlm: pretrain, finetune, generate, eval, plot and inspect-batch.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/bleu.hpp"
#include "ganlm/checkpoint.hpp"
#include "ganlm/corruption.hpp"
#include "ganlm/decode.hpp"
#include "ganlm/error.hpp"
#include "ganlm/inspect.hpp"
#include "ganlm/plot.hpp"
#include "ganlm/run_manifest.hpp"
#include "ganlm/runtime.hpp"
#include "ganlm/trainer.hpp"
#include "ganlm/vocab.hpp"

namespace fs = std::filesystem;
using namespace ganlm;

namespace {

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw IoError(what + " not found: " + path.string());
}

TrainConfig read_config(const std::string& path, std::optional<std::uint64_t> seed) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_train_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

// Checkpoints land in <out>/checkpoint (final) and <out>/checkpoint-<step>.
struct RunOutput {
  fs::path out;
  RunManifest manifest;
  std::vector<fs::path> dirs;

  void save(const TrainState& s, const Vocab& vocab, const TrainConfig& cfg, bool final) {
    const fs::path dir = out / (final ? std::string("checkpoint") : "checkpoint-" + std::to_string(s.step));
    save_checkpoint(make_checkpoint(s, vocab, cfg), dir);
    dirs.push_back(dir);
  }

  void finish() {
    manifest.finished_at = utc_timestamp();
    write_run_manifest(manifest, out / kRunManifestName);
    for (const auto& d : dirs) write_run_manifest(manifest, d / kRunManifestName);
  }
};

void run_training(TrainState& state, const TrainConfig& cfg, const BatchSource& source, const Vocab& vocab,
                  RunOutput& run) {
  make_dir(run.out);
  std::ofstream metrics(run.out / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw IoError("cannot write " + (run.out / "metrics.jsonl").string());
  MetricsWriter writer(metrics);
  std::size_t non_finite = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    writer.write(m);
    non_finite = std::isfinite(m.combined) ? 0 : non_finite + 1;
    if (non_finite >= 10) throw NumericError("training: loss non-finite for 10 consecutive steps at step " +
                                             std::to_string(m.step));
  };
  std::size_t last_saved = static_cast<std::size_t>(-1);
  hooks.on_checkpoint = [&](const TrainState& s) {
    const bool final = s.step >= cfg.total_steps;
    if (!final) {
      run.save(s, vocab, cfg, false);
    } else if (last_saved != s.step) {
      run.save(s, vocab, cfg, true);
      last_saved = s.step;
    }
  };
  train(state, cfg, source, hooks);
  run.manifest.outputs = {{"metrics", "metrics.jsonl"}, {"checkpoint", "checkpoint"}, {"steps", state.step}};
  run.finish();
}

std::string arg_line_error(const std::string& what, std::size_t a, std::size_t b) {
  return what + ": " + std::to_string(a) + " source lines but " + std::to_string(b) + " target lines";
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const std::string& config_path, const std::string& manifest_path, const std::string& out,
                 std::optional<std::uint64_t> seed, RunManifest manifest) {
  TrainConfig cfg = read_config(config_path, seed);
  cfg.mode = TrainMode::kPretrain;
  const auto entries = load_corpus_manifest(manifest_path);
  std::vector<std::vector<std::string>> texts;
  std::vector<std::string> all_lines, tags;
  for (const auto& e : entries) {
    require_file(e.path, "corpus");
    texts.push_back(read_lines(e.path));
    all_lines.insert(all_lines.end(), texts.back().begin(), texts.back().end());
    if (!e.language_tag.empty() && std::find(tags.begin(), tags.end(), e.language_tag) == tags.end()) {
      tags.push_back(e.language_tag);
    }
  }
  const Vocab vocab = build_vocab(std::span<const std::string>(all_lines), cfg.min_freq, cfg.max_vocab, tags);
  cfg.model.vocab_size = vocab.size();
  std::vector<MonolingualCorpus> corpora;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    MonolingualCorpus c;
    c.name = entries[i].path.string();
    if (!entries[i].language_tag.empty()) c.language = *vocab.language_tag(entries[i].language_tag);
    for (const auto& line : texts[i]) c.sentences.push_back(encode(line, vocab));
    corpora.push_back(std::move(c));
  }
  const BatchSource source = make_pretrain_source(corpora, cfg);
  TrainState state = initial_state(cfg);
  manifest.seed = cfg.seed;
  RunOutput run{out, std::move(manifest), {}};
  run_training(state, cfg, source, vocab, run);
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& src_file, const std::string& trg_file,
                 const std::string& init, const std::string& mode, const std::string& out,
                 std::optional<std::uint64_t> seed, RunManifest manifest) {
  TrainConfig cfg = read_config(config_path, seed);
  cfg.mode = TrainMode::kFinetune;
  if (!mode.empty()) cfg.finetune_mode = parse_finetune_mode(mode);
  require_file(src_file, "source file");
  require_file(trg_file, "target file");
  const auto src_lines = read_lines(src_file);
  const auto trg_lines = read_lines(trg_file);
  if (src_lines.size() != trg_lines.size()) {
    throw ConfigError(arg_line_error("finetune: misaligned parallel data", src_lines.size(), trg_lines.size()));
  }

  std::optional<Checkpoint> ckpt;
  Vocab vocab;
  if (!init.empty()) {
    ckpt = load_checkpoint(init);
    vocab = ckpt->vocab;
    cfg.model = ckpt->params.config;
  } else {
    std::vector<std::string> all(src_lines);
    all.insert(all.end(), trg_lines.begin(), trg_lines.end());
    vocab = build_vocab(std::span<const std::string>(all), cfg.min_freq, cfg.max_vocab);
    cfg.model.vocab_size = vocab.size();
  }
  ParallelCorpus data;
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    auto s = encode(src_lines[i], vocab), t = encode(trg_lines[i], vocab);
    if (s.empty() || t.empty()) continue;
    data.sources.push_back(std::move(s));
    data.targets.push_back(std::move(t));
  }
  const BatchSource source = make_finetune_source(std::move(data), cfg);
  TrainState state = ckpt ? state_from_weights(cfg, std::move(ckpt->params)) : initial_state(cfg);
  manifest.seed = cfg.seed;
  RunOutput run{out, std::move(manifest), {}};
  run_training(state, cfg, source, vocab, run);
  return 0;
}

std::vector<std::string> decode_lines(const Checkpoint& ckpt, const std::vector<std::string>& lines,
                                      const DecodeConfig& dc) {
  std::vector<std::string> out(lines.size());
  std::vector<std::vector<TokenId>> batch;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto ids = encode(lines[i], ckpt.vocab);
    if (ids.empty()) continue;
    if (ids.size() > ckpt.params.config.max_positions) ids.resize(ckpt.params.config.max_positions);
    batch.push_back(std::move(ids));
    where.push_back(i);
  }
  constexpr std::size_t kChunk = 64;
  for (std::size_t b = 0; b < batch.size(); b += (dc.beam_size == 1 ? kChunk : 1)) {
    if (dc.beam_size == 1) {
      const std::size_t e = std::min(batch.size(), b + kChunk);
      const std::vector<std::vector<TokenId>> chunk(batch.begin() + static_cast<long>(b),
                                                    batch.begin() + static_cast<long>(e));
      const auto hyps = greedy_batch<float>(chunk, ckpt.params, dc);
      for (std::size_t k = 0; k < hyps.size(); ++k) out[where[b + k]] = decode(strip_eos(hyps[k]), ckpt.vocab);
    } else {
      out[where[b]] = decode(strip_eos(generate<float>(batch[b], ckpt.params, dc)), ckpt.vocab);
    }
  }
  return out;
}

int cmd_generate(const std::string& checkpoint, const std::string& input, const std::string& output,
                 const DecodeConfig& dc, RunManifest manifest) {
  dc.validate();
  require_file(input, "input");
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto lines = read_lines(input);
  std::string text;
  for (const auto& h : decode_lines(ckpt, lines, dc)) text += h + '\n';
  if (output.empty() || output == "-") {
    std::cout << text << std::flush;
  } else {
    write_file(output, text);
    manifest.outputs = {{"text", fs::path(output).filename().string()}, {"lines", lines.size()}};
    write_run_manifest(manifest, manifest_path_for(output));
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& src, const std::string& ref, const DecodeConfig& dc,
             RunManifest manifest) {
  dc.validate();
  require_file(src, "source file");
  require_file(ref, "reference file");
  const auto src_lines = read_lines(src);
  const auto ref_lines = read_lines(ref);
  if (src_lines.size() != ref_lines.size()) {
    throw ConfigError(arg_line_error("eval: misaligned files", src_lines.size(), ref_lines.size()));
  }
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const auto hyps = decode_lines(ckpt, src_lines, dc);
  const BleuResult b = corpus_bleu(hyps, ref_lines);
  manifest.finished_at = utc_timestamp();
  nlohmann::json report = {
      {"lines", hyps.size()},
      {"exact_match", exact_match(hyps, ref_lines)},
      {"bleu", b.bleu},
      {"brevity_penalty", b.brevity_penalty},
      {"precisions", {b.precisions[0], b.precisions[1], b.precisions[2], b.precisions[3]}},
      {"hyp_length", b.hyp_length},
      {"ref_length", b.ref_length},
      {"run", to_json_value(manifest)},
  };
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_plot(const std::string& metrics, const std::string& out, RunManifest manifest) {
  const auto records = read_metrics(metrics);
  write_file(out, render_svg(records));
  manifest.outputs = {{"svg", fs::path(out).filename().string()}, {"records", records.size()}};
  write_run_manifest(manifest, manifest_path_for(out));
  return 0;
}

int cmd_inspect_batch(const std::string& config_path, const std::string& corpus, const std::string& checkpoint,
                      std::optional<std::uint64_t> seed, RunManifest manifest) {
  TrainConfig cfg = read_config(config_path, seed);
  require_file(corpus, "corpus");
  const auto lines = read_lines(corpus);
  std::optional<Checkpoint> ckpt;
  Vocab vocab;
  if (!checkpoint.empty()) {
    ckpt = load_checkpoint(checkpoint);
    vocab = ckpt->vocab;
    cfg.model = ckpt->params.config;
  } else {
    vocab = build_vocab(std::span<const std::string>(lines), cfg.min_freq, cfg.max_vocab);
    cfg.model.vocab_size = vocab.size();
  }
  MonolingualCorpus c;
  for (const auto& line : lines) c.sentences.push_back(encode(line, vocab));
  TrainState state = ckpt ? state_from_weights(cfg, std::move(ckpt->params)) : initial_state(cfg);
  const BatchSource source = make_pretrain_source({c}, cfg);
  const PretrainBatch batch = source(state.rng);
  NoGradGuard no_grad;
  const auto out = pretrain_loss(batch, state.params, cfg.objective, state.rng);
  manifest.seed = cfg.seed;
  manifest.finished_at = utc_timestamp();
  std::cout << "# run " << to_json_value(manifest).dump() << '\n';
  std::cout << "# L_G " << out.generator_loss << "  L_D " << out.detection_loss << "  L_DG " << out.denoising_loss
            << "  p " << out.p << '\n';
  std::cout << format_inspection(inspect_rows(batch, out, vocab));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ganlm::tune_allocator();
  CLI::App app{"GanLM: shared encoder with generator and discriminator decoders"};
  app.require_subcommand(1);

  RunManifest manifest;
  for (int i = 0; i < argc; ++i) manifest.arguments.emplace_back(argv[i]);

  std::string config, corpus_manifest, out, src, trg, init, mode, checkpoint, input, output, ref, metrics, corpus;
  std::optional<std::uint64_t> seed;
  DecodeConfig dc;

  auto* pre = app.add_subcommand("pretrain", "Pre-train on monolingual corpora");
  pre->add_option("--config", config, "TrainConfig JSON")->required();
  pre->add_option("--corpus-manifest", corpus_manifest, "JSON list of {path, language_tag}")->required();
  pre->add_option("--out", out, "Output directory")->required();
  pre->add_option("--seed", seed, "Override the config seed");

  auto* fine = app.add_subcommand("finetune", "Fine-tune on parallel data");
  fine->add_option("--config", config, "TrainConfig JSON")->required();
  fine->add_option("--src-file", src, "Source lines")->required();
  fine->add_option("--trg-file", trg, "Target lines")->required();
  fine->add_option("--init-checkpoint", init, "Start from these weights");
  fine->add_option("--mode", mode, "G, D or G+D");
  fine->add_option("--out", out, "Output directory")->required();
  fine->add_option("--seed", seed, "Override the config seed");

  auto* gen = app.add_subcommand("generate", "Decode with the generator");
  gen->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  gen->add_option("--input", input, "Source lines")->required();
  gen->add_option("--output", output, "Output file (stdout when omitted)");
  gen->add_option("--beam", dc.beam_size, "Beam size (1 is greedy)");
  gen->add_option("--max-len", dc.max_len, "Maximum generated tokens");
  gen->add_option("--length-penalty", dc.length_penalty, "Length penalty exponent");

  auto* ev = app.add_subcommand("eval", "Exact match and corpus BLEU against references");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ev->add_option("--src", src, "Source lines")->required();
  ev->add_option("--ref", ref, "Reference lines")->required();
  ev->add_option("--beam", dc.beam_size, "Beam size (1 is greedy)");
  ev->add_option("--max-len", dc.max_len, "Maximum generated tokens");
  ev->add_option("--length-penalty", dc.length_penalty, "Length penalty exponent");

  auto* plot = app.add_subcommand("plot", "SVG chart of the losses in a metrics file");
  plot->add_option("--metrics", metrics, "metrics.jsonl")->required();
  plot->add_option("--out", out, "SVG path")->required();

  auto* insp = app.add_subcommand("inspect-batch", "Dump one pre-training batch through every stage");
  insp->add_option("--config", config, "TrainConfig JSON");
  insp->add_option("--corpus", corpus, "Corpus, one sentence per line")->required();
  insp->add_option("--checkpoint", checkpoint, "Use trained weights instead of a fresh model");
  insp->add_option("--seed", seed, "Override the config seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kConfig);
  }

  manifest.config_path = config;
  manifest.seed = seed;
  try {
    if (*pre) {
      manifest.command = "pretrain";
      return cmd_pretrain(config, corpus_manifest, out, seed, manifest);
    }
    if (*fine) {
      manifest.command = "finetune";
      return cmd_finetune(config, src, trg, init, mode, out, seed, manifest);
    }
    if (*gen) {
      manifest.command = "generate";
      return cmd_generate(checkpoint, input, output, dc, manifest);
    }
    if (*ev) {
      manifest.command = "eval";
      return cmd_eval(checkpoint, src, ref, dc, manifest);
    }
    if (*plot) {
      manifest.command = "plot";
      return cmd_plot(metrics, out, manifest);
    }
    if (*insp) {
      manifest.command = "inspect-batch";
      return cmd_inspect_batch(config, corpus, checkpoint, seed, manifest);
    }
  } catch (const Error& e) {
    std::cerr << "ganlm: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "ganlm: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kGeneric);
  }
  return static_cast<int>(ExitCode::kConfig);
}
