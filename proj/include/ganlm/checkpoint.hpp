// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory:
//   manifest.json          config, shapes, step, RNG state, train config
//   vocab.txt              one token per line
//   <param_path>.f32       raw little-endian float32, row-major
//   adam_m.<param_path>.f32, adam_v.<param_path>.f32   optimizer moments

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/error.hpp"
#include "ganlm/model.hpp"
#include "ganlm/optim.hpp"
#include "ganlm/vocab.hpp"

namespace ganlm {

inline constexpr const char* kCheckpointFormat = "ganlm-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams<float> params;
  Vocab vocab;
  std::optional<OptimState<float>> optim;
  std::size_t step = 0;
  std::string rng_state;
  nlohmann::json train_config;  // null when absent
};

namespace detail {

inline void write_f32(const std::filesystem::path& path, std::span<const float> values) {
  std::vector<std::uint32_t> bits(values.size());
  std::memcpy(bits.data(), values.data(), values.size() * sizeof(float));
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& b : bits) b = __builtin_bswap32(b);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size() * 4));
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

inline std::vector<float> read_f32(const std::filesystem::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("checkpoint: cannot read " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * 4) {
    throw ConfigError("checkpoint: " + path.filename().string() + " holds " + std::to_string(bytes) +
                      " bytes, expected " + std::to_string(expected * 4));
  }
  in.seekg(0);
  std::vector<std::uint32_t> bits(expected);
  in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw IoError("checkpoint: read failed for " + path.string());
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& b : bits) b = __builtin_bswap32(b);
  }
  std::vector<float> values(expected);
  std::memcpy(values.data(), bits.data(), bytes);
  return values;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("checkpoint: cannot create " + dir.string() + ": " + ec.message());

  const auto named = ckpt.params.named_parameters();
  if (ckpt.optim && ckpt.optim->m.size() != named.size()) {
    throw ShapeError("checkpoint: optimizer state does not match the parameter list");
  }
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& [name, t] = named[i];
    detail::write_f32(dir / (name + ".f32"), t.data());
    if (ckpt.optim) {
      detail::write_f32(dir / ("adam_m." + name + ".f32"), ckpt.optim->m[i]);
      detail::write_f32(dir / ("adam_v." + name + ".f32"), ckpt.optim->v[i]);
    }
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
  }
  ckpt.vocab.save(dir / "vocab.txt");

  nlohmann::json manifest = {
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"model_config", ckpt.params.config},
      {"parameter_count", ckpt.params.parameter_count()},
      {"tensors", tensors},
      {"step", ckpt.step},
      {"rng_state", ckpt.rng_state},
      {"train_config", ckpt.train_config},
      {"vocab", {{"file", "vocab.txt"}, {"size", ckpt.vocab.size()}, {"num_language_tags", ckpt.vocab.num_language_tags()}}},
  };
  if (ckpt.optim) {
    manifest["optimizer"] = {{"step", ckpt.optim->step}, {"skipped", ckpt.optim->skipped}};
  } else {
    manifest["optimizer"] = nullptr;
  }
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("checkpoint: cannot read " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint: malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  Checkpoint ckpt;
  try {
    if (manifest.value("format", std::string()) != kCheckpointFormat) {
      throw ConfigError("checkpoint: " + manifest_path.string() + " is not a ganlm checkpoint");
    }
    if (manifest.value("version", 0) != kCheckpointVersion) {
      throw ConfigError("checkpoint: unsupported version " + manifest.value("version", nlohmann::json()).dump());
    }
    const ModelConfig config = manifest.at("model_config").get<ModelConfig>();
    config.validate();
    ckpt.step = manifest.at("step").get<std::size_t>();
    ckpt.rng_state = manifest.at("rng_state").get<std::string>();
    ckpt.train_config = manifest.value("train_config", nlohmann::json());
    ckpt.vocab = Vocab::load(dir / manifest.at("vocab").at("file").get<std::string>(),
                             manifest.at("vocab").at("num_language_tags").get<std::size_t>());
    if (ckpt.vocab.size() != config.vocab_size) {
      throw ConfigError("checkpoint: vocab has " + std::to_string(ckpt.vocab.size()) + " entries, model expects " +
                        std::to_string(config.vocab_size));
    }

    // Expected layout comes from the config; the manifest must agree.
    Rng unused(0);
    ckpt.params = init_params<float>(config, unused);
    const auto& listed = manifest.at("tensors");
    const bool has_optim = !manifest.at("optimizer").is_null();
    if (has_optim) {
      ckpt.optim.emplace();
      ckpt.optim->step = manifest["optimizer"].at("step").get<std::size_t>();
      ckpt.optim->skipped = manifest["optimizer"].at("skipped").get<std::size_t>();
    }
    std::size_t i = 0;
    ckpt.params.for_each([&](const std::string& name, Tensor<float>& t) {
      if (i >= listed.size() || listed[i].at("name") != name) {
        throw ConfigError("checkpoint: tensor " + std::to_string(i) + " should be '" + name + "'");
      }
      if (listed[i].at("shape").get<Shape>() != t.shape()) {
        throw ConfigError("checkpoint: tensor '" + name + "' has shape " +
                          shape_str(listed[i].at("shape").get<Shape>()) + ", config implies " + shape_str(t.shape()));
      }
      t = Tensor<float>(t.shape(), detail::read_f32(dir / (name + ".f32"), t.numel()), true);
      if (has_optim) {
        ckpt.optim->m.push_back(detail::read_f32(dir / ("adam_m." + name + ".f32"), t.numel()));
        ckpt.optim->v.push_back(detail::read_f32(dir / ("adam_v." + name + ".f32"), t.numel()));
      }
      ++i;
    });
    if (i != listed.size()) throw ConfigError("checkpoint: manifest lists extra tensors");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint: bad manifest field: " + std::string(e.what()));
  }
  return ckpt;
}

}  // namespace ganlm
