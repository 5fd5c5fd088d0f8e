// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Provenance record written next to every command output.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/error.hpp"

#ifndef GANLM_BUILD_ID
#define GANLM_BUILD_ID "unknown"
#endif

namespace ganlm {

inline constexpr const char* kRunManifestName = "run.json";

inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
  const std::time_t secs = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string build_id = GANLM_BUILD_ID;
  std::string started_at = utc_timestamp();
  std::string finished_at;
  std::vector<std::string> arguments;
  nlohmann::json outputs = nlohmann::json::object();
};

inline nlohmann::json to_json_value(const RunManifest& m) {
  nlohmann::json j = {
      {"command", m.command},
      {"config_path", m.config_path},
      {"seed", m.seed ? nlohmann::json(*m.seed) : nlohmann::json(nullptr)},
      {"build_id", m.build_id},
      {"started_at", m.started_at},
      {"finished_at", m.finished_at},
      {"arguments", m.arguments},
      {"outputs", m.outputs},
  };
  return j;
}

// Writes `path`, stamping finished_at if unset.
inline void write_run_manifest(RunManifest m, const std::filesystem::path& path) {
  if (m.finished_at.empty()) m.finished_at = utc_timestamp();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write run manifest " + path.string());
  out << to_json_value(m).dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

// Directory outputs carry run.json inside; file outputs carry <file>.run.json.
inline std::filesystem::path manifest_path_for(const std::filesystem::path& output) {
  if (std::filesystem::is_directory(output)) return output / kRunManifestName;
  return std::filesystem::path(output.string() + ".run.json");
}

inline RunManifest read_run_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read run manifest " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_path = j.at("config_path").get<std::string>();
    if (!j.at("seed").is_null()) m.seed = j.at("seed").get<std::uint64_t>();
    m.build_id = j.at("build_id").get<std::string>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.arguments = j.at("arguments").get<std::vector<std::string>>();
    m.outputs = j.at("outputs");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("run manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace ganlm
