// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// SVG line chart of the loss columns of a metrics JSONL file.

#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ganlm/error.hpp"

namespace ganlm {

inline constexpr std::array<const char*, 4> kPlotKeys = {"L_G", "L_D", "L_DG", "combined"};

inline std::vector<nlohmann::json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("plot: cannot read " + path.string());
  std::vector<nlohmann::json> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError("plot: " + path.string() + ":" + std::to_string(lineno) + " is not JSON");
    }
    if (!records.back().is_object() || !records.back().contains("step")) {
      throw ConfigError("plot: " + path.string() + ":" + std::to_string(lineno) + " has no step");
    }
  }
  if (records.empty()) throw ConfigError("plot: " + path.string() + " holds no metrics");
  return records;
}

inline std::string render_svg(const std::vector<nlohmann::json>& records) {
  if (records.empty()) throw ConfigError("plot: no metrics");
  constexpr double W = 800, H = 480, left = 70, right = 150, top = 30, bottom = 50;
  const std::array<const char*, 4> colors = {"#1f77b4", "#d62728", "#2ca02c", "#222222"};

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& r : records) {
    const double s = r.at("step").get<double>();
    xmin = std::min(xmin, s);
    xmax = std::max(xmax, s);
    for (const char* k : kPlotKeys) {
      if (r.contains(k) && r[k].is_number()) {
        ymin = std::min(ymin, r[k].get<double>());
        ymax = std::max(ymax, r[k].get<double>());
      }
    }
  }
  if (!(ymin <= ymax)) ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - ymin) / (ymax - ymin) * (H - top - bottom); };
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\""
      << H - bottom << "\" stroke=\"black\"/>\n";
  svg << "<line class=\"axis\" x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
      << "\" stroke=\"black\"/>\n";
  svg << "<text class=\"x-min\" x=\"" << left << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"start\">"
      << num(xmin) << "</text>\n";
  svg << "<text class=\"x-max\" x=\"" << W - right << "\" y=\"" << H - bottom + 18 << "\" text-anchor=\"end\">"
      << num(xmax) << "</text>\n";
  svg << "<text class=\"x-label\" x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\">step</text>\n";
  svg << "<text class=\"y-min\" x=\"" << left - 6 << "\" y=\"" << H - bottom << "\" text-anchor=\"end\">" << num(ymin)
      << "</text>\n";
  svg << "<text class=\"y-max\" x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << num(ymax)
      << "</text>\n";
  svg << "<text class=\"y-label\" x=\"16\" y=\"" << (top + H - bottom) / 2 << "\" transform=\"rotate(-90 16 "
      << (top + H - bottom) / 2 << ")\" text-anchor=\"middle\">loss</text>\n";

  for (std::size_t k = 0; k < kPlotKeys.size(); ++k) {
    std::ostringstream points;
    std::size_t n = 0;
    for (const auto& r : records) {
      if (!r.contains(kPlotKeys[k]) || !r[kPlotKeys[k]].is_number()) continue;
      points << (n++ ? " " : "") << px(r["step"].get<double>()) << ',' << py(r[kPlotKeys[k]].get<double>());
    }
    if (n == 0) continue;
    svg << "<polyline data-key=\"" << kPlotKeys[k] << "\" fill=\"none\" stroke=\"" << colors[k]
        << "\" stroke-width=\"1.5\" points=\"" << points.str() << "\"/>\n";
    svg << "<text x=\"" << W - right + 12 << "\" y=\"" << top + 18 * (k + 1) << "\" fill=\"" << colors[k] << "\">"
        << kPlotKeys[k] << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace ganlm
