// Copyright 2026 The ganlm-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adam with bias correction, global-norm clipping and a skip on non-finite
// gradients; linear warmup followed by inverse-square-root decay.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ganlm/error.hpp"
#include "ganlm/tensor.hpp"

namespace ganlm {

enum class ScheduleKind { kInverseSqrt, kConstant };

inline ScheduleKind parse_schedule(const std::string& s) {
  if (s == "inverse_sqrt") return ScheduleKind::kInverseSqrt;
  if (s == "constant") return ScheduleKind::kConstant;
  throw ConfigError("unknown schedule '" + s + "' (expected inverse_sqrt or constant)");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::kConstant ? "constant" : "inverse_sqrt"; }

inline double lr_schedule(std::size_t step, double peak_lr, std::size_t warmup,
                          ScheduleKind kind = ScheduleKind::kInverseSqrt) {
  if (kind == ScheduleKind::kConstant || warmup == 0) return peak_lr;
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  if (step <= warmup) return peak_lr * s / w;
  return peak_lr * std::sqrt(w / s);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double clip_norm = 1.0;  // 0 disables clipping
};

template <typename T>
struct OptimState {
  std::size_t step = 0;     // applied updates
  std::size_t skipped = 0;  // updates dropped for non-finite gradients
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static OptimState zeros_like(const std::vector<Tensor<T>>& params) {
    OptimState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), T(0));
      s.v.emplace_back(p.numel(), T(0));
    }
    return s;
  }
};

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// Global L2 norm over all gradients; absent gradients count as zero.
template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
StepReport adam_step(std::vector<Tensor<T>>& params, OptimState<T>& state, double lr, const AdamConfig& cfg = {}) {
  if (state.m.size() != params.size()) throw ShapeError("adam: optimizer state does not match the parameter list");
  StepReport report;
  report.lr = lr;
  report.grad_norm = global_grad_norm(params);
  if (!std::isfinite(report.grad_norm)) {
    ++state.skipped;
    return report;
  }
  const double clip = cfg.clip_norm > 0.0 && report.grad_norm > cfg.clip_norm ? cfg.clip_norm / report.grad_norm : 1.0;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(cfg.eps);
  const T c = static_cast<T>(clip);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].numel()) throw ShapeError("adam: moment size differs from parameter size");
    auto w = params[i].data();
    auto g = params[i].grad();
    const bool has_grad = !g.empty();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const T gk = has_grad ? g[k] * c : T(0);
      m[k] = b1 * m[k] + (T(1) - b1) * gk;
      v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
      w[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
    }
  }
  report.applied = true;
  return report;
}

}  // namespace ganlm
