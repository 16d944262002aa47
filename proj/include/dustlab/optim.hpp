// Copyright 2026 The dustlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dustlab/config.hpp"
#include "dustlab/errors.hpp"
#include "dustlab/network.hpp"

namespace dustlab {

/// First and second Adam moments keyed by parameter name, plus the step counter.
template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;

  bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam update of a flat buffer at 1-based step `t`.
/// Gradients are multiplied by `grad_scale` first (used for clipping).
template <class T>
void adam_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v, const TrainConfig& cfg,
                 std::uint64_t t, double grad_scale = 1.0) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size())
    throw DimensionError("adam_update: buffer sizes differ");
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]) * grad_scale;
    const double mi = b1 * static_cast<double>(m[i]) + (1 - b1) * gi;
    const double vi = b2 * static_cast<double>(v[i]) + (1 - b2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
  }
}

/// L2 norm over every accumulated parameter gradient.
template <class T>
double global_grad_norm(const ParamStore<T>& params) {
  double sq = 0;
  for (const auto& p : params.all())
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Throws NumericError naming the first parameter with a non-finite gradient.
template <class T>
void check_finite_grads(const ParamStore<T>& params) {
  for (const auto& p : params.all())
    for (T g : p.tensor.grad())
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
}

/// Applies one Adam step to every parameter. Gradients are validated before any
/// parameter is touched. Parameters without an accumulated gradient see g = 0.
/// Returns the pre-clipping global gradient norm.
template <class T>
double adam_step(ParamStore<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
  check_finite_grads(params);
  const double norm = global_grad_norm(params);
  const double scale = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;
  ++state.step;
  for (const auto& p : params.all()) {
    const auto n = static_cast<std::size_t>(p.tensor.numel());
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    m.resize(n, T(0));
    v.resize(n, T(0));
    Tensor<T> w = p.tensor;
    std::vector<T> zeros;
    std::span<const T> g = w.grad();
    if (g.empty()) {
      zeros.assign(n, T(0));
      g = zeros;
    }
    adam_update<T>(w.mutable_data(), g, m, v, cfg, state.step, scale);
  }
  return norm;
}

}  // namespace dustlab
