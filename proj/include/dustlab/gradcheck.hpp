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

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dustlab/rng.hpp"
#include "dustlab/tensor.hpp"

namespace dustlab {

struct GradcheckOptions {
  double step = 1e-5;
  // Denominator floor for the relative error, so near-zero gradients compare absolutely.
  double floor = 1e-6;
  // When positive, check only this many seeded-random scalars per input.
  Index max_checks_per_input = 0;
  std::uint64_t seed = 0;
  // Fourth-order stencil [f(-2h) - 8f(-h) + 8f(h) - f(2h)] / 12h instead of [f(h) - f(-h)] / 2h;
  // allows a wider step on smooth closures where roundoff dominates.
  bool fourth_order = false;
};

struct GradcheckReport {
  std::vector<double> max_rel_error;  // per input
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Central finite differences against the reverse-mode gradient of a scalar closure.
/// Inputs are perturbed in place (and restored); they may be parameters captured
/// by the closure.
inline GradcheckReport gradcheck(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& closure,
                                 std::vector<Tensor<double>> inputs, double tolerance,
                                 const GradcheckOptions& options = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<double> out = closure(inputs);
  if (out.numel() != 1) throw ContractError("gradcheck: closure must return a scalar, got " + to_string(out.shape()));
  out.backward();

  GradcheckReport report;
  report.tolerance = tolerance;
  Rng rng(options.seed);
  for (auto& in : inputs) {
    const std::vector<double> analytic = in.has_grad() ? std::vector<double>(in.grad().begin(), in.grad().end())
                                                       : std::vector<double>(static_cast<std::size_t>(in.numel()), 0.0);
    std::vector<Index> picks;
    if (options.max_checks_per_input > 0 && in.numel() > options.max_checks_per_input) {
      for (Index k = 0; k < options.max_checks_per_input; ++k)
        picks.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(in.numel()))));
    } else {
      for (Index k = 0; k < in.numel(); ++k) picks.push_back(k);
    }
    double worst = 0.0;
    auto data = in.mutable_data();
    for (Index k : picks) {
      const auto j = static_cast<std::size_t>(k);
      const double saved = data[j];
      const double h = options.step;
      double f[4] = {0, 0, 0, 0};
      {
        NoGradGuard guard;
        const double offsets[4] = {-2 * h, -h, h, 2 * h};
        for (int o = options.fourth_order ? 0 : 1; o < (options.fourth_order ? 4 : 3); ++o) {
          data[j] = saved + offsets[o];
          f[o] = closure(inputs).item();
        }
      }
      data[j] = saved;
      const double numeric = options.fourth_order ? (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * h)
                                                  : (f[2] - f[1]) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric), options.floor});
      worst = std::max(worst, std::abs(analytic[j] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.max_error = std::max(report.max_error, worst);
  }
  report.passed = report.max_error < tolerance;
  return report;
}

}  // namespace dustlab
