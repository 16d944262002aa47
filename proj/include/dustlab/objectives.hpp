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
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dustlab/config.hpp"
#include "dustlab/log.hpp"
#include "dustlab/ops.hpp"
#include "dustlab/rng.hpp"

namespace dustlab {

// ---------------------------------------------------------------------------
// Structural similarity

namespace ssim_const {
inline constexpr int kWindow = 11;
inline constexpr double kSigma = 1.5;
inline constexpr double kK1 = 0.01;
inline constexpr double kK2 = 0.03;
inline constexpr std::array<double, 5> kScaleWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
}  // namespace ssim_const

/// Normalized 11-tap Gaussian (sigma 1.5).
inline std::vector<double> gaussian_window() {
  std::vector<double> g(ssim_const::kWindow);
  double total = 0;
  for (int i = 0; i < ssim_const::kWindow; ++i) {
    const double d = i - ssim_const::kWindow / 2;
    total += g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * ssim_const::kSigma * ssim_const::kSigma));
  }
  for (auto& v : g) v /= total;
  return g;
}

/// Number of dyadic scales usable for an H×W image: the largest s ≤ requested
/// with min(H, W) ≥ 11·2^(s−1).
inline int ms_ssim_scale_count(Index height, Index width, int requested) {
  const Index side = std::min(height, width);
  if (side < ssim_const::kWindow) {
    throw GeometryError("ms_ssim: " + std::to_string(height) + "x" + std::to_string(width) +
                        " is smaller than the 11-pixel window");
  }
  if (requested < 1 || requested > 5) throw ConfigError("ms_ssim: scales must be in [1, 5]");
  int s = requested;
  while (s > 1 && side < (Index{ssim_const::kWindow} << (s - 1))) --s;
  return s;
}

/// Exponents for the first `scales` levels, renormalized to sum to 1.
inline std::vector<double> ms_ssim_weights(int scales) {
  std::vector<double> w(ssim_const::kScaleWeights.begin(), ssim_const::kScaleWeights.begin() + scales);
  double total = 0;
  for (double v : w) total += v;
  for (auto& v : w) v /= total;
  return w;
}

namespace detail {

template <class T>
Tensor<T> gaussian_blur_valid(const Tensor<T>& x) {
  const auto g = gaussian_window();
  std::vector<T> k(g.begin(), g.end());
  return filter_valid(filter_valid(x, 2, k), 3, k);
}

/// Contrast-structure and luminance maps of one scale, [N,C,h',w'] each.
template <class T>
std::pair<Tensor<T>, Tensor<T>> ssim_maps(const Tensor<T>& x, const Tensor<T>& y, double max_val) {
  const T c1 = static_cast<T>(std::pow(ssim_const::kK1 * max_val, 2));
  const T c2 = static_cast<T>(std::pow(ssim_const::kK2 * max_val, 2));
  Tensor<T> mx = gaussian_blur_valid(x), my = gaussian_blur_valid(y);
  Tensor<T> mxx = square(mx), myy = square(my), mxy = mul(mx, my);
  Tensor<T> sxx = sub(gaussian_blur_valid(square(x)), mxx);
  Tensor<T> syy = sub(gaussian_blur_valid(square(y)), myy);
  Tensor<T> sxy = sub(gaussian_blur_valid(mul(x, y)), mxy);
  Tensor<T> cs = div(add_scalar(scale(sxy, T(2)), c2), add_scalar(add(sxx, syy), c2));
  Tensor<T> lum = div(add_scalar(scale(mxy, T(2)), c1), add_scalar(add(mxx, myy), c1));
  return {cs, lum};
}

template <class T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

inline void warn_reduced_scales(Index h, Index w, int requested, int used) {
  static std::mutex m;
  static std::set<std::array<Index, 4>> seen;
  {
    std::lock_guard lock(m);
    if (!seen.insert({h, w, requested, used}).second) return;
  }
  warn("ms_ssim: " + std::to_string(h) + "x" + std::to_string(w) + " supports " + std::to_string(used) + " of " +
       std::to_string(requested) + " scales; using renormalized weights for the first " + std::to_string(used));
}

}  // namespace detail

/// Multi-scale SSIM of [N,C,H,W] images in [0, max_val]; computed per (n, c) plane and
/// averaged. Contrast-structure terms at every scale, full SSIM at the coarsest.
template <class T>
Tensor<T> ms_ssim(const Tensor<T>& pred, const Tensor<T>& target, int scales = 5, double max_val = 1.0) {
  detail::check_pair(pred, target, "ms_ssim");
  if (pred.rank() != 4) throw DimensionError("ms_ssim: expected [N,C,H,W], got " + to_string(pred.shape()));
  const int used = ms_ssim_scale_count(pred.dim(2), pred.dim(3), scales);
  if (used < scales) detail::warn_reduced_scales(pred.dim(2), pred.dim(3), scales, used);
  const auto weights = ms_ssim_weights(used);
  const T floor = T(1e-6), ceil = std::numeric_limits<T>::max();
  Tensor<T> x = pred, y = target, result;
  for (int s = 0; s < used; ++s) {
    auto [cs, lum] = detail::ssim_maps(x, y, max_val);
    Tensor<T> term = s + 1 < used ? cs : mul(cs, lum);
    term = clamp(mean_trailing(term, 2), floor, ceil);
    term = pow(term, static_cast<T>(weights[static_cast<std::size_t>(s)]));
    result = result.defined() ? mul(result, term) : term;
    if (s + 1 < used) {
      x = avg_pool2(x);
      y = avg_pool2(y);
    }
  }
  return mean(result);
}

/// Single-scale SSIM (11-tap Gaussian, k1 0.01, k2 0.03), channel-averaged.
template <class T>
double ssim(const Tensor<T>& pred, const Tensor<T>& target, double max_val = 1.0) {
  detail::check_pair(pred, target, "ssim");
  NoGradGuard no_grad;
  Tensor<double> x(pred.shape(), std::vector<double>(pred.data().begin(), pred.data().end()));
  Tensor<double> y(target.shape(), std::vector<double>(target.data().begin(), target.data().end()));
  if (x.rank() == 3) {
    x = reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
    y = reshape(y, x.shape());
  }
  ms_ssim_scale_count(x.dim(2), x.dim(3), 1);
  auto [cs, lum] = detail::ssim_maps(x, y, max_val);
  return mean(mul(cs, lum)).item();
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_pair(pred, target, "l1_loss");
  return mean(abs(sub(pred, target)));
}

// ---------------------------------------------------------------------------
// Perceptual features

/// Frozen three-stage conv feature extractor (3→16→32→64, 3×3, stride 2, ReLU).
/// Weights are seeded Kaiming-uniform draws, or read from a raw blob: the
/// little-endian float32 concatenation of conv1.weight [16,3,3,3], conv1.bias [16],
/// conv2.weight [32,16,3,3], conv2.bias [32], conv3.weight [64,32,3,3], conv3.bias [64].
template <class T>
class PerceptualExtractor {
 public:
  static constexpr std::array<Index, 4> kChannels{3, 16, 32, 64};

  explicit PerceptualExtractor(std::uint64_t seed, std::array<double, 3> stage_weights = {1.0, 1.0, 1.0})
      : stage_weights_(stage_weights) {
    Rng rng(mix_seed(seed, 0x70657263ULL));
    for (std::size_t s = 0; s < 3; ++s) {
      Tensor<T> w({kChannels[s + 1], kChannels[s], 3, 3});
      const double bound = std::sqrt(6.0 / static_cast<double>(kChannels[s] * 9));
      for (auto& v : w.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
      weights_.push_back(w);
      biases_.push_back(Tensor<T>::zeros({kChannels[s + 1]}));
    }
  }

  static PerceptualExtractor from_blob(const std::string& path, std::array<double, 3> stage_weights = {1, 1, 1}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open perceptual weights '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    PerceptualExtractor ex(0, stage_weights);
    std::size_t expected = 0;
    for (std::size_t s = 0; s < 3; ++s) expected += static_cast<std::size_t>(ex.weights_[s].numel() + ex.biases_[s].numel());
    if (bytes.size() != expected * 4) {
      throw IoError("perceptual weights '" + path + "': expected " + std::to_string(expected * 4) + " bytes, got " +
                    std::to_string(bytes.size()));
    }
    std::size_t off = 0;
    auto fill = [&](Tensor<T>& t) {
      for (auto& v : t.mutable_data()) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(bytes[off++])) << (8 * b);
        float f;
        std::memcpy(&f, &bits, 4);
        v = static_cast<T>(f);
      }
    };
    for (std::size_t s = 0; s < 3; ++s) {
      fill(ex.weights_[s]);
      fill(ex.biases_[s]);
    }
    return ex;
  }

  std::vector<Tensor<T>> features(const Tensor<T>& x) const {
    std::vector<Tensor<T>> out;
    Tensor<T> h = x;
    for (std::size_t s = 0; s < 3; ++s) {
      h = relu(conv2d(h, weights_[s], biases_[s], 2, 1, 1));
      out.push_back(h);
    }
    return out;
  }

  const std::array<double, 3>& stage_weights() const { return stage_weights_; }
  const std::vector<Tensor<T>>& weights() const { return weights_; }
  const std::vector<Tensor<T>>& biases() const { return biases_; }

  /// FNV-1a over all parameter bytes; unchanged for the lifetime of a frozen extractor.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto eat = [&](const Tensor<T>& t) {
      const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(t.numel()) * sizeof(T); ++i) h = (h ^ p[i]) * 1099511628211ULL;
    };
    for (std::size_t s = 0; s < 3; ++s) {
      eat(weights_[s]);
      eat(biases_[s]);
    }
    return h;
  }

 private:
  std::array<double, 3> stage_weights_;
  std::vector<Tensor<T>> weights_, biases_;
};

template <class T>
Tensor<T> perceptual_loss(const Tensor<T>& pred, const Tensor<T>& target, const PerceptualExtractor<T>& extractor) {
  detail::check_pair(pred, target, "perceptual_loss");
  std::vector<Tensor<T>> ft;
  {
    NoGradGuard no_grad;
    ft = extractor.features(target);
  }
  auto fp = extractor.features(pred);
  Tensor<T> total;
  for (std::size_t s = 0; s < fp.size(); ++s) {
    Tensor<T> term = scale(mean(square(sub(fp[s], ft[s]))), static_cast<T>(extractor.stage_weights()[s]));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Composite objective

template <class T>
struct LossTerms {
  Tensor<T> total;
  double l1 = 0;
  double ms_ssim = 0;  // similarity, not the loss 1 − ms_ssim
  double perceptual = 0;
};

/// λ1·L1 + λ2·(1 − MS-SSIM) + λ3·L_perc. Terms with zero weight are evaluated
/// without gradient for reporting only.
template <class T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossWeights& w,
                        const PerceptualExtractor<T>& extractor, int ms_ssim_scales = 5) {
  w.validate();
  LossTerms<T> out;
  auto accumulate = [&](const Tensor<T>& term, double weight) {
    Tensor<T> t = scale(term, static_cast<T>(weight));
    out.total = out.total.defined() ? add(out.total, t) : t;
  };
  auto eval = [&](double weight, auto&& fn) {
    if (weight > 0) return fn();
    NoGradGuard no_grad;
    return fn();
  };
  Tensor<T> l1 = eval(w.l1, [&] { return l1_loss(pred, target); });
  Tensor<T> ms = eval(w.ms_ssim, [&] { return ms_ssim(pred, target, ms_ssim_scales); });
  Tensor<T> perc = eval(w.perceptual, [&] { return perceptual_loss(pred, target, extractor); });
  if (w.l1 > 0) accumulate(l1, w.l1);
  if (w.ms_ssim > 0) accumulate(add_scalar(scale(ms, T(-1)), T(1)), w.ms_ssim);
  if (w.perceptual > 0) accumulate(perc, w.perceptual);
  out.l1 = static_cast<double>(l1.item());
  out.ms_ssim = static_cast<double>(ms.item());
  out.perceptual = static_cast<double>(perc.item());
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation metrics

/// 10·log10(max²/MSE); +infinity when the images are identical.
template <class T>
double psnr(const Tensor<T>& pred, const Tensor<T>& target, double max_val = 1.0) {
  detail::check_pair(pred, target, "psnr");
  double se = 0;
  auto a = pred.data(), b = target.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / mse);
}

/// Shannon entropy (bits) of the 8-bit luma histogram of an RGB image [3,H,W] or [1,3,H,W] in [0,1].
template <class T>
double entropy(const Tensor<T>& img) {
  const Shape& s = img.shape();
  const bool batched = s.size() == 4;
  if (!((s.size() == 3 && s[0] == 3) || (batched && s[0] == 1 && s[1] == 3))) {
    throw DimensionError("entropy: expected an RGB image [3,H,W], got " + to_string(s));
  }
  const Index plane = s[s.size() - 1] * s[s.size() - 2];
  std::array<std::int64_t, 256> hist{};
  auto v = img.data();
  for (Index i = 0; i < plane; ++i) {
    const double y = 0.299 * v[static_cast<std::size_t>(i)] + 0.587 * v[static_cast<std::size_t>(plane + i)] +
                     0.114 * v[static_cast<std::size_t>(2 * plane + i)];
    const auto q = std::lround(std::clamp(y, 0.0, 1.0) * 255.0);
    ++hist[static_cast<std::size_t>(q)];
  }
  double h = 0;
  for (auto c : hist) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(plane);
    h -= p * std::log2(p);
  }
  return h;
}

struct MetricRow {
  std::string file;
  double psnr_db = 0;
  double ssim = 0;
  double entropy_bits = 0;
};

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(6);
  os << v;
  return os.str();
}

/// key=value report: header lines, one `image` line per row, then means.
inline std::string metrics_report_kv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "ssim_channels=rgb_mean\nentropy_source=luma8\ncount=" << rows.size() << "\n";
  double p = 0, s = 0, e = 0;
  for (const auto& r : rows) {
    os << "image file=" << r.file << " psnr_db=" << format_metric(r.psnr_db) << " ssim=" << format_metric(r.ssim)
       << " entropy_bits=" << format_metric(r.entropy_bits) << "\n";
    p += r.psnr_db;
    s += r.ssim;
    e += r.entropy_bits;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  os << "mean_psnr_db=" << format_metric(p / n) << "\nmean_ssim=" << format_metric(s / n)
     << "\nmean_entropy_bits=" << format_metric(e / n) << "\n";
  return os.str();
}

/// Tab-separated table with columns file, psnr_db, ssim, entropy_bits.
inline std::string metrics_report_table(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "file\tpsnr_db\tssim\tentropy_bits\n";
  for (const auto& r : rows) {
    os << r.file << "\t" << format_metric(r.psnr_db) << "\t" << format_metric(r.ssim) << "\t"
       << format_metric(r.entropy_bits) << "\n";
  }
  return os.str();
}

}  // namespace dustlab
