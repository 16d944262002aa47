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

// Orthonormal 2-D discrete wavelet transform over [N, C, H, W] feature maps.
//
// Rows are filtered along the width axis first, then along the height axis.
// Band names give the filter along height first: lh is lowpass along height
// and highpass along width. Periodic extension keeps the transform
// orthogonal, so the synthesis pass is the exact adjoint of analysis.

#include <cmath>
#include <string>
#include <vector>

#include "dustlab/ops.hpp"

namespace dustlab {

struct WaveletBasis {
  std::string name;
  std::vector<double> lowpass;
  std::vector<double> highpass;

  /// Haar (db1) or db2.
  static WaveletBasis named(const std::string& name) {
    const double s = 1.0 / std::sqrt(2.0);
    std::vector<double> lo;
    if (name == "db1" || name == "haar") {
      lo = {s, s};
    } else if (name == "db2") {
      const double r3 = std::sqrt(3.0), d = 4.0 * std::sqrt(2.0);
      lo = {(1 + r3) / d, (3 + r3) / d, (3 - r3) / d, (1 - r3) / d};
    } else {
      throw ConfigError("unknown wavelet basis '" + name + "' (expected db1 or db2)");
    }
    // Quadrature mirror: hi[n] = (-1)^n lo[L-1-n].
    std::vector<double> hi(lo.size());
    for (std::size_t n = 0; n < lo.size(); ++n) hi[n] = (n % 2 ? -1.0 : 1.0) * lo[lo.size() - 1 - n];
    return {name == "haar" ? "db1" : name, std::move(lo), std::move(hi)};
  }
};

/// Four-band decomposition. height/width are the extents before any odd-size padding.
template <class T>
struct Subbands {
  Tensor<T> ll, lh, hl, hh;
  Index height = 0;
  Index width = 0;
};

enum class OddPolicy { kReject, kPadSymmetric };

namespace detail {

template <class T>
std::vector<T> cast_taps(const std::vector<double>& taps) {
  return std::vector<T>(taps.begin(), taps.end());
}

// low/high[o][k][i] = Σ_t taps[t] · x[o][(2k + t) mod n][i]
template <class T>
void analyze_axis(const T* x, Index outer, Index n, Index inner, const std::vector<T>& lo, const std::vector<T>& hi,
                  T* low, T* high) {
  const Index half = n / 2, taps = static_cast<Index>(lo.size());
  std::fill_n(low, outer * half * inner, T(0));
  std::fill_n(high, outer * half * inner, T(0));
  for (Index o = 0; o < outer; ++o)
    for (Index k = 0; k < half; ++k) {
      T* lrow = low + (o * half + k) * inner;
      T* hrow = high + (o * half + k) * inner;
      for (Index t = 0; t < taps; ++t) {
        const T* src = x + (o * n + (2 * k + t) % n) * inner;
        const T a = lo[static_cast<std::size_t>(t)], b = hi[static_cast<std::size_t>(t)];
        for (Index i = 0; i < inner; ++i) {
          lrow[i] += a * src[i];
          hrow[i] += b * src[i];
        }
      }
    }
}

// Transpose of analyze_axis; accumulates into x.
template <class T>
void synthesize_axis(const T* low, const T* high, Index outer, Index n, Index inner, const std::vector<T>& lo,
                     const std::vector<T>& hi, T* x) {
  const Index half = n / 2, taps = static_cast<Index>(lo.size());
  for (Index o = 0; o < outer; ++o)
    for (Index k = 0; k < half; ++k) {
      const T* lrow = low + (o * half + k) * inner;
      const T* hrow = high + (o * half + k) * inner;
      for (Index t = 0; t < taps; ++t) {
        T* dst = x + (o * n + (2 * k + t) % n) * inner;
        const T a = lo[static_cast<std::size_t>(t)], b = hi[static_cast<std::size_t>(t)];
        for (Index i = 0; i < inner; ++i) dst[i] += a * lrow[i] + b * hrow[i];
      }
    }
}

// x [N,C,H,W] (even H,W) -> packed [N,4C,H/2,W/2] in order ll, lh, hl, hh.
template <class T>
void dwt2_kernel(const T* x, Index n, Index c, Index h, Index w, const std::vector<T>& lo,
                 const std::vector<T>& hi, T* packed) {
  const Index planes = n * c, h2 = h / 2, w2 = w / 2, q = h2 * w2;
  std::vector<T> lw(static_cast<std::size_t>(planes * h * w2)), hw(lw.size());
  analyze_axis(x, planes * h, w, 1, lo, hi, lw.data(), hw.data());
  std::vector<T> ll(static_cast<std::size_t>(planes * q)), hl(ll.size()), lh(ll.size()), hh(ll.size());
  analyze_axis(lw.data(), planes, h, w2, lo, hi, ll.data(), hl.data());
  analyze_axis(hw.data(), planes, h, w2, lo, hi, lh.data(), hh.data());
  const T* bands[4] = {ll.data(), lh.data(), hl.data(), hh.data()};
  for (Index b = 0; b < n; ++b)
    for (Index band = 0; band < 4; ++band)
      for (Index ch = 0; ch < c; ++ch)
        std::copy_n(bands[band] + (b * c + ch) * q, q, packed + ((b * 4 + band) * c + ch) * q);
}

// Adjoint of dwt2_kernel; accumulates into x.
template <class T>
void idwt2_kernel(const T* packed, Index n, Index c, Index h, Index w, const std::vector<T>& lo,
                  const std::vector<T>& hi, T* x) {
  const Index planes = n * c, h2 = h / 2, w2 = w / 2, q = h2 * w2;
  std::vector<T> ll(static_cast<std::size_t>(planes * q)), lh(ll.size()), hl(ll.size()), hh(ll.size());
  T* bands[4] = {ll.data(), lh.data(), hl.data(), hh.data()};
  for (Index b = 0; b < n; ++b)
    for (Index band = 0; band < 4; ++band)
      for (Index ch = 0; ch < c; ++ch)
        std::copy_n(packed + ((b * 4 + band) * c + ch) * q, q, bands[band] + (b * c + ch) * q);
  std::vector<T> lw(static_cast<std::size_t>(planes * h * w2), T(0)), hw(lw.size(), T(0));
  synthesize_axis(ll.data(), hl.data(), planes, h, w2, lo, hi, lw.data());
  synthesize_axis(lh.data(), hh.data(), planes, h, w2, lo, hi, hw.data());
  synthesize_axis(lw.data(), hw.data(), planes * h, w, 1, lo, hi, x);
}

template <class T>
Tensor<T> dwt2_core(const Tensor<T>& x, const WaveletBasis& basis) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto lo = cast_taps<T>(basis.lowpass), hi = cast_taps<T>(basis.highpass);
  std::vector<T> packed(static_cast<std::size_t>(x.numel()));
  dwt2_kernel(x.data().data(), n, c, h, w, lo, hi, packed.data());
  return make_result<T>(Shape{n, 4 * c, h / 2, w / 2}, std::move(packed), {x}, "dwt2",
                        [=](TensorImpl<T>& self) {
                          auto gx = input_grad(self, 0);
                          if (!gx.empty()) idwt2_kernel(self.grad.data(), n, c, h, w, lo, hi, gx.data());
                        });
}

template <class T>
Tensor<T> idwt2_core(const Tensor<T>& packed, const WaveletBasis& basis) {
  const Index n = packed.dim(0), c = packed.dim(1) / 4, h = packed.dim(2) * 2, w = packed.dim(3) * 2;
  auto lo = cast_taps<T>(basis.lowpass), hi = cast_taps<T>(basis.highpass);
  std::vector<T> x(static_cast<std::size_t>(packed.numel()), T(0));
  idwt2_kernel(packed.data().data(), n, c, h, w, lo, hi, x.data());
  return make_result<T>(Shape{n, c, h, w}, std::move(x), {packed}, "idwt2", [=](TensorImpl<T>& self) {
    auto gp = input_grad(self, 0);
    if (gp.empty()) return;
    std::vector<T> tmp(gp.size());
    dwt2_kernel(self.grad.data(), n, c, h, w, lo, hi, tmp.data());
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += tmp[i];
  });
}

template <class T>
void check_feature_map(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + ": expected [N,C,H,W], got " + to_string(x.shape()));
}

}  // namespace detail

/// Packed analysis: [N,C,H,W] -> [N,4C,ceil(H/2),ceil(W/2)]. Odd extents are
/// padded by one symmetric row/column first.
template <class T>
Tensor<T> dwt2_packed(const Tensor<T>& x, const WaveletBasis& basis, OddPolicy policy = OddPolicy::kPadSymmetric) {
  detail::check_feature_map(x, "dwt2");
  const Index h = x.dim(2), w = x.dim(3);
  if ((h % 2 || w % 2) && policy == OddPolicy::kReject) {
    throw GeometryError("dwt2: odd extent " + std::to_string(h) + "x" + std::to_string(w) +
                        " with padding disabled");
  }
  Tensor<T> xp = x;
  if (h % 2) xp = pad(xp, 2, 0, 1, PadMode::kSymmetric);
  if (w % 2) xp = pad(xp, 3, 0, 1, PadMode::kSymmetric);
  return detail::dwt2_core(xp, basis);
}

/// Packed synthesis; crops to height × width when given (undoes odd padding).
template <class T>
Tensor<T> idwt2_packed(const Tensor<T>& packed, const WaveletBasis& basis, Index height = -1, Index width = -1) {
  detail::check_feature_map(packed, "idwt2");
  if (packed.dim(1) % 4) {
    throw DimensionError("idwt2: channel count " + std::to_string(packed.dim(1)) + " not divisible by 4");
  }
  Tensor<T> x = detail::idwt2_core(packed, basis);
  if (height >= 0 && height != x.dim(2)) x = slice(x, 2, 0, height);
  if (width >= 0 && width != x.dim(3)) x = slice(x, 3, 0, width);
  return x;
}

template <class T>
Tensor<T> pack_bands(const Subbands<T>& bands) {
  for (const auto* b : {&bands.lh, &bands.hl, &bands.hh}) {
    if (b->shape() != bands.ll.shape()) {
      throw DimensionError("subband shape mismatch: " + to_string(b->shape()) + " vs " + to_string(bands.ll.shape()));
    }
  }
  return concat<T>({bands.ll, bands.lh, bands.hl, bands.hh}, 1);
}

/// Inverse of pack_bands. height/width record the pre-padding extents (defaults: 2× band extents).
template <class T>
Subbands<T> unpack_bands(const Tensor<T>& packed, Index height = -1, Index width = -1) {
  detail::check_feature_map(packed, "unpack_bands");
  const Index c4 = packed.dim(1);
  if (c4 % 4) throw DimensionError("unpack_bands: channel count " + std::to_string(c4) + " not divisible by 4");
  auto parts = split(packed, 1, {c4 / 4, c4 / 4, c4 / 4, c4 / 4});
  return {parts[0], parts[1], parts[2], parts[3], height >= 0 ? height : 2 * packed.dim(2),
          width >= 0 ? width : 2 * packed.dim(3)};
}

template <class T>
Subbands<T> dwt2(const Tensor<T>& x, const WaveletBasis& basis, OddPolicy policy = OddPolicy::kPadSymmetric) {
  auto packed = dwt2_packed(x, basis, policy);
  return unpack_bands(packed, x.dim(2), x.dim(3));
}

template <class T>
Tensor<T> idwt2(const Subbands<T>& bands, const WaveletBasis& basis) {
  return idwt2_packed(pack_bands(bands), basis, bands.height, bands.width);
}

}  // namespace dustlab
