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

// Shifted-window multi-head attention, cross-attention gating and the
// convolutional spatial aggregation branch that runs beside window attention.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dustlab/ops.hpp"

namespace dustlab {

/// Tiling of an H×W map into window×window tiles after bottom/right zero padding.
struct WindowGrid {
  Index window = 4;
  Index shift = 0;
  Index height = 0;
  Index width = 0;
  Index pad_bottom = 0;
  Index pad_right = 0;

  static WindowGrid make(Index height, Index width, Index window, Index shift) {
    if (window < 1) throw GeometryError("window size must be positive");
    if (shift != 0 && shift != window / 2) {
      throw GeometryError("window shift must be 0 or " + std::to_string(window / 2) + ", got " +
                          std::to_string(shift));
    }
    WindowGrid g{window, shift, height, width, 0, 0};
    g.pad_bottom = (window - height % window) % window;
    g.pad_right = (window - width % window) % window;
    return g;
  }

  Index padded_height() const { return height + pad_bottom; }
  Index padded_width() const { return width + pad_right; }
  Index windows_per_image() const { return (padded_height() / window) * (padded_width() / window); }
  Index tokens() const { return window * window; }
};

struct AttentionHeads {
  Index num_heads = 1;
  Index head_dim = 1;

  static AttentionHeads for_channels(Index channels, Index num_heads) {
    if (num_heads < 1 || channels % num_heads) {
      throw ConfigError("channels " + std::to_string(channels) + " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
    return {num_heads, channels / num_heads};
  }

  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }
  Index channels() const { return num_heads * head_dim; }
};

enum class WindowLayout {
  kImage,   // [N·nW, C, w, w]
  kTokens,  // [N·nW, w·w, C]
};

namespace detail {

inline void check_grid(const Shape& s, const WindowGrid& g) {
  if (s.size() != 4) throw DimensionError("window ops expect [N,C,H,W], got " + to_string(s));
  if (s[2] != g.height || s[3] != g.width) {
    throw GeometryError("window grid built for " + std::to_string(g.height) + "x" + std::to_string(g.width) +
                        " but map is " + std::to_string(s[2]) + "x" + std::to_string(s[3]));
  }
  if (g.padded_height() % g.window || g.padded_width() % g.window) {
    throw GeometryError("window grid padding does not reach a multiple of the window size");
  }
}

}  // namespace detail

/// Zero-pads, cyclically shifts by -shift, and tiles x [N,C,H,W] into windows.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, const WindowGrid& g, WindowLayout layout = WindowLayout::kImage) {
  detail::check_grid(x.shape(), g);
  const Index n = x.dim(0), c = x.dim(1), w = g.window;
  Tensor<T> t = pad(x, 2, 0, g.pad_bottom, PadMode::kZero);
  t = pad(t, 3, 0, g.pad_right, PadMode::kZero);
  if (g.shift) {
    t = roll(t, 2, -g.shift);
    t = roll(t, 3, -g.shift);
  }
  const Index gh = g.padded_height() / w, gw = g.padded_width() / w;
  t = reshape(t, {n, c, gh, w, gw, w});
  if (layout == WindowLayout::kImage) {
    t = permute(t, {0, 2, 4, 1, 3, 5});
    return reshape(t, {n * gh * gw, c, w, w});
  }
  t = permute(t, {0, 2, 4, 3, 5, 1});
  return reshape(t, {n * gh * gw, w * w, c});
}

/// Exact inverse of window_partition: untile, unshift, crop padding.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, const WindowGrid& g, WindowLayout layout = WindowLayout::kImage) {
  const Index w = g.window, gh = g.padded_height() / w, gw = g.padded_width() / w;
  const Index nw = gh * gw;
  if (windows.dim(0) % nw) throw GeometryError("window_reverse: batch not a multiple of windows per image");
  const Index n = windows.dim(0) / nw;
  Tensor<T> t;
  if (layout == WindowLayout::kImage) {
    if (windows.rank() != 4 || windows.dim(2) != w || windows.dim(3) != w)
      throw GeometryError("window_reverse: windows are not " + std::to_string(w) + "x" + std::to_string(w));
    const Index c = windows.dim(1);
    t = reshape(windows, {n, gh, gw, c, w, w});
    t = permute(t, {0, 3, 1, 4, 2, 5});
    t = reshape(t, {n, c, gh * w, gw * w});
  } else {
    if (windows.rank() != 3 || windows.dim(1) != w * w)
      throw GeometryError("window_reverse: token count is not " + std::to_string(w * w));
    const Index c = windows.dim(2);
    t = reshape(windows, {n, gh, gw, w, w, c});
    t = permute(t, {0, 5, 1, 3, 2, 4});
    t = reshape(t, {n, c, gh * w, gw * w});
  }
  if (g.shift) {
    t = roll(t, 2, g.shift);
    t = roll(t, 3, g.shift);
  }
  if (g.pad_bottom) t = slice(t, 2, 0, g.height);
  if (g.pad_right) t = slice(t, 3, 0, g.width);
  return t;
}

/// Additive mask [nW, L, L] separating tokens that came from different sides of
/// the cyclic-shift seam; 0 within a region, -1e9 across regions.
template <class T>
Tensor<T> shifted_window_mask(const WindowGrid& g) {
  const Index hp = g.padded_height(), wp = g.padded_width(), w = g.window, s = g.shift;
  std::vector<Index> region(static_cast<std::size_t>(hp * wp));
  auto band = [&](Index i, Index extent) { return i < extent - w ? 0 : (i < extent - s ? 1 : 2); };
  for (Index y = 0; y < hp; ++y)
    for (Index x = 0; x < wp; ++x) region[static_cast<std::size_t>(y * wp + x)] = band(y, hp) * 3 + band(x, wp);
  const Index gh = hp / w, gw = wp / w, l = w * w;
  std::vector<T> mask(static_cast<std::size_t>(gh * gw * l * l), T(0));
  for (Index wy = 0; wy < gh; ++wy)
    for (Index wx = 0; wx < gw; ++wx) {
      const Index win = wy * gw + wx;
      for (Index i = 0; i < l; ++i)
        for (Index j = 0; j < l; ++j) {
          const Index ri = region[static_cast<std::size_t>((wy * w + i / w) * wp + wx * w + i % w)];
          const Index rj = region[static_cast<std::size_t>((wy * w + j / w) * wp + wx * w + j % w)];
          if (ri != rj) mask[static_cast<std::size_t>((win * l + i) * l + j)] = T(-1e9);
        }
    }
  return Tensor<T>(Shape{gh * gw, l, l}, std::move(mask));
}

/// Relative-position lookup: for tokens i, j of a window×window tile, the row of a
/// [(2w-1)², heads] bias table.
inline std::vector<Index> relative_position_index(Index window) {
  const Index l = window * window, span = 2 * window - 1;
  std::vector<Index> idx(static_cast<std::size_t>(l * l));
  for (Index i = 0; i < l; ++i)
    for (Index j = 0; j < l; ++j) {
      const Index dy = i / window - j / window + window - 1;
      const Index dx = i % window - j % window + window - 1;
      idx[static_cast<std::size_t>(i * l + j)] = dy * span + dx;
    }
  return idx;
}

template <class T>
struct SelfAttentionParams {
  Tensor<T> qkv_weight, qkv_bias;    // [3C, C], [3C]
  Tensor<T> proj_weight, proj_bias;  // [C, C], [C]
  Tensor<T> rel_bias_table;          // [(2w-1)², heads]; undefined disables the bias
};

template <class T>
struct CrossAttentionParams {
  Tensor<T> q_weight, q_bias;    // [C, C], [C]
  Tensor<T> kv_weight, kv_bias;  // [2C, C], [2C]
  Tensor<T> proj_weight, proj_bias;
};

/// Softmax weights captured for inspection.
template <class T>
struct AttentionTrace {
  Tensor<T> weights;  // [B, heads, L, L]
};

/// Scaled dot-product attention of q, k, v [B, L, C] split into heads.
/// rel_bias: [1, heads, L, L]; mask: [nW, L, L] applied to batch entry b via b mod nW.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionHeads& heads,
                 const Tensor<T>& rel_bias = {}, const Tensor<T>& mask = {}, AttentionTrace<T>* trace = nullptr) {
  const Index b = q.dim(0), l = q.dim(1), c = q.dim(2);
  if (c != heads.channels()) {
    throw ConfigError("attention: channel count " + std::to_string(c) + " != heads·head_dim " +
                      std::to_string(heads.channels()));
  }
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw DimensionError("attention: q/k/v shape mismatch");
  const Index h = heads.num_heads, d = heads.head_dim;
  auto split_heads = [&](const Tensor<T>& t) { return permute(reshape(t, {b, l, h, d}), {0, 2, 1, 3}); };
  Tensor<T> scores = scale(matmul(split_heads(q), split_heads(k), false, true), static_cast<T>(heads.scale()));
  if (rel_bias.defined()) scores = add(scores, rel_bias);
  if (mask.defined()) {
    const Index nw = mask.dim(0);
    if (b % nw || mask.dim(1) != l || mask.dim(2) != l) throw DimensionError("attention: mask shape mismatch");
    scores = reshape(scores, {b / nw, nw, h, l, l});
    scores = add(scores, reshape(mask, {1, nw, 1, l, l}));
    scores = reshape(scores, {b, h, l, l});
  }
  Tensor<T> weights = softmax(scores, -1);
  if (trace) trace->weights = weights;
  Tensor<T> out = matmul(weights, split_heads(v));
  return reshape(permute(out, {0, 2, 1, 3}), {b, l, c});
}

template <class T>
Tensor<T> relative_bias(const Tensor<T>& table, Index window, Index num_heads) {
  if (table.dim(0) != (2 * window - 1) * (2 * window - 1) || table.dim(1) != num_heads) {
    throw DimensionError("relative bias table must be [(2w-1)^2, heads], got " + to_string(table.shape()));
  }
  const Index l = window * window;
  Tensor<T> rows = gather_rows(table, relative_position_index(window));  // [L·L, heads]
  return reshape(permute(rows, {1, 0}), {1, num_heads, l, l});
}

/// Multi-head self-attention over window tokens x [B, L, C].
template <class T>
Tensor<T> mhsa(const Tensor<T>& x, const AttentionHeads& heads, const SelfAttentionParams<T>& p,
               const Tensor<T>& mask = {}, AttentionTrace<T>* trace = nullptr) {
  if (x.rank() != 3) throw DimensionError("mhsa: expected [B, L, C], got " + to_string(x.shape()));
  const Index l = x.dim(1), c = x.dim(2);
  if (c % heads.num_heads) {
    throw ConfigError("mhsa: channels " + std::to_string(c) + " not divisible by heads " +
                      std::to_string(heads.num_heads));
  }
  Tensor<T> qkv = linear(x, p.qkv_weight, p.qkv_bias);
  auto parts = split(qkv, 2, {c, c, c});
  Tensor<T> bias;
  if (p.rel_bias_table.defined()) {
    const auto w = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(l))));
    if (w * w != l) throw GeometryError("mhsa: relative bias needs a square window, L = " + std::to_string(l));
    bias = relative_bias(p.rel_bias_table, w, heads.num_heads);
  }
  Tensor<T> out = attend(parts[0], parts[1], parts[2], heads, bias, mask, trace);
  return linear(out, p.proj_weight, p.proj_bias);
}

/// Window self-attention on a feature map [N,C,H,W].
template <class T>
Tensor<T> window_mhsa(const Tensor<T>& x, const WindowGrid& grid, const AttentionHeads& heads,
                      const SelfAttentionParams<T>& p) {
  Tensor<T> tokens = window_partition(x, grid, WindowLayout::kTokens);
  Tensor<T> mask;
  if (grid.shift) mask = shifted_window_mask<T>(grid);
  return window_reverse(mhsa(tokens, heads, p, mask), grid, WindowLayout::kTokens);
}

/// Cross-attention gate: queries from query_feat, keys/values from keyval_feat,
/// windowed without shift; the projected output passes through a sigmoid.
template <class T>
Tensor<T> mhca(const Tensor<T>& query_feat, const Tensor<T>& keyval_feat, const AttentionHeads& heads,
               const CrossAttentionParams<T>& p, Index window, AttentionTrace<T>* trace = nullptr) {
  if (query_feat.shape() != keyval_feat.shape()) {
    throw DimensionError("mhca: query " + to_string(query_feat.shape()) + " vs key/value " +
                         to_string(keyval_feat.shape()));
  }
  const Index c = query_feat.dim(1);
  const auto grid = WindowGrid::make(query_feat.dim(2), query_feat.dim(3), window, 0);
  Tensor<T> qt = window_partition(query_feat, grid, WindowLayout::kTokens);
  Tensor<T> kvt = window_partition(keyval_feat, grid, WindowLayout::kTokens);
  Tensor<T> q = linear(qt, p.q_weight, p.q_bias);
  auto kv = split(linear(kvt, p.kv_weight, p.kv_bias), 2, {c, c});
  Tensor<T> out = linear(attend(q, kv[0], kv[1], heads, {}, {}, trace), p.proj_weight, p.proj_bias);
  return sigmoid(window_reverse(out, grid, WindowLayout::kTokens));
}

template <class T>
struct SfasParams {
  Tensor<T> conv1_weight, conv1_bias;  // [C, C, 3, 3]
  Tensor<T> conv2_weight, conv2_bias;
};

/// Channel-preserving 3×3 conv → ReLU → 3×3 conv.
template <class T>
Tensor<T> sfas_branch(const Tensor<T>& x, const SfasParams<T>& p) {
  Tensor<T> h = relu(conv2d(x, p.conv1_weight, p.conv1_bias, 1, 1, 1));
  return conv2d(h, p.conv2_weight, p.conv2_bias, 1, 1, 1);
}

/// 1×1 fusion of [attention ‖ conv branch] back to C channels.
template <class T>
Tensor<T> sfas_fuse(const Tensor<T>& attn_out, const Tensor<T>& branch_out, const Tensor<T>& fuse_weight,
                    const Tensor<T>& fuse_bias) {
  return conv2d(concat<T>({attn_out, branch_out}, 1), fuse_weight, fuse_bias);
}

}  // namespace dustlab
