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

// Differentiable tensor operations. Every op computes its forward result eagerly
// and, when recording, attaches an analytic backward closure.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dustlab/tensor.hpp"

namespace dustlab {

namespace detail {

// Multiply-accumulate FLOP tally; only conv2d, linear and matmul contribute.
inline thread_local std::int64_t* flop_sink = nullptr;

inline void count_flops(std::int64_t n) {
  if (flop_sink) *flop_sink += n;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C (+)= op(A) * op(B); A is M×K (K×M when trans_a), B is K×N (N×K when trans_b).
template <class T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate) {
  using CMap = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> cm(c, m, n);
  CMap am(a, trans_a ? k : m, trans_a ? m : k);
  CMap bm(b, trans_b ? n : k, trans_b ? k : n);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) cm.noalias() += am * bm;
  else if (trans_a && !trans_b) cm.noalias() += am.transpose() * bm;
  else if (!trans_a && trans_b) cm.noalias() += am * bm.transpose();
  else cm.noalias() += am.transpose() * bm.transpose();
}

// Gathers src (row-major, strides given per output axis) into a dense buffer.
template <class T>
void strided_copy(const T* src, const Shape& out_shape, const std::vector<Index>& steps, T* dst,
                  bool accumulate_into_src = false, T* src_mut = nullptr) {
  const std::size_t r = out_shape.size();
  const Index total = numel_of(out_shape);
  if (total == 0) return;
  if (r == 0) {
    if (accumulate_into_src) src_mut[0] += dst[0];
    else dst[0] = src[0];
    return;
  }
  std::vector<Index> counter(r, 0);
  Index offset = 0;
  const Index inner = out_shape[r - 1];
  const Index inner_step = steps[r - 1];
  for (Index i = 0; i < total; i += inner) {
    if (accumulate_into_src) {
      for (Index j = 0; j < inner; ++j) src_mut[offset + j * inner_step] += dst[i + j];
    } else {
      for (Index j = 0; j < inner; ++j) dst[i + j] = src[offset + j * inner_step];
    }
    for (Index ax = static_cast<Index>(r) - 2; ax >= 0; --ax) {
      auto a = static_cast<std::size_t>(ax);
      offset += steps[a];
      if (++counter[a] < out_shape[a]) break;
      offset -= steps[a] * out_shape[a];
      counter[a] = 0;
    }
  }
}

// For each element of `out_shape`, the flat index of the broadcast operand.
inline std::vector<Index> broadcast_map(const Shape& out_shape, const Shape& b_shape) {
  std::vector<Index> b_strides = strides_of(b_shape);
  std::vector<Index> steps(out_shape.size());
  for (std::size_t i = 0; i < out_shape.size(); ++i) steps[i] = b_shape[i] == 1 ? 0 : b_strides[i];
  std::vector<Index> iota(static_cast<std::size_t>(numel_of(b_shape)));
  std::iota(iota.begin(), iota.end(), Index{0});
  std::vector<Index> out(static_cast<std::size_t>(numel_of(out_shape)));
  strided_copy<Index>(iota.data(), out_shape, steps, out.data());
  return out;
}

inline void check_broadcastable(const char* op, const Shape& a, const Shape& b) {
  bool ok = a.size() == b.size();
  for (std::size_t i = 0; ok && i < a.size(); ++i) ok = b[i] == a[i] || b[i] == 1;
  if (!ok) {
    throw DimensionError(std::string(op) + ": shape " + to_string(b) + " cannot broadcast to " +
                         to_string(a));
  }
}

template <class T>
struct AxisSplit {
  Index outer, extent, inner;
};

template <class T>
AxisSplit<T> split_axis(const Tensor<T>& x, Index axis) {
  axis = normalize_axis(axis, x.rank());
  const auto& s = x.shape();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  return {outer, s[static_cast<std::size_t>(axis)], inner};
}

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, const char* op, F f, DF df) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(x.shape(), std::move(out), {x}, op, [df](TensorImpl<T>& self) {
    auto gx = input_grad(self, 0);
    if (gx.empty()) return;
    const auto& xv = self.inputs[0]->data;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(xv[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

namespace detail {

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  const bool same = a.shape() == b.shape();
  if (!same) check_broadcastable(op, a.shape(), b.shape());
  auto av = a.data();
  auto bv = b.data();
  std::vector<Index> map;
  if (!same) map = broadcast_map(a.shape(), b.shape());
  auto bidx = [&](std::size_t i) { return same ? i : static_cast<std::size_t>(map[i]); };
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T x = av[i], y = bv[bidx(i)];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = x + y; break;
      case BinaryKind::kSub: out[i] = x - y; break;
      case BinaryKind::kMul: out[i] = x * y; break;
      case BinaryKind::kDiv: out[i] = x / y; break;
    }
  }
  return make_result<T>(a.shape(), std::move(out), {a, b}, op,
                        [kind, same, map = std::move(map)](TensorImpl<T>& self) {
                          auto ga = input_grad(self, 0);
                          auto gb = input_grad(self, 1);
                          const auto& av = self.inputs[0]->data;
                          const auto& bv = self.inputs[1]->data;
                          const auto& g = self.grad;
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const std::size_t j = same ? i : static_cast<std::size_t>(map[i]);
                            switch (kind) {
                              case BinaryKind::kAdd:
                                if (!ga.empty()) ga[i] += g[i];
                                if (!gb.empty()) gb[j] += g[i];
                                break;
                              case BinaryKind::kSub:
                                if (!ga.empty()) ga[i] += g[i];
                                if (!gb.empty()) gb[j] -= g[i];
                                break;
                              case BinaryKind::kMul:
                                if (!ga.empty()) ga[i] += g[i] * bv[j];
                                if (!gb.empty()) gb[j] += g[i] * av[i];
                                break;
                              case BinaryKind::kDiv:
                                if (!ga.empty()) ga[i] += g[i] / bv[j];
                                if (!gb.empty()) gb[j] -= g[i] * av[i] / (bv[j] * bv[j]);
                                break;
                            }
                          }
                        });
}

}  // namespace detail

/// a + b; b may broadcast along axes where its extent is 1 (same rank).
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, BinaryKind::kAdd, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, BinaryKind::kSub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, BinaryKind::kMul, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, BinaryKind::kDiv, "div");
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// Subgradient 0 at the kink.
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary(
      x, "abs", [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> pow(const Tensor<T>& x, T p) {
  return detail::unary(
      x, "pow", [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return p * std::pow(v, p - T(1)); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid",
      [](T v) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
      [](T, T y) { return y * (T(1) - y); });
}

// Exact (erf) form.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

// Gradient passes on the closed interval [lo, hi].
template <class T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(Shape{}, {acc}, {x}, "sum", [](TensorImpl<T>& self) {
    auto gx = detail::input_grad(self, 0);
    for (auto& g : gx) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T n = static_cast<T>(x.numel());
  return detail::make_result<T>(Shape{}, {acc / n}, {x}, "mean", [n](TensorImpl<T>& self) {
    auto gx = detail::input_grad(self, 0);
    const T g = self.grad[0] / n;
    for (auto& v : gx) v += g;
  });
}

/// Mean over axes [first_axis, rank); result keeps the leading axes.
template <class T>
Tensor<T> mean_trailing(const Tensor<T>& x, Index first_axis) {
  first_axis = normalize_axis(first_axis, x.rank());
  Shape lead(x.shape().begin(), x.shape().begin() + first_axis);
  const Index groups = numel_of(lead);
  const Index inner = x.numel() / groups;
  std::vector<T> out(static_cast<std::size_t>(groups));
  auto xv = x.data();
  for (Index g = 0; g < groups; ++g) {
    T acc = 0;
    for (Index i = 0; i < inner; ++i) acc += xv[static_cast<std::size_t>(g * inner + i)];
    out[static_cast<std::size_t>(g)] = acc / static_cast<T>(inner);
  }
  return detail::make_result<T>(std::move(lead), std::move(out), {x}, "mean_trailing",
                                [inner](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  for (std::size_t i = 0; i < gx.size(); ++i) {
                                    gx[i] += self.grad[i / static_cast<std::size_t>(inner)] /
                                             static_cast<T>(inner);
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Index infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one inferred axis");
      infer = static_cast<Index>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  return detail::make_result<T>(std::move(shape), x.vec(), {x}, "reshape", [](TensorImpl<T>& self) {
    auto gx = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Output axis i is input axis axes[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<Index> axes) {
  const Index r = x.rank();
  if (static_cast<Index>(axes.size()) != r) throw DimensionError("permute: axis count mismatch");
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (auto& a : axes) {
    a = normalize_axis(a, r);
    if (used[static_cast<std::size_t>(a)]) throw DimensionError("permute: repeated axis");
    used[static_cast<std::size_t>(a)] = true;
  }
  const auto in_strides = strides_of(x.shape());
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<Index> steps(static_cast<std::size_t>(r));
  for (std::size_t i = 0; i < axes.size(); ++i) {
    out_shape[i] = x.shape()[static_cast<std::size_t>(axes[i])];
    steps[i] = in_strides[static_cast<std::size_t>(axes[i])];
  }
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  detail::strided_copy<T>(x.data().data(), out_shape, steps, out.data());
  return detail::make_result<T>(out_shape, std::move(out), {x}, "permute",
                                [out_shape, steps](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  detail::strided_copy<T>(nullptr, out_shape, steps, self.grad.data(),
                                                          true, gx.data());
                                });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x, Index a, Index b) {
  std::vector<Index> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), Index{0});
  std::swap(axes[static_cast<std::size_t>(normalize_axis(a, x.rank()))],
            axes[static_cast<std::size_t>(normalize_axis(b, x.rank()))]);
  return permute(x, axes);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, Index axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  axis = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank()) throw DimensionError("concat: rank mismatch");
    for (Index i = 0; i < p.rank(); ++i) {
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != out_shape[static_cast<std::size_t>(i)]) {
        throw DimensionError("concat: extent mismatch on axis " + std::to_string(i) + ": " +
                             to_string(p.shape()) + " vs " + to_string(out_shape));
      }
    }
    total += p.shape()[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  const auto s0 = detail::split_axis(parts[0], axis);
  const Index outer = s0.outer, inner = s0.inner;
  std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
  std::vector<Index> extents;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index e = p.shape()[static_cast<std::size_t>(axis)];
    extents.push_back(e);
    auto pv = p.data();
    for (Index o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * e * inner, e * inner, out.begin() + (o * total + offset) * inner);
    }
    offset += e;
  }
  return detail::make_result<T>(out_shape, std::move(out), parts, "concat",
                                [outer, inner, total, extents](TensorImpl<T>& self) {
                                  Index off = 0;
                                  for (std::size_t k = 0; k < extents.size(); ++k) {
                                    const Index e = extents[k];
                                    auto gx = detail::input_grad(self, k);
                                    if (!gx.empty()) {
                                      for (Index o = 0; o < outer; ++o) {
                                        const T* src = self.grad.data() + (o * total + off) * inner;
                                        T* dst = gx.data() + o * e * inner;
                                        for (Index i = 0; i < e * inner; ++i) dst[i] += src[i];
                                      }
                                    }
                                    off += e;
                                  }
                                });
}

template <class T>
Tensor<T> slice(const Tensor<T>& x, Index axis, Index start, Index length) {
  axis = normalize_axis(axis, x.rank());
  const auto s = detail::split_axis(x, axis);
  if (start < 0 || length <= 0 || start + length > s.extent) {
    throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") out of range on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
  auto xv = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    std::copy_n(xv.begin() + (o * s.extent + start) * s.inner, length * s.inner,
                out.begin() + o * length * s.inner);
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "slice",
                                [s, start, length](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  for (Index o = 0; o < s.outer; ++o) {
                                    const T* src = self.grad.data() + o * length * s.inner;
                                    T* dst = gx.data() + (o * s.extent + start) * s.inner;
                                    for (Index i = 0; i < length * s.inner; ++i) dst[i] += src[i];
                                  }
                                });
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, Index axis, const std::vector<Index>& sizes) {
  std::vector<Tensor<T>> parts;
  Index start = 0;
  for (Index len : sizes) {
    parts.push_back(slice(x, axis, start, len));
    start += len;
  }
  if (start != x.dim(axis)) throw DimensionError("split sizes do not cover axis extent");
  return parts;
}

enum class PadMode { kZero, kSymmetric };

namespace detail {

// Source index of padded position i (may be -1 for zero padding).
inline Index pad_source(Index i, Index before, Index n, PadMode mode) {
  Index j = i - before;
  if (j >= 0 && j < n) return j;
  if (mode == PadMode::kZero) return -1;
  // Symmetric: edge sample repeated, period 2n.
  const Index period = 2 * n;
  j %= period;
  if (j < 0) j += period;
  return j < n ? j : period - 1 - j;
}

}  // namespace detail

template <class T>
Tensor<T> pad(const Tensor<T>& x, Index axis, Index before, Index after, PadMode mode) {
  axis = normalize_axis(axis, x.rank());
  if (before < 0 || after < 0) throw GeometryError("pad: negative amount");
  if (before == 0 && after == 0) return x;
  const auto s = detail::split_axis(x, axis);
  const Index n_out = s.extent + before + after;
  std::vector<Index> src(static_cast<std::size_t>(n_out));
  for (Index i = 0; i < n_out; ++i) src[static_cast<std::size_t>(i)] = detail::pad_source(i, before, s.extent, mode);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = n_out;
  std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)), T(0));
  auto xv = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < n_out; ++i) {
      const Index j = src[static_cast<std::size_t>(i)];
      if (j < 0) continue;
      std::copy_n(xv.begin() + (o * s.extent + j) * s.inner, s.inner,
                  out.begin() + (o * n_out + i) * s.inner);
    }
  }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "pad",
                                [s, n_out, src = std::move(src)](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  for (Index o = 0; o < s.outer; ++o) {
                                    for (Index i = 0; i < n_out; ++i) {
                                      const Index j = src[static_cast<std::size_t>(i)];
                                      if (j < 0) continue;
                                      const T* g = self.grad.data() + (o * n_out + i) * s.inner;
                                      T* d = gx.data() + (o * s.extent + j) * s.inner;
                                      for (Index k = 0; k < s.inner; ++k) d[k] += g[k];
                                    }
                                  }
                                });
}

/// Cyclic shift: out[i] = x[(i - shift) mod n] along axis.
template <class T>
Tensor<T> roll(const Tensor<T>& x, Index axis, Index shift) {
  axis = normalize_axis(axis, x.rank());
  const auto s = detail::split_axis(x, axis);
  const Index n = s.extent;
  shift = ((shift % n) + n) % n;
  if (shift == 0) return x;
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  auto xv = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < n; ++i) {
      const Index j = (i - shift + n) % n;
      std::copy_n(xv.begin() + (o * n + j) * s.inner, s.inner, out.begin() + (o * n + i) * s.inner);
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, "roll", [s, n, shift](TensorImpl<T>& self) {
    auto gx = detail::input_grad(self, 0);
    if (gx.empty()) return;
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < n; ++i) {
        const Index j = (i - shift + n) % n;
        const T* g = self.grad.data() + (o * n + i) * s.inner;
        T* d = gx.data() + (o * n + j) * s.inner;
        for (Index k = 0; k < s.inner; ++k) d[k] += g[k];
      }
    }
  });
}

/// Rows of `table` ([R, C]) selected by `index`; result [index.size(), C].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<Index> index) {
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  const Index rows = table.dim(0), cols = table.dim(1);
  std::vector<T> out(index.size() * static_cast<std::size_t>(cols));
  auto tv = table.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows) throw DimensionError("gather_rows: index out of range");
    std::copy_n(tv.begin() + index[i] * cols, cols, out.begin() + static_cast<Index>(i) * cols);
  }
  const Shape out_shape{static_cast<Index>(index.size()), cols};
  return detail::make_result<T>(out_shape, std::move(out), {table},
                                "gather_rows", [cols, index = std::move(index)](TensorImpl<T>& self) {
                                  auto gt = detail::input_grad(self, 0);
                                  if (gt.empty()) return;
                                  for (std::size_t i = 0; i < index.size(); ++i) {
                                    for (Index c = 0; c < cols; ++c) {
                                      gt[static_cast<std::size_t>(index[i] * cols + c)] +=
                                          self.grad[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// x[..., Din] · weightᵀ + bias.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [Dout, Din]");
  const Index din = weight.dim(1), dout = weight.dim(0);
  if (x.dim(-1) != din) {
    throw DimensionError("linear: input last axis " + std::to_string(x.dim(-1)) + " != weight Din " +
                         std::to_string(din));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw DimensionError("linear: bias must be [Dout]");
  }
  const Index rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<T> out(static_cast<std::size_t>(rows * dout));
  detail::gemm<T>(false, true, rows, dout, din, x.data().data(), weight.data().data(), out.data(), false);
  if (bias.defined()) {
    auto bv = bias.data();
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < dout; ++j) out[static_cast<std::size_t>(r * dout + j)] += bv[static_cast<std::size_t>(j)];
  }
  detail::count_flops(2 * rows * din * dout);
  std::vector<Tensor<T>> ins{x, weight};
  if (bias.defined()) ins.push_back(bias);
  return detail::make_result<T>(std::move(out_shape), std::move(out), ins, "linear",
                                [rows, din, dout](TensorImpl<T>& self) {
                                  const T* g = self.grad.data();
                                  auto gx = detail::input_grad(self, 0);
                                  auto gw = detail::input_grad(self, 1);
                                  if (!gx.empty())
                                    detail::gemm<T>(false, false, rows, din, dout, g,
                                                    self.inputs[1]->data.data(), gx.data(), true);
                                  if (!gw.empty())
                                    detail::gemm<T>(true, false, dout, din, rows, g,
                                                    self.inputs[0]->data.data(), gw.data(), true);
                                  if (self.inputs.size() > 2) {
                                    auto gb = detail::input_grad(self, 2);
                                    if (!gb.empty())
                                      for (Index r = 0; r < rows; ++r)
                                        for (Index j = 0; j < dout; ++j)
                                          gb[static_cast<std::size_t>(j)] += g[r * dout + j];
                                  }
                                });
}

/// Batched product over leading axes: op(a)[..., M, K] · op(b)[..., K, N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() < 2 || a.rank() != b.rank()) throw DimensionError("matmul: ranks must match and be >= 2");
  for (Index i = 0; i + 2 < a.rank(); ++i) {
    if (a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)])
      throw DimensionError("matmul: batch extent mismatch on axis " + std::to_string(i));
  }
  const Index m = trans_a ? a.dim(-1) : a.dim(-2);
  const Index ka = trans_a ? a.dim(-2) : a.dim(-1);
  const Index kb = trans_b ? b.dim(-1) : b.dim(-2);
  const Index n = trans_b ? b.dim(-2) : b.dim(-1);
  if (ka != kb) {
    throw DimensionError("matmul: inner extents " + std::to_string(ka) + " and " + std::to_string(kb));
  }
  const Index k = ka;
  const Index batch = a.numel() / (m * k);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  for (Index i = 0; i < batch; ++i) {
    detail::gemm<T>(trans_a, trans_b, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                    out.data() + i * m * n, false);
  }
  detail::count_flops(2 * batch * m * n * k);
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {a, b}, "matmul",
      [=](TensorImpl<T>& self) {
        auto ga = detail::input_grad(self, 0);
        auto gb = detail::input_grad(self, 1);
        const T* av = self.inputs[0]->data.data();
        const T* bv = self.inputs[1]->data.data();
        for (Index i = 0; i < batch; ++i) {
          const T* g = self.grad.data() + i * m * n;
          if (!ga.empty()) {
            // dA = G·op(B)ᵀ, stored according to trans_a.
            if (!trans_a) detail::gemm<T>(false, !trans_b, m, k, n, g, bv + i * k * n, ga.data() + i * m * k, true);
            else detail::gemm<T>(trans_b, true, k, m, n, bv + i * k * n, g, ga.data() + i * m * k, true);
          }
          if (!gb.empty()) {
            if (!trans_b) detail::gemm<T>(!trans_a, false, k, n, m, av + i * m * k, g, gb.data() + i * k * n, true);
            else detail::gemm<T>(true, trans_a, n, k, m, g, av + i * m * k, gb.data() + i * k * n, true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization

/// Max-subtracted softmax along axis.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, Index axis) {
  const auto s = detail::split_axis(x, axis);
  auto xv = x.data();
  std::vector<T> out(xv.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.extent * s.inner + in;
      T mx = xv[static_cast<std::size_t>(base)];
      for (Index e = 1; e < s.extent; ++e) mx = std::max(mx, xv[static_cast<std::size_t>(base + e * s.inner)]);
      T total = 0;
      for (Index e = 0; e < s.extent; ++e) {
        const auto idx = static_cast<std::size_t>(base + e * s.inner);
        out[idx] = std::exp(xv[idx] - mx);
        total += out[idx];
      }
      for (Index e = 0; e < s.extent; ++e) out[static_cast<std::size_t>(base + e * s.inner)] /= total;
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), {x}, "softmax", [s](TensorImpl<T>& self) {
    auto gx = detail::input_grad(self, 0);
    if (gx.empty()) return;
    const auto& y = self.data;
    const auto& g = self.grad;
    for (Index o = 0; o < s.outer; ++o) {
      for (Index in = 0; in < s.inner; ++in) {
        const Index base = o * s.extent * s.inner + in;
        T dot = 0;
        for (Index e = 0; e < s.extent; ++e) {
          const auto idx = static_cast<std::size_t>(base + e * s.inner);
          dot += g[idx] * y[idx];
        }
        for (Index e = 0; e < s.extent; ++e) {
          const auto idx = static_cast<std::size_t>(base + e * s.inner);
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

/// Zero-mean / unit-variance along axis, then gain·x̂ + offset (either may be undefined).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, Index axis, const Tensor<T>& gain = {}, const Tensor<T>& offset = {},
                     T eps = T(1e-5)) {
  const auto s = detail::split_axis(x, axis);
  for (const auto* p : {&gain, &offset}) {
    if (p->defined() && (p->rank() != 1 || p->dim(0) != s.extent))
      throw DimensionError("layer_norm: affine parameters must have extent " + std::to_string(s.extent));
  }
  auto xv = x.data();
  std::vector<T> xhat(xv.size()), out(xv.size());
  std::vector<T> inv_std(static_cast<std::size_t>(s.outer * s.inner));
  for (Index o = 0; o < s.outer; ++o) {
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.extent * s.inner + in;
      T mu = 0;
      for (Index e = 0; e < s.extent; ++e) mu += xv[static_cast<std::size_t>(base + e * s.inner)];
      mu /= static_cast<T>(s.extent);
      T var = 0;
      for (Index e = 0; e < s.extent; ++e) {
        const T d = xv[static_cast<std::size_t>(base + e * s.inner)] - mu;
        var += d * d;
      }
      var /= static_cast<T>(s.extent);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(o * s.inner + in)] = is;
      for (Index e = 0; e < s.extent; ++e) {
        const auto idx = static_cast<std::size_t>(base + e * s.inner);
        xhat[idx] = (xv[idx] - mu) * is;
        T v = xhat[idx];
        if (gain.defined()) v *= gain.data()[static_cast<std::size_t>(e)];
        if (offset.defined()) v += offset.data()[static_cast<std::size_t>(e)];
        out[idx] = v;
      }
    }
  }
  const bool has_gain = gain.defined(), has_offset = offset.defined();
  std::vector<Tensor<T>> ins{x};
  if (has_gain) ins.push_back(gain);
  if (has_offset) ins.push_back(offset);
  return detail::make_result<T>(
      x.shape(), std::move(out), ins, "layer_norm",
      [s, has_gain, has_offset, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl<T>& self) {
        auto gx = detail::input_grad(self, 0);
        std::span<T> gg, go;
        std::size_t next = 1;
        const T* gain_v = nullptr;
        if (has_gain) {
          gain_v = self.inputs[next]->data.data();
          gg = detail::input_grad(self, next++);
        }
        if (has_offset) go = detail::input_grad(self, next++);
        const auto& g = self.grad;
        const T n = static_cast<T>(s.extent);
        for (Index o = 0; o < s.outer; ++o) {
          for (Index in = 0; in < s.inner; ++in) {
            const Index base = o * s.extent * s.inner + in;
            T sum_gh = 0, sum_ghx = 0;
            for (Index e = 0; e < s.extent; ++e) {
              const auto idx = static_cast<std::size_t>(base + e * s.inner);
              const T gh = g[idx] * (gain_v ? gain_v[e] : T(1));
              sum_gh += gh;
              sum_ghx += gh * xhat[idx];
              if (!gg.empty()) gg[static_cast<std::size_t>(e)] += g[idx] * xhat[idx];
              if (!go.empty()) go[static_cast<std::size_t>(e)] += g[idx];
            }
            if (gx.empty()) continue;
            const T is = inv_std[static_cast<std::size_t>(o * s.inner + in)];
            for (Index e = 0; e < s.extent; ++e) {
              const auto idx = static_cast<std::size_t>(base + e * s.inner);
              const T gh = g[idx] * (gain_v ? gain_v[e] : T(1));
              gx[idx] += is * (gh - sum_gh / n - xhat[idx] * sum_ghx / n);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial ops on [N, C, H, W]

struct ConvGeometry {
  Index n, cin, h, w, cout, k, stride, padding, dilation, ho, wo;
};

namespace detail {

template <class T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const Index cols = g.n * g.ho * g.wo;
  for (Index c = 0; c < g.cin; ++c)
    for (Index ki = 0; ki < g.k; ++ki)
      for (Index kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (Index n = 0; n < g.n; ++n) {
          const T* plane = x + (n * g.cin + c) * g.h * g.w;
          for (Index oy = 0; oy < g.ho; ++oy) {
            const Index iy = oy * g.stride - g.padding + ki * g.dilation;
            T* dst = row + (n * g.ho + oy) * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill_n(dst, g.wo, T(0));
              continue;
            }
            for (Index ox = 0; ox < g.wo; ++ox) {
              const Index ix = ox * g.stride - g.padding + kj * g.dilation;
              dst[ox] = (ix >= 0 && ix < g.w) ? plane[iy * g.w + ix] : T(0);
            }
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  const Index cols = g.n * g.ho * g.wo;
  for (Index c = 0; c < g.cin; ++c)
    for (Index ki = 0; ki < g.k; ++ki)
      for (Index kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * cols;
        for (Index n = 0; n < g.n; ++n) {
          T* plane = dx + (n * g.cin + c) * g.h * g.w;
          for (Index oy = 0; oy < g.ho; ++oy) {
            const Index iy = oy * g.stride - g.padding + ki * g.dilation;
            if (iy < 0 || iy >= g.h) continue;
            const T* src = row + (n * g.ho + oy) * g.wo;
            for (Index ox = 0; ox < g.wo; ++ox) {
              const Index ix = ox * g.stride - g.padding + kj * g.dilation;
              if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += src[ox];
            }
          }
        }
      }
}

}  // namespace detail

inline ConvGeometry conv_geometry(const Shape& input, const Shape& weight, Index stride, Index padding,
                                  Index dilation) {
  if (input.size() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + to_string(input));
  if (weight.size() != 4) throw DimensionError("conv2d: weight must be [Cout,Cin,k,k], got " + to_string(weight));
  if (weight[1] != input[1]) {
    throw DimensionError("conv2d: input axis 1 (" + std::to_string(input[1]) + ") != weight axis 1 (" +
                         std::to_string(weight[1]) + ")");
  }
  if (weight[2] != weight[3] || weight[2] % 2 == 0) {
    throw DimensionError("conv2d: kernel must be square and odd, weight axes 2,3 = " + std::to_string(weight[2]) +
                         "," + std::to_string(weight[3]));
  }
  if (stride < 1 || dilation < 1 || padding < 0) throw GeometryError("conv2d: invalid stride/dilation/padding");
  ConvGeometry g{input[0], input[1], input[2], input[3], weight[0], weight[2], stride, padding, dilation, 0, 0};
  const Index span = dilation * (g.k - 1) + 1;
  const Index ny = g.h + 2 * padding - span, nx = g.w + 2 * padding - span;
  if (ny < 0 || nx < 0) {
    throw GeometryError("conv2d: effective kernel extent " + std::to_string(span) + " exceeds padded input " +
                        std::to_string(g.h + 2 * padding) + "x" + std::to_string(g.w + 2 * padding));
  }
  g.ho = ny / stride + 1;
  g.wo = nx / stride + 1;
  return g;
}

/// Cross-correlation with zero padding.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {}, Index stride = 1,
                 Index padding = 0, Index dilation = 1) {
  const ConvGeometry g = conv_geometry(input.shape(), weight.shape(), stride, padding, dilation);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias must be [Cout]");
  }
  const Index rows = g.cin * g.k * g.k, cols = g.n * g.ho * g.wo, plane = g.ho * g.wo;
  std::vector<T> col(static_cast<std::size_t>(rows * cols));
  detail::im2col(input.data().data(), g, col.data());
  std::vector<T> mat(static_cast<std::size_t>(g.cout * cols));
  detail::gemm<T>(false, false, g.cout, cols, rows, weight.data().data(), col.data(), mat.data(), false);
  detail::count_flops(2 * rows * g.cout * cols);
  std::vector<T> out(static_cast<std::size_t>(g.n * g.cout * plane));
  for (Index n = 0; n < g.n; ++n)
    for (Index o = 0; o < g.cout; ++o) {
      const T b = bias.defined() ? bias.data()[static_cast<std::size_t>(o)] : T(0);
      const T* src = mat.data() + o * cols + n * plane;
      T* dst = out.data() + (n * g.cout + o) * plane;
      for (Index p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  std::vector<Tensor<T>> ins{input, weight};
  if (bias.defined()) ins.push_back(bias);
  return detail::make_result<T>(
      Shape{g.n, g.cout, g.ho, g.wo}, std::move(out), ins, "conv2d", [g, rows, cols, plane](TensorImpl<T>& self) {
        std::vector<T> gmat(static_cast<std::size_t>(g.cout * cols));
        for (Index n = 0; n < g.n; ++n)
          for (Index o = 0; o < g.cout; ++o)
            std::copy_n(self.grad.data() + (n * g.cout + o) * plane, plane, gmat.data() + o * cols + n * plane);
        auto gx = detail::input_grad(self, 0);
        auto gw = detail::input_grad(self, 1);
        if (!gw.empty()) {
          std::vector<T> col(static_cast<std::size_t>(rows * cols));
          detail::im2col(self.inputs[0]->data.data(), g, col.data());
          detail::gemm<T>(false, true, g.cout, rows, cols, gmat.data(), col.data(), gw.data(), true);
        }
        if (!gx.empty()) {
          std::vector<T> dcol(static_cast<std::size_t>(rows * cols));
          detail::gemm<T>(true, false, rows, cols, g.cout, self.inputs[1]->data.data(), gmat.data(), dcol.data(),
                          false);
          detail::col2im(dcol.data(), g, gx.data());
        }
        if (self.inputs.size() > 2) {
          auto gb = detail::input_grad(self, 2);
          if (!gb.empty())
            for (Index o = 0; o < g.cout; ++o) {
              T acc = 0;
              for (Index c = 0; c < cols; ++c) acc += gmat[static_cast<std::size_t>(o * cols + c)];
              gb[static_cast<std::size_t>(o)] += acc;
            }
        }
      });
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, Index factor) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest: input must be [N,C,H,W]");
  if (factor < 1) throw GeometryError("upsample_nearest: factor must be >= 1");
  if (factor == 1) return x;
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = h * factor, wo = w * factor;
  std::vector<T> out(static_cast<std::size_t>(nc * ho * wo));
  auto xv = x.data();
  for (Index p = 0; p < nc; ++p)
    for (Index y = 0; y < ho; ++y)
      for (Index z = 0; z < wo; ++z)
        out[static_cast<std::size_t>((p * ho + y) * wo + z)] = xv[static_cast<std::size_t>((p * h + y / factor) * w + z / factor)];
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x}, "upsample_nearest",
                                [=](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  for (Index p = 0; p < nc; ++p)
                                    for (Index y = 0; y < ho; ++y)
                                      for (Index z = 0; z < wo; ++z)
                                        gx[static_cast<std::size_t>((p * h + y / factor) * w + z / factor)] +=
                                            self.grad[static_cast<std::size_t>((p * ho + y) * wo + z)];
                                });
}

/// 2×2 mean pooling with stride 2; a trailing odd row/column is dropped.
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("avg_pool2: input must be [N,C,H,W]");
  const Index nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index ho = h / 2, wo = w / 2;
  if (ho < 1 || wo < 1) throw GeometryError("avg_pool2: input smaller than 2x2");
  std::vector<T> out(static_cast<std::size_t>(nc * ho * wo));
  auto xv = x.data();
  for (Index p = 0; p < nc; ++p)
    for (Index y = 0; y < ho; ++y)
      for (Index z = 0; z < wo; ++z) {
        const T* base = xv.data() + (p * h + 2 * y) * w + 2 * z;
        out[static_cast<std::size_t>((p * ho + y) * wo + z)] = T(0.25) * (base[0] + base[1] + base[w] + base[w + 1]);
      }
  return detail::make_result<T>(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), {x}, "avg_pool2",
                                [=](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  for (Index p = 0; p < nc; ++p)
                                    for (Index y = 0; y < ho; ++y)
                                      for (Index z = 0; z < wo; ++z) {
                                        const T g = T(0.25) * self.grad[static_cast<std::size_t>((p * ho + y) * wo + z)];
                                        T* base = gx.data() + (p * h + 2 * y) * w + 2 * z;
                                        base[0] += g;
                                        base[1] += g;
                                        base[w] += g;
                                        base[w + 1] += g;
                                      }
                                });
}

/// 1-D correlation with `kernel` along axis, valid region only.
template <class T>
Tensor<T> filter_valid(const Tensor<T>& x, Index axis, std::vector<T> kernel) {
  const auto s = detail::split_axis(x, axis);
  const Index k = static_cast<Index>(kernel.size());
  const Index n_out = s.extent - k + 1;
  if (k < 1 || n_out < 1) {
    throw GeometryError("filter_valid: kernel of " + std::to_string(k) + " taps exceeds extent " +
                        std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(normalize_axis(axis, x.rank()))] = n_out;
  std::vector<T> out(static_cast<std::size_t>(s.outer * n_out * s.inner), T(0));
  auto xv = x.data();
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i < n_out; ++i) {
      T* dst = out.data() + (o * n_out + i) * s.inner;
      for (Index t = 0; t < k; ++t) {
        const T c = kernel[static_cast<std::size_t>(t)];
        const T* src = xv.data() + (o * s.extent + i + t) * s.inner;
        for (Index in = 0; in < s.inner; ++in) dst[in] += c * src[in];
      }
    }
  return detail::make_result<T>(std::move(out_shape), std::move(out), {x}, "filter_valid",
                                [s, k, n_out, kernel = std::move(kernel)](TensorImpl<T>& self) {
                                  auto gx = detail::input_grad(self, 0);
                                  if (gx.empty()) return;
                                  for (Index o = 0; o < s.outer; ++o)
                                    for (Index i = 0; i < n_out; ++i) {
                                      const T* g = self.grad.data() + (o * n_out + i) * s.inner;
                                      for (Index t = 0; t < k; ++t) {
                                        const T c = kernel[static_cast<std::size_t>(t)];
                                        T* dst = gx.data() + (o * s.extent + i + t) * s.inner;
                                        for (Index in = 0; in < s.inner; ++in) dst[in] += c * g[in];
                                      }
                                    }
                                });
}

/// Counts FLOPs of conv2d/linear/matmul issued while alive (2 per multiply-add).
class FlopCounter {
 public:
  FlopCounter() : saved_(detail::flop_sink) { detail::flop_sink = &count_; }
  ~FlopCounter() { detail::flop_sink = saved_; }
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;
  std::int64_t count() const { return count_; }

 private:
  std::int64_t count_ = 0;
  std::int64_t* saved_;
};

}  // namespace dustlab
