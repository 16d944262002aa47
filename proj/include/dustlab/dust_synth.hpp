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
#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dustlab/config.hpp"
#include "dustlab/errors.hpp"
#include "dustlab/image_io.hpp"
#include "dustlab/ops.hpp"
#include "dustlab/rng.hpp"

namespace dustlab {

/// Atmospheric light, scattering coefficient and depth of one degradation.
template <class T>
struct DustField {
  std::array<double, 3> ambient{0.82, 0.78, 0.72};
  double beta = 1.0;
  Tensor<T> depth;       // [1,1,H,W], nonnegative
  Tensor<T> modulation;  // optional [1,1,H,W] multiplier on the ambient light

  void validate() const {
    if (!(beta >= 0) || !std::isfinite(beta)) throw ParameterError("dust field: beta must be >= 0, got " + std::to_string(beta));
    for (double a : ambient)
      if (!(a >= 0 && a <= 1)) throw ParameterError("dust field: ambient light must lie in [0, 1]");
    if (!depth.defined() || depth.rank() != 4 || depth.dim(0) != 1 || depth.dim(1) != 1) {
      throw ParameterError("dust field: depth must be [1,1,H,W]");
    }
    for (T d : depth.data())
      if (!(d >= 0)) throw ParameterError("dust field: negative depth");
    if (modulation.defined()) {
      if (modulation.shape() != depth.shape()) throw ParameterError("dust field: modulation shape differs from depth");
      for (T m : modulation.data())
        if (!(m >= 0)) throw ParameterError("dust field: negative ambient modulation");
    }
  }

  /// exp(−β·d), [1,1,H,W].
  Tensor<T> transmission() const {
    Tensor<T> t(depth.shape());
    auto d = depth.data();
    auto o = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) o[i] = static_cast<T>(std::exp(-beta * static_cast<double>(d[i])));
    return t;
  }
};

namespace detail {

template <class T>
void check_rgb_batch(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4 || x.dim(1) != 3) throw DimensionError(std::string(op) + ": expected [N,3,H,W], got " + to_string(x.shape()));
}

template <class T>
double ambient_at(const DustField<T>& f, std::size_t c, std::size_t pixel) {
  const double a = f.ambient[c];
  if (!f.modulation.defined()) return a;
  return std::min(1.0, a * static_cast<double>(f.modulation.data()[pixel]));
}

}  // namespace detail

/// I = J·t + A·(1 − t), per pixel and channel.
template <class T>
Tensor<T> apply_asm(const Tensor<T>& clean, const DustField<T>& field) {
  field.validate();
  detail::check_rgb_batch(clean, "apply_asm");
  const Index h = clean.dim(2), w = clean.dim(3), plane = h * w;
  if (field.depth.dim(2) != h || field.depth.dim(3) != w) {
    throw DimensionError("apply_asm: depth " + to_string(field.depth.shape()) + " does not match image " +
                         to_string(clean.shape()));
  }
  const Tensor<T> t = field.transmission();
  Tensor<T> out(clean.shape());
  auto j = clean.data();
  auto tv = t.data();
  auto o = out.mutable_data();
  for (Index n = 0; n < clean.dim(0); ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (Index p = 0; p < plane; ++p) {
        const auto i = static_cast<std::size_t>((n * 3 + static_cast<Index>(c)) * plane + p);
        const double tt = static_cast<double>(tv[static_cast<std::size_t>(p)]);
        const double a = detail::ambient_at(field, c, static_cast<std::size_t>(p));
        o[i] = static_cast<T>(static_cast<double>(j[i]) * tt + a * (1.0 - tt));
      }
  return out;
}

/// J = (I − A·(1 − t)) / t; meaningful where t is not tiny.
template <class T>
Tensor<T> invert_asm(const Tensor<T>& degraded, const DustField<T>& field) {
  field.validate();
  detail::check_rgb_batch(degraded, "invert_asm");
  const Index plane = degraded.dim(2) * degraded.dim(3);
  const Tensor<T> t = field.transmission();
  Tensor<T> out(degraded.shape());
  auto iv = degraded.data();
  auto tv = t.data();
  auto o = out.mutable_data();
  for (Index n = 0; n < degraded.dim(0); ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (Index p = 0; p < plane; ++p) {
        const auto i = static_cast<std::size_t>((n * 3 + static_cast<Index>(c)) * plane + p);
        const double tt = static_cast<double>(tv[static_cast<std::size_t>(p)]);
        const double a = detail::ambient_at(field, c, static_cast<std::size_t>(p));
        o[i] = static_cast<T>((static_cast<double>(iv[i]) - a * (1.0 - tt)) / tt);
      }
  return out;
}

inline constexpr double kDepthMin = 0.5;
inline constexpr double kDepthMax = 3.0;

/// Smooth positive depth [1,1,H,W]: a coarse uniform-noise grid of side
/// max(2, round((1 − smoothness)·min(H,W)/4)), bilinearly upsampled and rescaled to [0.5, 3.0].
template <class T = float>
Tensor<T> make_depth(Index height, Index width, std::uint64_t seed, double smoothness) {
  if (height < 1 || width < 1) throw GeometryError("make_depth: empty extent");
  if (!(smoothness >= 0 && smoothness <= 1)) throw ParameterError("make_depth: smoothness must lie in [0, 1]");
  const Index side = std::max<Index>(
      2, static_cast<Index>(std::lround((1.0 - smoothness) * static_cast<double>(std::min(height, width)) / 4.0)));
  Rng rng(mix_seed(seed, 0x64657074ULL));
  std::vector<double> grid(static_cast<std::size_t>(side * side));
  for (auto& g : grid) g = rng.uniform();
  std::vector<double> field(static_cast<std::size_t>(height * width));
  auto coord = [&](Index i, Index extent) {
    return extent == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(side - 1) / static_cast<double>(extent - 1);
  };
  for (Index y = 0; y < height; ++y) {
    const double gy = coord(y, height);
    const Index y0 = std::min<Index>(static_cast<Index>(gy), side - 2);
    const double fy = gy - static_cast<double>(y0);
    for (Index x = 0; x < width; ++x) {
      const double gx = coord(x, width);
      const Index x0 = std::min<Index>(static_cast<Index>(gx), side - 2);
      const double fx = gx - static_cast<double>(x0);
      auto g = [&](Index r, Index c) { return grid[static_cast<std::size_t>(r * side + c)]; };
      field[static_cast<std::size_t>(y * width + x)] = (1 - fy) * ((1 - fx) * g(y0, x0) + fx * g(y0, x0 + 1)) +
                                                       fy * ((1 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1));
    }
  }
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double min = *lo, range = *hi - *lo;
  Tensor<T> depth({1, 1, height, width});
  auto d = depth.mutable_data();
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double u = range > 0 ? (field[i] - min) / range : 0.0;
    d[i] = static_cast<T>(std::clamp(kDepthMin + u * (kDepthMax - kDepthMin), kDepthMin, kDepthMax));
  }
  return depth;
}

// ---------------------------------------------------------------------------
// Geometric augmentation

/// Counter-clockwise quarter turns followed by an optional horizontal flip.
struct Transform {
  int quarter_turns = 0;
  bool flip = false;

  std::string code() const { return "r" + std::to_string(90 * quarter_turns) + (flip ? "f" : ""); }

  static Transform parse(const std::string& code) {
    for (int q = 0; q < 4; ++q)
      for (bool f : {false, true}) {
        Transform t{q, f};
        if (t.code() == code) return t;
      }
    throw ParameterError("unknown transform code '" + code + "'");
  }

  /// Uniform over the 8 rotation × flip combinations.
  static Transform draw(Rng& rng) {
    const int q = static_cast<int>(rng.below(4));
    return {q, rng.below(2) == 1};
  }

  bool operator==(const Transform&) const = default;
};

/// Applies `t` to every [H,W] plane of x [N,C,H,W]; rotations need H == W.
template <class T>
Tensor<T> apply_transform(const Tensor<T>& x, const Transform& t) {
  if (x.rank() != 4) throw DimensionError("transform: expected [N,C,H,W], got " + to_string(x.shape()));
  const Index h = x.dim(2), w = x.dim(3);
  if (t.quarter_turns % 2 && h != w) {
    throw GeometryError("transform: rotation needs a square patch, got " + std::to_string(h) + "x" + std::to_string(w));
  }
  const Index planes = x.dim(0) * x.dim(1), n = h * w;
  Tensor<T> out(x.shape());
  auto src = x.data();
  auto dst = out.mutable_data();
  for (Index p = 0; p < planes; ++p)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        Index c = t.flip ? w - 1 - j : j;  // column before flipping
        Index si = i, sj = c;
        switch (t.quarter_turns) {
          case 1: si = c, sj = w - 1 - i; break;           // out[i][c] = in[c][W-1-i]
          case 2: si = h - 1 - i, sj = w - 1 - c; break;
          case 3: si = h - 1 - c, sj = i; break;
          default: break;
        }
        dst[static_cast<std::size_t>(p * n + i * w + j)] = src[static_cast<std::size_t>(p * n + si * w + sj)];
      }
  return out;
}

struct Provenance {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  std::uint32_t idx = 0;
  std::array<double, 3> ambient{0, 0, 0};
  double beta = 0;
  std::string transform = "r0";

  std::string to_line() const {
    using config_text::format;
    return "seed=" + std::to_string(seed) + " epoch=" + std::to_string(epoch) + " idx=" + std::to_string(idx) +
           " A=" + format(ambient[0]) + "," + format(ambient[1]) + "," + format(ambient[2]) + " beta=" + format(beta) +
           " transform=" + transform;
  }

  static Provenance parse(const std::string& line) {
    Provenance p;
    std::istringstream in(line);
    std::string field;
    int seen = 0;
    while (in >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw ParameterError("provenance: malformed field '" + field + "'");
      const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
      if (key == "seed") {
        p.seed = config_text::parse_u64(key, value);
      } else if (key == "epoch") {
        p.epoch = static_cast<std::uint32_t>(config_text::parse_u64(key, value));
      } else if (key == "idx") {
        p.idx = static_cast<std::uint32_t>(config_text::parse_u64(key, value));
      } else if (key == "A") {
        auto parts = config_text::split_list(value);
        if (parts.size() != 3) throw ParameterError("provenance: A needs three components");
        for (std::size_t c = 0; c < 3; ++c) p.ambient[c] = config_text::parse_double(key, parts[c]);
      } else if (key == "beta") {
        p.beta = config_text::parse_double(key, value);
      } else if (key == "transform") {
        Transform::parse(value);
        p.transform = value;
      } else {
        throw ParameterError("provenance: unknown field '" + key + "'");
      }
      ++seen;
    }
    if (seen != 6) throw ParameterError("provenance: expected 6 fields, got " + std::to_string(seen));
    return p;
  }

  bool operator==(const Provenance&) const = default;
};

template <class T>
struct PairedSample {
  Tensor<T> clean;     // [1,3,h,w]
  Tensor<T> degraded;  // [1,3,h,w]
  Provenance provenance;
};

/// Same transform on both halves of a pair; records it in the provenance.
template <class T>
PairedSample<T> augment(const PairedSample<T>& s, Rng& rng) {
  if (s.clean.dim(2) != s.clean.dim(3)) {
    throw GeometryError("augment: square patch required, got " + std::to_string(s.clean.dim(2)) + "x" +
                        std::to_string(s.clean.dim(3)));
  }
  const Transform t = Transform::draw(rng);
  PairedSample<T> out{apply_transform(s.clean, t), apply_transform(s.degraded, t), s.provenance};
  out.provenance.transform = t.code();
  return out;
}

// ---------------------------------------------------------------------------
// Patches

struct PatchOffset {
  Index y = 0;
  Index x = 0;
  bool operator==(const PatchOffset&) const = default;
  auto operator<=>(const PatchOffset&) const = default;
};

inline PatchOffset random_offset(Index height, Index width, Index patch, Rng& rng) {
  if (patch < 1 || patch > std::min(height, width)) {
    throw GeometryError("patch " + std::to_string(patch) + " does not fit " + std::to_string(height) + "x" +
                        std::to_string(width));
  }
  const auto y = static_cast<Index>(rng.below(static_cast<std::uint64_t>(height - patch + 1)));
  const auto x = static_cast<Index>(rng.below(static_cast<std::uint64_t>(width - patch + 1)));
  return {y, x};
}

template <class T>
Tensor<T> crop(const Tensor<T>& x, PatchOffset at, Index height, Index width) {
  return slice(slice(x, 2, at.y, height), 3, at.x, width);
}

/// `count` seeded square crops; the epoch is folded into the seed so every epoch
/// sees different patches.
template <class T>
std::vector<std::pair<PatchOffset, Tensor<T>>> random_patches(const Tensor<T>& image, Index patch, Index count,
                                                              std::uint64_t seed, std::uint32_t epoch) {
  if (image.rank() != 4) throw DimensionError("random_patches: expected [N,C,H,W], got " + to_string(image.shape()));
  if (patch < 1 || patch > std::min(image.dim(2), image.dim(3))) {
    throw GeometryError("random_patches: patch " + std::to_string(patch) + " does not fit " +
                        std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)));
  }
  Rng rng(mix_seed(seed, epoch));
  std::vector<std::pair<PatchOffset, Tensor<T>>> out;
  for (Index i = 0; i < count; ++i) {
    const PatchOffset at = random_offset(image.dim(2), image.dim(3), patch, rng);
    out.emplace_back(at, crop(image, at, patch, patch));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Procedural clean scenes

/// Deterministic outdoor-like RGB scene [1,3,H,W] in [0.02, 0.98]: sky gradient,
/// textured ground, and a handful of shaded shapes.
template <class T = float>
Tensor<T> make_scene(Index height, Index width, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x7363656eULL));
  const Index plane = height * width;
  std::vector<double> img(static_cast<std::size_t>(3 * plane));
  auto px = [&](Index c, Index y, Index x) -> double& { return img[static_cast<std::size_t>(c * plane + y * width + x)]; };
  std::array<double, 3> sky_top{}, sky_low{}, ground{};
  for (std::size_t c = 0; c < 3; ++c) {
    sky_top[c] = rng.uniform(0.25, 0.7);
    sky_low[c] = std::min(1.0, sky_top[c] + rng.uniform(0.05, 0.3));
    ground[c] = rng.uniform(0.1, 0.6);
  }
  const double horizon = rng.uniform(0.3, 0.6) * static_cast<double>(height);
  const double fx = rng.uniform(0.2, 0.9), fy = rng.uniform(0.2, 0.9), phase = rng.uniform(0, 6.283);
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x) {
      const double yy = static_cast<double>(y);
      for (Index c = 0; c < 3; ++c) {
        const auto cc = static_cast<std::size_t>(c);
        if (yy < horizon) {
          const double a = yy / std::max(1.0, horizon);
          px(c, y, x) = sky_top[cc] * (1 - a) + sky_low[cc] * a;
        } else {
          const double a = (yy - horizon) / std::max(1.0, static_cast<double>(height) - horizon);
          const double texture = 0.08 * std::sin(fx * static_cast<double>(x) + phase) * std::cos(fy * yy);
          px(c, y, x) = ground[cc] * (0.7 + 0.5 * a) + texture;
        }
      }
    }
  const int shapes = 3 + static_cast<int>(rng.below(6));
  for (int s = 0; s < shapes; ++s) {
    std::array<double, 3> color{};
    for (auto& v : color) v = rng.uniform(0.05, 0.95);
    const double cy = rng.uniform(0, static_cast<double>(height)), cx = rng.uniform(0, static_cast<double>(width));
    const double ry = rng.uniform(0.05, 0.3) * static_cast<double>(height);
    const double rx = rng.uniform(0.05, 0.3) * static_cast<double>(width);
    const bool disc = rng.below(2) == 0;
    const double shade = rng.uniform(-0.3, 0.3);
    for (Index y = 0; y < height; ++y)
      for (Index x = 0; x < width; ++x) {
        const double dy = (static_cast<double>(y) - cy) / ry, dx = (static_cast<double>(x) - cx) / rx;
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (Index c = 0; c < 3; ++c) px(c, y, x) = color[static_cast<std::size_t>(c)] * (1.0 + shade * dx);
      }
  }
  Tensor<T> out({1, 3, height, width});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < img.size(); ++i) d[i] = static_cast<T>(std::clamp(img[i] + 0.02 * rng.uniform(-1, 1), 0.02, 0.98));
  return out;
}

// ---------------------------------------------------------------------------
// Sample generation

struct SynthConfig {
  std::array<double, 3> ambient{0.82, 0.78, 0.72};
  double beta_min = 0.4;
  double beta_max = 2.0;
  double smoothness = 0.75;
  bool augment = true;

  void validate() const {
    for (double a : ambient)
      if (!(a >= 0 && a <= 1)) throw ParameterError("ambient light must lie in [0, 1]");
    if (!(beta_min >= 0) || !(beta_max >= beta_min)) throw ParameterError("need 0 <= beta_min <= beta_max");
    if (!(smoothness >= 0 && smoothness <= 1)) throw ParameterError("smoothness must lie in [0, 1]");
  }
};

/// Pure function of (seed, epoch, idx): draws a clean source (procedural scene,
/// a clean image, or a real pair), crops a patch, synthesizes dust unless the pair
/// is real, and augments.
template <class T = float>
class SampleGenerator {
 public:
  SampleGenerator(SynthConfig cfg, std::uint64_t seed, Index patch) : cfg_(cfg), seed_(seed), patch_(patch) {
    cfg_.validate();
    if (patch < 2) throw GeometryError("patch must be >= 2");
  }

  void set_clean_images(std::vector<Tensor<T>> images) { clean_ = std::move(images); }
  void set_pairs(std::vector<std::pair<Tensor<T>, Tensor<T>>> pairs) { pairs_ = std::move(pairs); }
  Index patch() const { return patch_; }
  std::uint64_t seed() const { return seed_; }
  const SynthConfig& config() const { return cfg_; }

  PairedSample<T> sample(std::uint32_t epoch, std::uint32_t idx) const {
    Rng rng(mix_seed(seed_, epoch, idx));
    PairedSample<T> s;
    s.provenance.seed = seed_;
    s.provenance.epoch = epoch;
    s.provenance.idx = idx;
    if (!pairs_.empty()) {
      const auto& [clean, dusty] = pairs_[static_cast<std::size_t>(rng.below(pairs_.size()))];
      const PatchOffset at = random_offset(clean.dim(2), clean.dim(3), patch_, rng);
      s.clean = crop(clean, at, patch_, patch_);
      s.degraded = crop(dusty, at, patch_, patch_);
      s.provenance.beta = -1;  // real pair: no synthetic field
    } else {
      Tensor<T> source;
      if (clean_.empty()) {
        source = make_scene<T>(patch_ + patch_ / 4, patch_ + patch_ / 4, rng.next_u64());
      } else {
        source = clean_[static_cast<std::size_t>(rng.below(clean_.size()))];
      }
      const PatchOffset at = random_offset(source.dim(2), source.dim(3), patch_, rng);
      s.clean = crop(source, at, patch_, patch_);
      DustField<T> field;
      field.ambient = cfg_.ambient;
      field.beta = rng.uniform(cfg_.beta_min, cfg_.beta_max);
      field.depth = make_depth<T>(patch_, patch_, rng.next_u64(), cfg_.smoothness);
      s.degraded = apply_asm(s.clean, field);
      s.provenance.ambient = field.ambient;
      s.provenance.beta = field.beta;
    }
    if (cfg_.augment) s = augment(s, rng);
    return s;
  }

 private:
  SynthConfig cfg_;
  std::uint64_t seed_;
  Index patch_;
  std::vector<Tensor<T>> clean_;
  std::vector<std::pair<Tensor<T>, Tensor<T>>> pairs_;
};

/// Stacks samples into [B,3,h,w] clean and degraded batches.
template <class T>
std::pair<Tensor<T>, Tensor<T>> stack_batch(const std::vector<PairedSample<T>>& samples) {
  std::vector<Tensor<T>> clean, dusty;
  for (const auto& s : samples) {
    clean.push_back(s.clean);
    dusty.push_back(s.degraded);
  }
  NoGradGuard no_grad;
  return {concat(clean, 0), concat(dusty, 0)};
}

// ---------------------------------------------------------------------------
// Directories

inline bool is_image_file(const std::filesystem::path& p) {
  const std::string ext = detail::lower_ext(p.string());
  return ext == ".png" || ext == ".ppm";
}

/// Sorted image file names (not paths) directly inside `dir`.
inline std::vector<std::string> list_images(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("'" + dir + "' is not a readable directory");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir, ec))
    if (e.is_regular_file() && is_image_file(e.path())) names.push_back(e.path().filename().string());
  if (ec) throw IoError("cannot list '" + dir + "': " + ec.message());
  std::sort(names.begin(), names.end());
  return names;
}

template <class T>
struct ImagePair {
  std::string name;
  Tensor<T> clean;
  Tensor<T> dusty;  // undefined when only clean images exist
};

/// `<root>/clean/*` with optional filename-matched `<root>/dusty/*`.
template <class T = float>
std::vector<ImagePair<T>> load_pair_dir(const std::string& root) {
  namespace fs = std::filesystem;
  const std::string clean_dir = (fs::path(root) / "clean").string();
  const std::string dusty_dir = (fs::path(root) / "dusty").string();
  const bool has_dusty = fs::is_directory(dusty_dir);
  std::vector<ImagePair<T>> out;
  for (const auto& name : list_images(clean_dir)) {
    ImagePair<T> p{name, read_image<T>((fs::path(clean_dir) / name).string()), {}};
    if (has_dusty) {
      const auto dpath = (fs::path(dusty_dir) / name).string();
      if (!fs::exists(dpath)) throw IoError("'" + dpath + "': missing dusty counterpart of clean/" + name);
      p.dusty = read_image<T>(dpath);
      if (p.dusty.shape() != p.clean.shape()) throw IoError("'" + dpath + "': size differs from clean/" + name);
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace dustlab
