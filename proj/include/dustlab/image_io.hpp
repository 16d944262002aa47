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

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dustlab/errors.hpp"
#include "dustlab/tensor.hpp"

namespace dustlab {

/// 8-bit RGB raster, row-major interleaved.
struct Image8 {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> rgb;
};

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline std::string lower_ext(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

inline std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Image8 decode_ppm(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  std::size_t pos = 2;
  auto next_token = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    long v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start || v > (1L << 24)) throw IoError("'" + path + "': malformed PPM header");
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (w <= 0 || h <= 0) throw IoError("'" + path + "': empty PPM image");
  if (maxval != 255) throw IoError("'" + path + "': only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw IoError("'" + path + "': malformed PPM header");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - pos < need) throw IoError("'" + path + "': truncated PPM pixel data");
  Image8 img{h, w, std::vector<std::uint8_t>(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                             bytes.begin() + static_cast<std::ptrdiff_t>(pos + need))};
  return img;
}

inline Image8 decode_png(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw IoError("'" + path + "': " + image.message);
  }
  // Decode as RGBA and drop alpha, so transparent pixels keep their stored color.
  image.format = PNG_FORMAT_RGBA;
  std::vector<std::uint8_t> rgba(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgba.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("'" + path + "': " + msg);
  }
  Image8 img{static_cast<Index>(image.height), static_cast<Index>(image.width), {}};
  img.rgb.resize(static_cast<std::size_t>(img.height * img.width * 3));
  for (std::size_t i = 0, n = img.rgb.size() / 3; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) img.rgb[i * 3 + c] = rgba[i * 4 + c];
  return img;
}

}  // namespace detail

/// Reads PNG (8-bit gray/RGB/RGBA, alpha dropped) or binary PPM (P6), by content.
inline Image8 read_image8(const std::string& path) {
  const auto bytes = detail::slurp(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return detail::decode_png(bytes, path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return detail::decode_ppm(bytes, path);
  throw IoError("'" + path + "': unsupported image format (expected PNG or binary PPM)");
}

/// Writes by extension: .png or .ppm.
inline void write_image8(const Image8& img, const std::string& path) {
  const std::string ext = detail::lower_ext(path);
  if (ext == ".ppm") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!out) throw IoError("write failed for '" + path + "'");
    return;
  }
  if (ext != ".png") throw IoError("'" + path + "': unsupported output format (use .png or .ppm)");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, img.rgb.data(), 0, nullptr)) {
    throw IoError("cannot write '" + path + "': " + image.message);
  }
}

template <class T = float>
Tensor<T> to_tensor(const Image8& img) {
  Tensor<T> t({1, 3, img.height, img.width});
  auto d = t.mutable_data();
  const Index plane = img.height * img.width;
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c)
      d[static_cast<std::size_t>(c * plane + i)] = static_cast<T>(img.rgb[static_cast<std::size_t>(i * 3 + c)]) / T(255);
  return t;
}

/// Quantizes a [1,3,H,W] or [3,H,W] tensor (clamped to [0,1], round half away from zero).
template <class T>
Image8 to_image8(const Tensor<T>& t) {
  const Shape& s = t.shape();
  if (!((s.size() == 4 && s[0] == 1 && s[1] == 3) || (s.size() == 3 && s[0] == 3))) {
    throw DimensionError("expected an RGB image [1,3,H,W], got " + to_string(s));
  }
  Image8 img{s[s.size() - 2], s[s.size() - 1], {}};
  const Index plane = img.height * img.width;
  img.rgb.resize(static_cast<std::size_t>(plane * 3));
  auto d = t.data();
  for (Index i = 0; i < plane; ++i)
    for (Index c = 0; c < 3; ++c)
      img.rgb[static_cast<std::size_t>(i * 3 + c)] = quantize8(static_cast<double>(d[static_cast<std::size_t>(c * plane + i)]));
  return img;
}

template <class T = float>
Tensor<T> read_image(const std::string& path) {
  return to_tensor<T>(read_image8(path));
}

template <class T>
void write_image(const Tensor<T>& t, const std::string& path) {
  write_image8(to_image8(t), path);
}

/// Snaps values to the 8-bit grid, as if written and read back.
template <class T>
Tensor<T> quantize_like_io(const Tensor<T>& t) {
  Tensor<T> out(t.shape());
  auto src = t.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(quantize8(static_cast<double>(src[i]))) / T(255);
  return out;
}

}  // namespace dustlab
