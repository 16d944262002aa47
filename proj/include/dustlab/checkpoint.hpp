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

// Checkpoint layout (all integers little-endian):
//
//   "DDNCKPT1"                      8-byte magic
//   u32 version                     currently 1
//   u64 n, n bytes                  model config, canonical `key = value` text
//   u64 step                        optimizer step counter
//   u64 n, n bytes                  free-form metadata text
//   u32 scalar_bytes                4 (float32) or 8 (float64)
//   u64 count                       number of parameters
//   count x {
//     u32 n, n bytes                name
//     u32 rank, rank x u64          shape
//     numel x scalar                values
//   }
//   u8 has_moments
//   [count x {numel x scalar m, numel x scalar v}]   same order as the table
//   u64 crc                         CRC-64/XZ of every preceding byte

#include <boost/crc.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dustlab/config.hpp"
#include "dustlab/errors.hpp"
#include "dustlab/network.hpp"
#include "dustlab/optim.hpp"

namespace dustlab {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'D', 'N', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, ~0ULL, ~0ULL, true, true>;

inline std::uint64_t crc64(const std::uint8_t* data, std::size_t n) {
  Crc64 crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

struct ParamBlob {
  std::string name;
  Shape shape;
  std::vector<std::uint8_t> raw;  // little-endian scalars
};

/// Decoded checkpoint file, validated against its checksum.
struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::uint64_t step = 0;
  std::string meta;
  std::uint32_t scalar_bytes = 4;
  std::vector<ParamBlob> params;
  // Per-parameter (m, v) raw blobs; empty when no optimizer state was saved.
  std::vector<std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>>> moments;

  ModelConfig model_config() const { return model_config_from_text(config_text); }
  Index scalar_count() const {
    Index n = 0;
    for (const auto& p : params) n += numel_of(p.shape);
    return n;
  }
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void put_string64(const std::string& s) {
    put<std::uint64_t>(s.size());
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t end, std::string path)
      : bytes_(bytes), end_(end), path_(std::move(path)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(bytes_[pos_++]) << (8 * i));
    return v;
  }
  std::vector<std::uint8_t> get_bytes(std::uint64_t n) {
    need(n);
    std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::string get_string(std::uint64_t n) {
    auto b = get_bytes(n);
    return {b.begin(), b.end()};
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint '" + path_ + "' is malformed: record runs past the end");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string path_;
};

template <class T>
std::vector<std::uint8_t> encode_scalars(std::span<const T> values) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  ByteWriter w;
  w.bytes.reserve(values.size() * sizeof(T));
  for (T v : values) w.put(std::bit_cast<U>(v));
  return std::move(w.bytes);
}

template <class T>
void decode_scalars(const std::vector<std::uint8_t>& raw, std::span<T> out) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  ByteReader r(raw, raw.size(), "<blob>");
  for (auto& v : out) v = std::bit_cast<T>(r.template get<U>());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Serializes the model (and optionally Adam moments) to bytes.
template <class T>
std::vector<std::uint8_t> encode_checkpoint(const Model<T>& model, const AdamState<T>* optimizer = nullptr,
                                            const std::string& meta = "") {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string64(to_text(model.config()));
  w.put<std::uint64_t>(optimizer ? optimizer->step : 0);
  w.put_string64(meta);
  w.put<std::uint32_t>(sizeof(T));
  const auto& params = model.params().all();
  w.put<std::uint64_t>(params.size());
  for (const auto& p : params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.rank()));
    for (Index d : p.tensor.shape()) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    auto raw = detail::encode_scalars<T>(p.tensor.data());
    w.put_bytes(raw.data(), raw.size());
  }
  w.put<std::uint8_t>(optimizer ? 1 : 0);
  if (optimizer) {
    for (const auto& p : params) {
      const auto n = static_cast<std::size_t>(p.tensor.numel());
      for (const auto* table : {&optimizer->m, &optimizer->v}) {
        auto it = table->find(p.name);
        std::vector<T> values = it == table->end() ? std::vector<T>(n, T(0)) : it->second;
        if (values.size() != n) throw DimensionError("optimizer moment for '" + p.name + "' has the wrong size");
        auto raw = detail::encode_scalars<T>(std::span<const T>(values));
        w.put_bytes(raw.data(), raw.size());
      }
    }
  }
  w.put<std::uint64_t>(crc64(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, const AdamState<T>* optimizer = nullptr,
                     const std::string& meta = "") {
  const auto bytes = encode_checkpoint(model, optimizer, meta);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

inline CheckpointFile decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  if (bytes.size() < kCheckpointMagic.size() ||
      std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const std::size_t body = bytes.size() >= 16 ? bytes.size() - 8 : 0;
  std::uint64_t stored = 0;
  if (body >= kCheckpointMagic.size()) {
    for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  }
  if (body < kCheckpointMagic.size() || crc64(bytes.data(), body) != stored) {
    throw CheckpointError("checksum mismatch in checkpoint '" + path + "' (truncated or corrupted)");
  }
  detail::ByteReader r(bytes, body, path);
  r.get_bytes(kCheckpointMagic.size());
  CheckpointFile f;
  f.version = r.get<std::uint32_t>();
  if (f.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint '" + path + "' has version " + std::to_string(f.version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  f.config_text = r.get_string(r.get<std::uint64_t>());
  f.step = r.get<std::uint64_t>();
  f.meta = r.get_string(r.get<std::uint64_t>());
  f.scalar_bytes = r.get<std::uint32_t>();
  if (f.scalar_bytes != 4 && f.scalar_bytes != 8)
    throw CheckpointError("checkpoint '" + path + "' has unsupported scalar size " + std::to_string(f.scalar_bytes));
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    ParamBlob p;
    p.name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("checkpoint '" + path + "': implausible rank for '" + p.name + "'");
    for (std::uint32_t d = 0; d < rank; ++d) p.shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
    p.raw = r.get_bytes(static_cast<std::uint64_t>(numel_of(p.shape)) * f.scalar_bytes);
    f.params.push_back(std::move(p));
  }
  if (r.get<std::uint8_t>()) {
    for (const auto& p : f.params) {
      const auto n = static_cast<std::uint64_t>(numel_of(p.shape)) * f.scalar_bytes;
      auto m = r.get_bytes(n);
      auto v = r.get_bytes(n);
      f.moments.emplace_back(std::move(m), std::move(v));
    }
  }
  if (r.pos() != body) throw CheckpointError("checkpoint '" + path + "' has trailing bytes");
  return f;
}

inline CheckpointFile read_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file_bytes(path), path);
}

/// Copies checkpoint parameters into `model`. Every name and shape is checked
/// before the first write, so a failed load leaves the model untouched.
template <class T>
void apply_checkpoint(Model<T>& model, const CheckpointFile& f) {
  if (f.scalar_bytes != sizeof(T)) {
    throw CheckpointError("checkpoint holds " + std::to_string(f.scalar_bytes * 8) + "-bit scalars, model uses " +
                          std::to_string(sizeof(T) * 8) + "-bit");
  }
  auto& store = model.params();
  for (const auto& p : f.params) {
    if (!store.contains(p.name)) throw CheckpointError("unknown parameter '" + p.name + "' in checkpoint");
    const auto& target = store.get(p.name);
    if (target.shape() != p.shape) {
      throw CheckpointError("shape mismatch for parameter '" + p.name + "': checkpoint " + to_string(p.shape) +
                            ", model " + to_string(target.shape()));
    }
  }
  if (f.params.size() != store.size()) {
    for (const auto& p : store.all()) {
      bool found = false;
      for (const auto& b : f.params) found = found || b.name == p.name;
      if (!found) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    }
  }
  for (const auto& p : f.params) {
    Tensor<T> t = store.get(p.name);
    detail::decode_scalars<T>(p.raw, t.mutable_data());
  }
}

template <class T>
AdamState<T> optimizer_state(const CheckpointFile& f) {
  AdamState<T> s;
  s.step = f.step;
  if (f.scalar_bytes != sizeof(T)) throw CheckpointError("optimizer state scalar size mismatch");
  for (std::size_t i = 0; i < f.moments.size(); ++i) {
    const auto n = static_cast<std::size_t>(numel_of(f.params[i].shape));
    std::vector<T> m(n), v(n);
    detail::decode_scalars<T>(f.moments[i].first, std::span<T>(m));
    detail::decode_scalars<T>(f.moments[i].second, std::span<T>(v));
    s.m[f.params[i].name] = std::move(m);
    s.v[f.params[i].name] = std::move(v);
  }
  return s;
}

/// Builds a model from the checkpoint's own config and loads its parameters.
template <class T>
Model<T> load_model(const CheckpointFile& f) {
  Model<T> model(f.model_config());
  apply_checkpoint(model, f);
  return model;
}

template <class T>
Model<T> load_model(const std::string& path) {
  return load_model<T>(read_checkpoint(path));
}

/// Parses `key=value` lines of the metadata section.
inline std::optional<std::string> checkpoint_meta(const CheckpointFile& f, const std::string& key) {
  std::istringstream in(f.meta);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && line.substr(0, eq) == key) return line.substr(eq + 1);
  }
  return std::nullopt;
}

}  // namespace dustlab
