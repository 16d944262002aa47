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

// Model and training configuration with a canonical line-oriented text form:
//
//   # comment
//   key = value
//
// Lists are comma separated. Unknown keys are errors.

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dustlab/errors.hpp"
#include "dustlab/tensor.hpp"

namespace dustlab {

struct LossWeights {
  double l1 = 1.0;
  double ms_ssim = 0.4;
  double perceptual = 0.01;

  void validate() const {
    if (l1 < 0 || ms_ssim < 0 || perceptual < 0) throw ConfigError("loss weights must be non-negative");
    if (l1 == 0 && ms_ssim == 0 && perceptual == 0) throw ConfigError("at least one loss weight must be positive");
  }
  bool operator==(const LossWeights&) const = default;
};

struct ModelConfig {
  Index stages = 3;
  std::vector<Index> channels{32, 64, 128};
  std::vector<Index> blocks_per_stage{1, 1, 1};
  std::vector<Index> num_heads{2, 4, 8};
  Index window_size = 4;
  double mlp_ratio = 2.0;
  bool sfas_enabled = true;
  bool cifm_enabled = true;
  bool dcm_enabled = true;
  bool rel_bias_enabled = true;
  std::vector<Index> dcm_dilations{1, 2, 4};
  std::string wavelet_basis = "db1";
  LossWeights loss_weights;
  int precision = 32;
  std::uint64_t seed = 0;
  // Output head starts at zero so an untrained model is the identity map.
  bool zero_head = true;
  std::uint64_t perceptual_seed = 1234;

  void validate() const;
  Index input_multiple() const { return Index{1} << stages; }
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index batch_size = 4;
  Index patch = 64;
  Index steps = 500;
  Index eval_every = 100;
  std::uint64_t seed = 0;
  // Global-norm gradient clipping threshold; 0 disables.
  double clip_norm = 1.0;
  // Pairs held out of a training directory for evaluation.
  Index holdout = 4;
  // Size and patch extent of the synthetic evaluation set.
  Index eval_count = 32;
  Index eval_patch = 64;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be positive");
    if (batch_size < 1 || patch < 2 || steps < 0 || eval_every < 1 || holdout < 0 || eval_count < 0 || eval_patch < 2)
      throw ConfigError("batch_size/patch/steps/eval_every/holdout/eval_count/eval_patch out of range");
    if (clip_norm < 0) throw ConfigError("clip_norm must be >= 0");
  }
  bool operator==(const TrainConfig&) const = default;
};

inline void ModelConfig::validate() const {
  const auto n = static_cast<std::size_t>(stages);
  if (stages < 1) throw ConfigError("stages must be >= 1");
  if (channels.size() != n || blocks_per_stage.size() != n || num_heads.size() != n) {
    throw ConfigError("channels, blocks_per_stage and num_heads need one entry per stage (" + std::to_string(stages) +
                      ")");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (channels[i] < 1 || num_heads[i] < 1 || blocks_per_stage[i] < 1)
      throw ConfigError("stage " + std::to_string(i) + ": channels, heads and blocks must be positive");
    if (channels[i] % num_heads[i]) {
      throw ConfigError("stage " + std::to_string(i) + ": channels " + std::to_string(channels[i]) +
                        " not divisible by num_heads " + std::to_string(num_heads[i]));
    }
  }
  if (window_size < 1) throw ConfigError("window_size must be positive");
  if (!(mlp_ratio > 0)) throw ConfigError("mlp_ratio must be positive");
  if (dcm_dilations.empty()) throw ConfigError("dcm_dilations must be nonempty");
  for (std::size_t i = 0; i < dcm_dilations.size(); ++i) {
    if (dcm_dilations[i] < 1) throw ConfigError("dcm_dilations must be >= 1");
    if (i && dcm_dilations[i] <= dcm_dilations[i - 1]) throw ConfigError("dcm_dilations must be strictly increasing");
  }
  if (wavelet_basis != "db1" && wavelet_basis != "db2") throw ConfigError("wavelet_basis must be db1 or db2");
  if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
  loss_weights.validate();
}

namespace config_text {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Shortest text that round-trips the double exactly.
inline std::string format(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& text) {
  double v = 0;
  const std::string t = trim(text);
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw ConfigError("config key '" + key + "': not a number: '" + text + "'");
  return v;
}

inline std::int64_t parse_int(const std::string& key, const std::string& text) {
  std::int64_t v = 0;
  const std::string t = trim(text);
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw ConfigError("config key '" + key + "': not an integer: '" + text + "'");
  return v;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const std::string t = trim(text);
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size())
    throw ConfigError("config key '" + key + "': not an unsigned integer: '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "on") return true;
  if (t == "false" || t == "0" || t == "off") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + text + "'");
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::vector<Index> parse_index_list(const std::string& key, const std::string& text) {
  std::vector<Index> out;
  for (const auto& item : split_list(text)) out.push_back(parse_int(key, item));
  return out;
}

inline std::string join(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// key -> value, in file order; duplicate keys are errors.
inline std::vector<std::pair<std::string, std::string>> parse_lines(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::map<std::string, int> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    if (seen[key]++) throw ConfigError("config key '" + key + "' given twice");
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace config_text

/// Applies one key; returns false when the key is not a model key.
inline bool apply_model_key(ModelConfig& c, const std::string& key, const std::string& value) {
  using namespace config_text;
  if (key == "stages") c.stages = parse_int(key, value);
  else if (key == "channels") c.channels = parse_index_list(key, value);
  else if (key == "blocks_per_stage") c.blocks_per_stage = parse_index_list(key, value);
  else if (key == "num_heads") c.num_heads = parse_index_list(key, value);
  else if (key == "window_size") c.window_size = parse_int(key, value);
  else if (key == "mlp_ratio") c.mlp_ratio = parse_double(key, value);
  else if (key == "sfas_enabled") c.sfas_enabled = parse_bool(key, value);
  else if (key == "cifm_enabled") c.cifm_enabled = parse_bool(key, value);
  else if (key == "dcm_enabled") c.dcm_enabled = parse_bool(key, value);
  else if (key == "rel_bias_enabled") c.rel_bias_enabled = parse_bool(key, value);
  else if (key == "dcm_dilations") c.dcm_dilations = parse_index_list(key, value);
  else if (key == "wavelet_basis") c.wavelet_basis = trim(value);
  else if (key == "loss_weights") {
    const auto parts = split_list(value);
    if (parts.size() != 3) throw ConfigError("loss_weights needs three values (l1, ms_ssim, perceptual)");
    c.loss_weights = {parse_double(key, parts[0]), parse_double(key, parts[1]), parse_double(key, parts[2])};
  } else if (key == "precision") c.precision = static_cast<int>(parse_int(key, value));
  else if (key == "seed") c.seed = parse_u64(key, value);
  else if (key == "zero_head") c.zero_head = parse_bool(key, value);
  else if (key == "perceptual_seed") c.perceptual_seed = parse_u64(key, value);
  else return false;
  return true;
}

inline bool apply_train_key(TrainConfig& c, const std::string& key, const std::string& value) {
  using namespace config_text;
  if (key == "lr") c.lr = parse_double(key, value);
  else if (key == "beta1") c.beta1 = parse_double(key, value);
  else if (key == "beta2") c.beta2 = parse_double(key, value);
  else if (key == "eps") c.eps = parse_double(key, value);
  else if (key == "batch_size") c.batch_size = parse_int(key, value);
  else if (key == "patch") c.patch = parse_int(key, value);
  else if (key == "steps") c.steps = parse_int(key, value);
  else if (key == "eval_every") c.eval_every = parse_int(key, value);
  else if (key == "train_seed") c.seed = parse_u64(key, value);
  else if (key == "clip_norm") c.clip_norm = parse_double(key, value);
  else if (key == "holdout") c.holdout = parse_int(key, value);
  else if (key == "eval_count") c.eval_count = parse_int(key, value);
  else if (key == "eval_patch") c.eval_patch = parse_int(key, value);
  else return false;
  return true;
}

inline std::string to_text(const ModelConfig& c) {
  using config_text::format;
  using config_text::join;
  std::ostringstream os;
  os << "stages = " << c.stages << '\n'
     << "channels = " << join(c.channels) << '\n'
     << "blocks_per_stage = " << join(c.blocks_per_stage) << '\n'
     << "num_heads = " << join(c.num_heads) << '\n'
     << "window_size = " << c.window_size << '\n'
     << "mlp_ratio = " << format(c.mlp_ratio) << '\n'
     << "sfas_enabled = " << (c.sfas_enabled ? "true" : "false") << '\n'
     << "cifm_enabled = " << (c.cifm_enabled ? "true" : "false") << '\n'
     << "dcm_enabled = " << (c.dcm_enabled ? "true" : "false") << '\n'
     << "rel_bias_enabled = " << (c.rel_bias_enabled ? "true" : "false") << '\n'
     << "dcm_dilations = " << join(c.dcm_dilations) << '\n'
     << "wavelet_basis = " << c.wavelet_basis << '\n'
     << "loss_weights = " << format(c.loss_weights.l1) << ',' << format(c.loss_weights.ms_ssim) << ','
     << format(c.loss_weights.perceptual) << '\n'
     << "precision = " << c.precision << '\n'
     << "seed = " << c.seed << '\n'
     << "zero_head = " << (c.zero_head ? "true" : "false") << '\n'
     << "perceptual_seed = " << c.perceptual_seed << '\n';
  return os.str();
}

inline std::string to_text(const TrainConfig& c) {
  using config_text::format;
  std::ostringstream os;
  os << "lr = " << format(c.lr) << '\n'
     << "beta1 = " << format(c.beta1) << '\n'
     << "beta2 = " << format(c.beta2) << '\n'
     << "eps = " << format(c.eps) << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "patch = " << c.patch << '\n'
     << "steps = " << c.steps << '\n'
     << "eval_every = " << c.eval_every << '\n'
     << "train_seed = " << c.seed << '\n'
     << "clip_norm = " << format(c.clip_norm) << '\n'
     << "holdout = " << c.holdout << '\n'
     << "eval_count = " << c.eval_count << '\n'
     << "eval_patch = " << c.eval_patch << '\n';
  return os.str();
}

inline ModelConfig model_config_from_text(const std::string& text) {
  ModelConfig c;
  for (const auto& [k, v] : config_text::parse_lines(text)) {
    if (!apply_model_key(c, k, v)) throw ConfigError("unknown model config key '" + k + "'");
  }
  c.validate();
  return c;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Named presets: tiny, default, table2 (parameter-budget target), paper (published training recipe).
inline RunConfig preset(const std::string& name) {
  RunConfig rc;
  if (name == "default") {
    return rc;
  }
  if (name == "tiny") {
    rc.model.stages = 2;
    rc.model.channels = {8, 16};
    rc.model.blocks_per_stage = {1, 1};
    rc.model.num_heads = {2, 2};
    rc.model.dcm_dilations = {1, 2};
    rc.train.steps = 50;
    rc.train.batch_size = 2;
    rc.train.patch = 32;
    rc.train.eval_every = 25;
    rc.train.eval_count = 4;
    rc.train.eval_patch = 32;
    return rc;
  }
  if (name == "table2" || name == "paper") {
    rc.model.stages = 3;
    // Tuned with count_params: 1,755,607 parameters, 4.21 GFLOPs at 256×256.
    rc.model.channels = {16, 32, 80};
    rc.model.blocks_per_stage = {1, 2, 2};
    rc.model.num_heads = {2, 4, 4};
    rc.model.window_size = 8;
    rc.model.mlp_ratio = 2.0;
    rc.model.dcm_dilations = {1, 2, 4};
    if (name == "paper") {
      rc.train.batch_size = 16;
      rc.train.patch = 256;
      rc.train.steps = 150 * 1000;
      rc.train.eval_every = 1000;
      rc.train.eval_patch = 256;
    }
    return rc;
  }
  throw ConfigError("unknown config preset '" + name + "' (expected tiny, default, table2 or paper)");
}

/// Preset name, or a config file whose optional `preset = name` line selects the base.
inline RunConfig load_run_config(const std::string& name_or_path) {
  for (const char* p : {"tiny", "default", "table2", "paper"}) {
    if (name_or_path == p) {
      RunConfig rc = preset(p);
      rc.model.validate();
      rc.train.validate();
      return rc;
    }
  }
  std::ifstream in(name_or_path);
  if (!in) throw IoError("cannot read config file '" + name_or_path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  auto lines = config_text::parse_lines(buf.str());
  RunConfig rc;
  for (const auto& [k, v] : lines) {
    if (k == "preset") rc = preset(config_text::trim(v));
  }
  for (const auto& [k, v] : lines) {
    if (k == "preset") continue;
    if (!apply_model_key(rc.model, k, v) && !apply_train_key(rc.train, k, v))
      throw ConfigError("unknown config key '" + k + "' in " + name_or_path);
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

/// FNV-1a over the canonical text; tags run-log records.
inline std::uint64_t config_hash(const std::string& canonical) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace dustlab
