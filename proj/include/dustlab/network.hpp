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

// Encoder-decoder restoration network: wavelet-downsampling transformer blocks,
// a wavelet-domain dilated-convolution bottleneck, and cross-attention fusion of
// encoder features into the decoder.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dustlab/attention.hpp"
#include "dustlab/config.hpp"
#include "dustlab/ops.hpp"
#include "dustlab/rng.hpp"
#include "dustlab/wavelet.hpp"

namespace dustlab {

enum class Init { kZeros, kOnes, kTruncNormal, kFanInUniform };

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::string init_spec;
};

/// Named trainable tensors in creation order.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape, Init init, Rng& rng) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Tensor<T> t(shape);
    auto data = t.mutable_data();
    std::string spec;
    switch (init) {
      case Init::kZeros:
        spec = "zeros";
        break;
      case Init::kOnes:
        std::fill(data.begin(), data.end(), T(1));
        spec = "ones";
        break;
      case Init::kTruncNormal:
        for (auto& v : data) v = static_cast<T>(rng.truncated_normal(0.02));
        spec = "trunc_normal(std=0.02)";
        break;
      case Init::kFanInUniform: {
        const Index fan_in = numel_of(shape) / shape[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
        spec = "uniform(bound=1/sqrt(" + std::to_string(fan_in) + "))";
        break;
      }
    }
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back({name, t, spec});
    return t;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return params_[it->second].tensor;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Building blocks

template <class T>
struct FormerBlockParams {
  // 1×1 conv applied after the DWT (encoder, first block) or before the IDWT
  // (decoder, last block); undefined otherwise.
  Tensor<T> resample_weight, resample_bias;
  Tensor<T> norm1_gain, norm1_offset;
  SelfAttentionParams<T> attn;
  bool sfas_enabled = true;
  SfasParams<T> sfas;
  Tensor<T> fuse_weight, fuse_bias;
  Tensor<T> norm2_gain, norm2_offset;
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;  // 1×1 convs
};

struct BlockGeometry {
  Index window = 4;
  Index shift = 0;
  Index num_heads = 1;
};

/// Pre-norm token mixer (window attention ‖ conv branch, fused) and MLP, each
/// wrapped in a residual connection.
template <class T>
Tensor<T> former_mixer(const Tensor<T>& x, const FormerBlockParams<T>& p, const BlockGeometry& geom) {
  const Index c = x.dim(1);
  const auto heads = AttentionHeads::for_channels(c, geom.num_heads);
  const auto grid = WindowGrid::make(x.dim(2), x.dim(3), geom.window, geom.shift);
  Tensor<T> n1 = layer_norm(x, 1, p.norm1_gain, p.norm1_offset);
  Tensor<T> mixed = window_mhsa(n1, grid, heads, p.attn);
  if (p.sfas_enabled) mixed = sfas_fuse(mixed, sfas_branch(n1, p.sfas), p.fuse_weight, p.fuse_bias);
  Tensor<T> h = add(x, mixed);
  Tensor<T> n2 = layer_norm(h, 1, p.norm2_gain, p.norm2_offset);
  Tensor<T> m = conv2d(gelu(conv2d(n2, p.fc1_weight, p.fc1_bias)), p.fc2_weight, p.fc2_bias);
  return add(h, m);
}

/// Encoder block. The first block of a stage halves resolution with a DWT, packs the
/// four bands along channels and projects them with a 1×1 conv before mixing.
template <class T>
Tensor<T> dwtformer_block(const Tensor<T>& x, const FormerBlockParams<T>& p, const BlockGeometry& geom,
                          const WaveletBasis& basis, bool is_first_in_stage) {
  Tensor<T> h = x;
  if (is_first_in_stage) {
    if (x.dim(2) % 2 || x.dim(3) % 2) {
      throw GeometryError("dwtformer_block: odd extent " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
    }
    h = conv2d(dwt2_packed(x, basis), p.resample_weight, p.resample_bias);
  }
  return former_mixer(h, p, geom);
}

/// Decoder block. The last block of a stage projects to 4·C_out channels, unpacks
/// them as subbands and doubles resolution with an IDWT.
template <class T>
Tensor<T> idwtformer_block(const Tensor<T>& x, const FormerBlockParams<T>& p, const BlockGeometry& geom,
                           const WaveletBasis& basis, bool is_last_in_stage) {
  Tensor<T> h = former_mixer(x, p, geom);
  if (!is_last_in_stage) return h;
  return idwt2_packed(conv2d(h, p.resample_weight, p.resample_bias), basis);
}

template <class T>
struct CifmParams {
  Tensor<T> query_norm_gain, query_norm_offset;
  Tensor<T> keyval_norm_gain, keyval_norm_offset;
  CrossAttentionParams<T> attn;
  Tensor<T> fuse_weight, fuse_bias;  // [C, 2C, 1, 1]
};

/// Cross-level fusion: a sigmoid cross-attention gate (queries from the decoder)
/// filters the encoder feature, which is then fused with the decoder feature.
template <class T>
Tensor<T> cifm(const Tensor<T>& encoder_feat, const Tensor<T>& decoder_feat, const CifmParams<T>& p,
               Index num_heads, Index window) {
  if (encoder_feat.dim(1) != decoder_feat.dim(1)) {
    throw DimensionError("cifm: encoder channels " + std::to_string(encoder_feat.dim(1)) + " != decoder channels " +
                         std::to_string(decoder_feat.dim(1)));
  }
  Tensor<T> enc = encoder_feat;
  if (enc.dim(2) != decoder_feat.dim(2) || enc.dim(3) != decoder_feat.dim(3)) {
    const Index fy = decoder_feat.dim(2) / enc.dim(2), fx = decoder_feat.dim(3) / enc.dim(3);
    if (fy != fx || fy < 1 || enc.dim(2) * fy != decoder_feat.dim(2) || enc.dim(3) * fx != decoder_feat.dim(3)) {
      throw GeometryError("cifm: encoder map " + to_string(enc.shape()) + " cannot be resampled to " +
                          to_string(decoder_feat.shape()));
    }
    enc = upsample_nearest(enc, fy);
  }
  const auto heads = AttentionHeads::for_channels(decoder_feat.dim(1), num_heads);
  Tensor<T> q = layer_norm(decoder_feat, 1, p.query_norm_gain, p.query_norm_offset);
  Tensor<T> kv = layer_norm(enc, 1, p.keyval_norm_gain, p.keyval_norm_offset);
  Tensor<T> gate = mhca(q, kv, heads, p.attn, window);
  Tensor<T> filtered = mul(gate, enc);
  return conv2d(concat<T>({filtered, decoder_feat}, 1), p.fuse_weight, p.fuse_bias);
}

template <class T>
struct DcmParams {
  std::vector<Tensor<T>> dilated_weight, dilated_bias;  // [C, 4C, 3, 3] per rate
  Tensor<T> pointwise_weight, pointwise_bias;           // [C, 4C, 1, 1]
  Tensor<T> fuse_weight, fuse_bias;                     // [4C, (rates+1)·C, 1, 1]
};

/// Wavelet-domain pyramid of dilated convolutions with a residual connection.
template <class T>
Tensor<T> dcm(const Tensor<T>& x, const DcmParams<T>& p, const std::vector<Index>& dilations,
              const WaveletBasis& basis) {
  if (p.dilated_weight.size() != dilations.size()) throw ConfigError("dcm: one weight per dilation rate required");
  Tensor<T> bands = dwt2_packed(x, basis);
  std::vector<Tensor<T>> branches;
  for (std::size_t i = 0; i < dilations.size(); ++i) {
    const Index d = dilations[i];
    branches.push_back(relu(conv2d(bands, p.dilated_weight[i], p.dilated_bias[i], 1, d, d)));
  }
  branches.push_back(relu(conv2d(bands, p.pointwise_weight, p.pointwise_bias)));
  Tensor<T> fused = conv2d(concat(branches, 1), p.fuse_weight, p.fuse_bias);
  return add(x, idwt2_packed(fused, basis, x.dim(2), x.dim(3)));
}

// ---------------------------------------------------------------------------
// Full model

template <class T>
class Model {
 public:
  explicit Model(ModelConfig config) : config_(std::move(config)), basis_(WaveletBasis::named(config_.wavelet_basis)) {
    config_.validate();
    build();
  }

  const ModelConfig& config() const { return config_; }
  const WaveletBasis& basis() const { return basis_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  Index count_params() const { return params_.scalar_count(); }

  BlockGeometry geometry(Index stage, Index block) const {
    const Index w = config_.window_size;
    return {w, block % 2 ? w / 2 : 0, config_.num_heads[static_cast<std::size_t>(stage)]};
  }

  const FormerBlockParams<T>& encoder_block(Index stage, Index block) const {
    return encoder_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(block)];
  }
  const FormerBlockParams<T>& decoder_block(Index stage, Index block) const {
    return decoder_[static_cast<std::size_t>(stage)][static_cast<std::size_t>(block)];
  }
  const CifmParams<T>& cifm_params(Index stage) const { return cifm_[static_cast<std::size_t>(stage)]; }
  const DcmParams<T>& dcm_params() const { return dcm_; }

  /// dusty [N,3,H,W] with H, W multiples of 2^stages -> restored [N,3,H,W] in [0,1].
  Tensor<T> forward(const Tensor<T>& dusty) const {
    if (dusty.rank() != 4 || dusty.dim(1) != 3) {
      throw DimensionError("forward: expected [N,3,H,W], got " + to_string(dusty.shape()));
    }
    const Index m = config_.input_multiple();
    if (dusty.dim(2) % m || dusty.dim(3) % m) {
      throw GeometryError("forward: extents " + std::to_string(dusty.dim(2)) + "x" + std::to_string(dusty.dim(3)) +
                          " must be multiples of " + std::to_string(m));
    }
    const Index stages = config_.stages;
    Tensor<T> h = conv2d(dusty, stem_weight_, stem_bias_, 1, 1, 1);
    std::vector<Tensor<T>> skips;
    for (Index s = 0; s < stages; ++s) {
      const Index blocks = config_.blocks_per_stage[static_cast<std::size_t>(s)];
      for (Index b = 0; b < blocks; ++b) h = dwtformer_block(h, encoder_block(s, b), geometry(s, b), basis_, b == 0);
      skips.push_back(h);
    }
    if (config_.dcm_enabled) h = dcm(h, dcm_, config_.dcm_dilations, basis_);
    for (Index s = stages - 1; s >= 0; --s) {
      if (config_.cifm_enabled) {
        h = cifm(skips[static_cast<std::size_t>(s)], h, cifm_params(s),
                 config_.num_heads[static_cast<std::size_t>(s)], config_.window_size);
      }
      const Index blocks = config_.blocks_per_stage[static_cast<std::size_t>(s)];
      for (Index b = 0; b < blocks; ++b)
        h = idwtformer_block(h, decoder_block(s, b), geometry(s, b), basis_, b == blocks - 1);
    }
    Tensor<T> residual = conv2d(h, head_weight_, head_bias_, 1, 1, 1);
    return clamp(add(dusty, residual), T(0), T(1));
  }

  /// FLOPs of one forward pass on a 1×3×H×W input (conv, linear and attention
  /// matmuls; 2 per multiply-add; biases, norms, activations and wavelets excluded).
  std::int64_t count_flops(Index height, Index width) const {
    NoGradGuard no_grad;
    FlopCounter counter;
    forward(Tensor<T>::zeros({1, 3, height, width}));
    return counter.count();
  }

 private:
  void build() {
    Rng rng(config_.seed);
    const Index stages = config_.stages;
    const Index c0 = config_.channels[0];
    stem_weight_ = params_.add("stem.weight", {c0, 3, 3, 3}, Init::kFanInUniform, rng);
    stem_bias_ = params_.add("stem.bias", {c0}, Init::kZeros, rng);
    Index in_c = c0;
    encoder_.resize(static_cast<std::size_t>(stages));
    for (Index s = 0; s < stages; ++s) {
      const Index c = config_.channels[static_cast<std::size_t>(s)];
      for (Index b = 0; b < config_.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
        const std::string prefix = "enc.stage" + std::to_string(s) + ".block" + std::to_string(b) + ".";
        auto p = make_block(prefix, c, config_.num_heads[static_cast<std::size_t>(s)], rng);
        if (b == 0) {
          p.resample_weight = params_.add(prefix + "down.weight", {c, 4 * in_c, 1, 1}, Init::kFanInUniform, rng);
          p.resample_bias = params_.add(prefix + "down.bias", {c}, Init::kZeros, rng);
        }
        encoder_[static_cast<std::size_t>(s)].push_back(std::move(p));
      }
      in_c = c;
    }
    if (config_.dcm_enabled) {
      const Index c = config_.channels.back();
      for (std::size_t i = 0; i < config_.dcm_dilations.size(); ++i) {
        const std::string prefix = "dcm.dilated" + std::to_string(i) + ".";
        dcm_.dilated_weight.push_back(params_.add(prefix + "weight", {c, 4 * c, 3, 3}, Init::kFanInUniform, rng));
        dcm_.dilated_bias.push_back(params_.add(prefix + "bias", {c}, Init::kZeros, rng));
      }
      dcm_.pointwise_weight = params_.add("dcm.pointwise.weight", {c, 4 * c, 1, 1}, Init::kFanInUniform, rng);
      dcm_.pointwise_bias = params_.add("dcm.pointwise.bias", {c}, Init::kZeros, rng);
      const Index branches = static_cast<Index>(config_.dcm_dilations.size()) + 1;
      dcm_.fuse_weight = params_.add("dcm.fuse.weight", {4 * c, branches * c, 1, 1}, Init::kFanInUniform, rng);
      dcm_.fuse_bias = params_.add("dcm.fuse.bias", {4 * c}, Init::kZeros, rng);
    }
    decoder_.resize(static_cast<std::size_t>(stages));
    cifm_.resize(static_cast<std::size_t>(stages));
    for (Index s = stages - 1; s >= 0; --s) {
      const Index c = config_.channels[static_cast<std::size_t>(s)];
      const Index out_c = s == 0 ? c0 : config_.channels[static_cast<std::size_t>(s - 1)];
      const std::string stage = "dec.stage" + std::to_string(s) + ".";
      if (config_.cifm_enabled) {
        auto& p = cifm_[static_cast<std::size_t>(s)];
        p.query_norm_gain = params_.add(stage + "cifm.query_norm.gain", {c}, Init::kOnes, rng);
        p.query_norm_offset = params_.add(stage + "cifm.query_norm.offset", {c}, Init::kZeros, rng);
        p.keyval_norm_gain = params_.add(stage + "cifm.keyval_norm.gain", {c}, Init::kOnes, rng);
        p.keyval_norm_offset = params_.add(stage + "cifm.keyval_norm.offset", {c}, Init::kZeros, rng);
        p.attn.q_weight = params_.add(stage + "cifm.q.weight", {c, c}, Init::kTruncNormal, rng);
        p.attn.q_bias = params_.add(stage + "cifm.q.bias", {c}, Init::kZeros, rng);
        p.attn.kv_weight = params_.add(stage + "cifm.kv.weight", {2 * c, c}, Init::kTruncNormal, rng);
        p.attn.kv_bias = params_.add(stage + "cifm.kv.bias", {2 * c}, Init::kZeros, rng);
        p.attn.proj_weight = params_.add(stage + "cifm.proj.weight", {c, c}, Init::kTruncNormal, rng);
        p.attn.proj_bias = params_.add(stage + "cifm.proj.bias", {c}, Init::kZeros, rng);
        p.fuse_weight = params_.add(stage + "cifm.fuse.weight", {c, 2 * c, 1, 1}, Init::kFanInUniform, rng);
        p.fuse_bias = params_.add(stage + "cifm.fuse.bias", {c}, Init::kZeros, rng);
      }
      const Index blocks = config_.blocks_per_stage[static_cast<std::size_t>(s)];
      for (Index b = 0; b < blocks; ++b) {
        const std::string prefix = stage + "block" + std::to_string(b) + ".";
        auto p = make_block(prefix, c, config_.num_heads[static_cast<std::size_t>(s)], rng);
        if (b == blocks - 1) {
          p.resample_weight = params_.add(prefix + "up.weight", {4 * out_c, c, 1, 1}, Init::kFanInUniform, rng);
          p.resample_bias = params_.add(prefix + "up.bias", {4 * out_c}, Init::kZeros, rng);
        }
        decoder_[static_cast<std::size_t>(s)].push_back(std::move(p));
      }
    }
    const Init head_init = config_.zero_head ? Init::kZeros : Init::kFanInUniform;
    head_weight_ = params_.add("head.weight", {3, c0, 3, 3}, head_init, rng);
    head_bias_ = params_.add("head.bias", {3}, Init::kZeros, rng);
  }

  FormerBlockParams<T> make_block(const std::string& prefix, Index c, Index heads, Rng& rng) {
    FormerBlockParams<T> p;
    const Index w = config_.window_size;
    const auto hidden = static_cast<Index>(std::lround(config_.mlp_ratio * static_cast<double>(c)));
    p.norm1_gain = params_.add(prefix + "norm1.gain", {c}, Init::kOnes, rng);
    p.norm1_offset = params_.add(prefix + "norm1.offset", {c}, Init::kZeros, rng);
    p.attn.qkv_weight = params_.add(prefix + "attn.qkv.weight", {3 * c, c}, Init::kTruncNormal, rng);
    p.attn.qkv_bias = params_.add(prefix + "attn.qkv.bias", {3 * c}, Init::kZeros, rng);
    p.attn.proj_weight = params_.add(prefix + "attn.proj.weight", {c, c}, Init::kTruncNormal, rng);
    p.attn.proj_bias = params_.add(prefix + "attn.proj.bias", {c}, Init::kZeros, rng);
    if (config_.rel_bias_enabled) {
      p.attn.rel_bias_table =
          params_.add(prefix + "attn.rel_bias", {(2 * w - 1) * (2 * w - 1), heads}, Init::kTruncNormal, rng);
    }
    p.sfas_enabled = config_.sfas_enabled;
    if (config_.sfas_enabled) {
      p.sfas.conv1_weight = params_.add(prefix + "sfas.conv1.weight", {c, c, 3, 3}, Init::kFanInUniform, rng);
      p.sfas.conv1_bias = params_.add(prefix + "sfas.conv1.bias", {c}, Init::kZeros, rng);
      p.sfas.conv2_weight = params_.add(prefix + "sfas.conv2.weight", {c, c, 3, 3}, Init::kFanInUniform, rng);
      p.sfas.conv2_bias = params_.add(prefix + "sfas.conv2.bias", {c}, Init::kZeros, rng);
      p.fuse_weight = params_.add(prefix + "sfas.fuse.weight", {c, 2 * c, 1, 1}, Init::kFanInUniform, rng);
      p.fuse_bias = params_.add(prefix + "sfas.fuse.bias", {c}, Init::kZeros, rng);
    }
    p.norm2_gain = params_.add(prefix + "norm2.gain", {c}, Init::kOnes, rng);
    p.norm2_offset = params_.add(prefix + "norm2.offset", {c}, Init::kZeros, rng);
    p.fc1_weight = params_.add(prefix + "mlp.fc1.weight", {hidden, c, 1, 1}, Init::kTruncNormal, rng);
    p.fc1_bias = params_.add(prefix + "mlp.fc1.bias", {hidden}, Init::kZeros, rng);
    p.fc2_weight = params_.add(prefix + "mlp.fc2.weight", {c, hidden, 1, 1}, Init::kTruncNormal, rng);
    p.fc2_bias = params_.add(prefix + "mlp.fc2.bias", {c}, Init::kZeros, rng);
    return p;
  }

  ModelConfig config_;
  WaveletBasis basis_;
  ParamStore<T> params_;
  Tensor<T> stem_weight_, stem_bias_, head_weight_, head_bias_;
  std::vector<std::vector<FormerBlockParams<T>>> encoder_, decoder_;
  std::vector<CifmParams<T>> cifm_;
  DcmParams<T> dcm_;
};

}  // namespace dustlab
