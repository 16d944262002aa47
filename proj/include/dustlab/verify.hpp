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

// Self-verification suite run by `dustlab gradcheck`: reconstruction and energy
// checks for the wavelets, loop oracles for attention, finite-difference
// gradient checks for ops, blocks, losses and a small full model, and the
// identity/metric/synthesis contracts.

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dustlab/attention.hpp"
#include "dustlab/dust_synth.hpp"
#include "dustlab/gradcheck.hpp"
#include "dustlab/network.hpp"
#include "dustlab/objectives.hpp"
#include "dustlab/wavelet.hpp"

namespace dustlab {

struct CheckResult {
  std::string suite;
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  bool passed = false;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }

  /// One line per suite, then one FAIL line per failed check.
  std::string summary() const {
    std::ostringstream os;
    std::vector<std::string> suites;
    for (const auto& c : checks)
      if (std::find(suites.begin(), suites.end(), c.suite) == suites.end()) suites.push_back(c.suite);
    for (const auto& s : suites) {
      int n = 0, failed = 0;
      double worst = 0;
      for (const auto& c : checks) {
        if (c.suite != s) continue;
        ++n;
        failed += c.passed ? 0 : 1;
        worst = std::max(worst, c.max_error);
      }
      char buf[160];
      std::snprintf(buf, sizeof buf, "suite=%s checks=%d failed=%d max_error=%.3e status=%s\n", s.c_str(), n, failed,
                    worst, failed ? "FAIL" : "ok");
      os << buf;
    }
    for (const auto& c : checks) {
      if (c.passed) continue;
      char buf[256];
      std::snprintf(buf, sizeof buf, "FAIL %s/%s max_error=%.3e tolerance=%.1e\n", c.suite.c_str(), c.name.c_str(),
                    c.max_error, c.tolerance);
      os << buf;
    }
    return os.str();
  }
};

namespace verify_detail {

using D = Tensor<double>;

inline D random(const Shape& shape, Rng& rng, double lo = -1, double hi = 1) {
  D t(shape);
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const D& a, const D& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

class Recorder {
 public:
  explicit Recorder(VerifyReport& report, std::string suite) : report_(report), suite_(std::move(suite)) {}
  void record(const std::string& name, double error, double tolerance) {
    report_.checks.push_back({suite_, name, error, tolerance, error < tolerance});
  }
  // Three seeds; the recorded error is the worst of them.
  void gradcheck3(const std::string& name, double tolerance,
                  const std::function<std::pair<std::function<D(const std::vector<D>&)>, std::vector<D>>(Rng&)>& make,
                  Index max_checks = 0, double step = 0) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(mix_seed(seed, std::hash<std::string>{}(name)));
      auto [fn, inputs] = make(rng);
      GradcheckOptions opts;
      opts.seed = seed;
      opts.max_checks_per_input = max_checks;
      if (step > 0) {
        opts.step = step;
        opts.fourth_order = true;
      }
      worst = std::max(worst, gradcheck(fn, inputs, tolerance, opts).max_error);
    }
    record(name, worst, tolerance);
  }

 private:
  VerifyReport& report_;
  std::string suite_;
};

// Weighted sum so every output element contributes with a distinct coefficient.
inline D probe(const D& y, Rng& rng) { return sum(mul(y, random(y.shape(), rng))); }

using Made = std::pair<std::function<D(const std::vector<D>&)>, std::vector<D>>;

inline void wavelet_suite(VerifyReport& report) {
  Recorder rec(report, "wavelet");
  for (const char* name : {"db1", "db2"}) {
    const auto basis = WaveletBasis::named(name);
    Rng rng(mix_seed(7, name[2]));
    double pr = 0, energy = 0;
    for (int i = 0; i < 50; ++i) {
      const Index c = 1 + static_cast<Index>(rng.below(3));
      const Index h = 2 * (1 + static_cast<Index>(rng.below(16))), w = 2 * (1 + static_cast<Index>(rng.below(16)));
      D x = random({1, c, h, w}, rng);
      D packed = dwt2_packed(x, basis);
      pr = std::max(pr, max_abs_diff(idwt2_packed(packed, basis), x));
      double ex = 0, ec = 0;
      for (double v : x.data()) ex += v * v;
      for (double v : packed.data()) ec += v * v;
      energy = std::max(energy, std::abs(ex - ec) / ex);
    }
    rec.record(std::string(name) + ".reconstruction", pr, 1e-9);
    rec.record(std::string(name) + ".parseval", energy, 1e-9);
    rec.gradcheck3(std::string(name) + ".dwt2_grad", 1e-4, [basis](Rng& rng) -> Made {
      D x = random({1, 2, 6, 8}, rng);
      D w = random({1, 8, 3, 4}, rng);
      return {[basis, w](const std::vector<D>& in) { return sum(mul(dwt2_packed(in[0], basis), w)); }, {x}};
    });
    rec.gradcheck3(std::string(name) + ".idwt2_grad", 1e-4, [basis](Rng& rng) -> Made {
      D x = random({1, 8, 3, 4}, rng);
      D w = random({1, 2, 6, 8}, rng);
      return {[basis, w](const std::vector<D>& in) { return sum(mul(idwt2_packed(in[0], basis), w)); }, {x}};
    });
  }
  Rng rng(3);
  D x = random({2, 3, 6, 4}, rng);
  auto parts = unpack_bands(dwt2_packed(x, WaveletBasis::named("db2")));
  D packed = dwt2_packed(x, WaveletBasis::named("db2"));
  rec.record("pack_unpack_roundtrip", max_abs_diff(pack_bands(parts), packed), 1e-300);
}

// Per-head loop attention over tokens [L, C] (row-major) with optional additive bias.
inline std::vector<double> loop_attention(const std::vector<double>& q, const std::vector<double>& k,
                                          const std::vector<double>& v, Index l, Index c, Index heads,
                                          const std::function<double(Index, Index, Index)>& bias) {
  const Index d = c / heads;
  std::vector<double> out(static_cast<std::size_t>(l * c), 0.0);
  for (Index h = 0; h < heads; ++h)
    for (Index i = 0; i < l; ++i) {
      std::vector<double> s(static_cast<std::size_t>(l));
      for (Index j = 0; j < l; ++j) {
        double dot = 0;
        for (Index e = 0; e < d; ++e) dot += q[static_cast<std::size_t>(i * c + h * d + e)] * k[static_cast<std::size_t>(j * c + h * d + e)];
        s[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(d)) + bias(h, i, j);
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (Index j = 0; j < l; ++j)
        for (Index e = 0; e < d; ++e)
          out[static_cast<std::size_t>(i * c + h * d + e)] += s[static_cast<std::size_t>(j)] / z * v[static_cast<std::size_t>(j * c + h * d + e)];
    }
  return out;
}

inline std::vector<double> loop_linear(const std::vector<double>& x, Index rows, const D& w, const D& b) {
  const Index dout = w.dim(0), din = w.dim(1);
  std::vector<double> y(static_cast<std::size_t>(rows * dout));
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < dout; ++j) {
      double acc = b[j];
      for (Index i = 0; i < din; ++i) acc += x[static_cast<std::size_t>(r * din + i)] * w[j * din + i];
      y[static_cast<std::size_t>(r * dout + j)] = acc;
    }
  return y;
}

// Tokens of window (wy, wx) of an [1,C,H,W] map, row-major [w·w, C].
inline std::vector<double> window_tokens(const D& x, Index wy, Index wx, Index win) {
  const Index c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> t;
  for (Index a = 0; a < win; ++a)
    for (Index b = 0; b < win; ++b)
      for (Index ch = 0; ch < c; ++ch) t.push_back(x[(ch * h + wy * win + a) * w + wx * win + b]);
  return t;
}

inline void attention_suite(VerifyReport& report) {
  Recorder rec(report, "attention");
  Rng rng(11);
  const Index c = 8, heads = 4, win = 4, h = 8, w = 8;
  SelfAttentionParams<double> sp{random({3 * c, c}, rng), random({3 * c}, rng), random({c, c}, rng),
                                 random({c}, rng), random({(2 * win - 1) * (2 * win - 1), heads}, rng)};
  D x = random({1, c, h, w}, rng);
  D y = window_mhsa(x, WindowGrid::make(h, w, win, 0), AttentionHeads::for_channels(c, heads), sp);
  double err = 0;
  for (Index wy = 0; wy < h / win; ++wy)
    for (Index wx = 0; wx < w / win; ++wx) {
      const auto tok = window_tokens(x, wy, wx, win);
      const Index l = win * win;
      const auto qkv = loop_linear(tok, l, sp.qkv_weight, sp.qkv_bias);
      std::vector<double> q, k, v;
      for (Index i = 0; i < l; ++i)
        for (Index j = 0; j < 3 * c; ++j) (j < c ? q : j < 2 * c ? k : v).push_back(qkv[static_cast<std::size_t>(i * 3 * c + j)]);
      auto bias = [&](Index hd, Index i, Index j) {
        const Index dy = i / win - j / win + win - 1, dx = i % win - j % win + win - 1;
        return sp.rel_bias_table[(dy * (2 * win - 1) + dx) * heads + hd];
      };
      const auto o = loop_linear(loop_attention(q, k, v, l, c, heads, bias), l, sp.proj_weight, sp.proj_bias);
      const auto ref = D({1, c, win, win}, [&] {
        std::vector<double> img(static_cast<std::size_t>(c * l));
        for (Index i = 0; i < l; ++i)
          for (Index ch = 0; ch < c; ++ch) img[static_cast<std::size_t>(ch * l + i)] = o[static_cast<std::size_t>(i * c + ch)];
        return img;
      }());
      D got = slice(slice(y, 2, wy * win, win), 3, wx * win, win);
      err = std::max(err, max_abs_diff(got, ref));
    }
  rec.record("window_mhsa_oracle", err, 1e-6);

  CrossAttentionParams<double> cp{random({c, c}, rng), random({c}, rng), random({2 * c, c}, rng),
                                  random({2 * c}, rng), random({c, c}, rng), random({c}, rng)};
  D qf = random({1, c, 4, 4}, rng), kf = random({1, c, 4, 4}, rng);
  D gate = mhca(qf, kf, AttentionHeads::for_channels(c, 2), cp, 4);
  {
    const Index l = 16;
    const auto qt = loop_linear(window_tokens(qf, 0, 0, 4), l, cp.q_weight, cp.q_bias);
    const auto kv = loop_linear(window_tokens(kf, 0, 0, 4), l, cp.kv_weight, cp.kv_bias);
    std::vector<double> k, v;
    for (Index i = 0; i < l; ++i)
      for (Index j = 0; j < 2 * c; ++j) (j < c ? k : v).push_back(kv[static_cast<std::size_t>(i * 2 * c + j)]);
    const auto o = loop_linear(loop_attention(qt, k, v, l, c, 2, [](Index, Index, Index) { return 0.0; }), l,
                               cp.proj_weight, cp.proj_bias);
    double e = 0;
    for (Index i = 0; i < l; ++i)
      for (Index ch = 0; ch < c; ++ch)
        e = std::max(e, std::abs(gate[ch * l + i] - 1.0 / (1.0 + std::exp(-o[static_cast<std::size_t>(i * c + ch)]))));
    rec.record("mhca_oracle", e, 1e-6);
  }

  double rt = 0;
  for (Index shift : {Index{0}, Index{2}}) {
    D z = random({2, 3, 9, 7}, rng);
    const auto g = WindowGrid::make(9, 7, 4, shift);
    for (auto layout : {WindowLayout::kImage, WindowLayout::kTokens})
      rt = std::max(rt, max_abs_diff(window_reverse(window_partition(z, g, layout), g, layout), z));
  }
  rec.record("partition_roundtrip", rt, 1e-300);

  rec.gradcheck3("window_mhsa_shifted_grad", 1e-4, [](Rng& r) -> Made {
    SelfAttentionParams<double> p{random({12, 4}, r), random({12}, r), random({4, 4}, r), random({4}, r),
                                  random({9, 2}, r)};
    D in = random({1, 4, 5, 6}, r);
    D probe_w = random({1, 4, 5, 6}, r);
    return {[p, probe_w](const std::vector<D>& v) {
              SelfAttentionParams<double> q = p;
              q.qkv_weight = v[1];
              q.rel_bias_table = v[2];
              return sum(mul(window_mhsa(v[0], WindowGrid::make(5, 6, 2, 1), AttentionHeads::for_channels(4, 2), q), probe_w));
            },
            {in, p.qkv_weight, p.rel_bias_table}};
  });
  rec.gradcheck3("mhca_grad", 1e-4, [](Rng& r) -> Made {
    CrossAttentionParams<double> p{random({4, 4}, r), random({4}, r), random({8, 4}, r),
                                   random({8}, r), random({4, 4}, r), random({4}, r)};
    D probe_w = random({1, 4, 4, 4}, r);
    return {[p, probe_w](const std::vector<D>& v) {
              CrossAttentionParams<double> q = p;
              q.kv_weight = v[2];
              return sum(mul(mhca(v[0], v[1], AttentionHeads::for_channels(4, 2), q, 2), probe_w));
            },
            {random({1, 4, 4, 4}, r), random({1, 4, 4, 4}, r), p.kv_weight}};
  });
  rec.gradcheck3("sfas_grad", 1e-4, [](Rng& r) -> Made {
    SfasParams<double> p{random({3, 3, 3, 3}, r), random({3}, r), random({3, 3, 3, 3}, r), random({3}, r)};
    D fw = random({3, 6, 1, 1}, r), fb = random({3}, r), attn = random({1, 3, 5, 5}, r);
    D probe_w = random({1, 3, 5, 5}, r);
    return {[p, fw, fb, probe_w](const std::vector<D>& v) {
              return sum(mul(sfas_fuse(v[1], sfas_branch(v[0], p), fw, fb), probe_w));
            },
            {random({1, 3, 5, 5}, r), attn}};
  });
}

inline void ops_suite(VerifyReport& report) {
  Recorder rec(report, "ops");
  struct Case {
    const char* name;
    std::vector<Shape> shapes;
    std::function<D(const std::vector<D>&)> fn;
    double lo = -1, hi = 1;
  };
  const std::vector<Case> cases{
      {"add", {{2, 3}, {1, 3}}, [](const auto& v) { return add(v[0], v[1]); }},
      {"sub", {{2, 3}, {2, 1}}, [](const auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{2, 3}, {2, 3}}, [](const auto& v) { return mul(v[0], v[1]); }},
      {"div", {{2, 3}, {2, 3}}, [](const auto& v) { return div(v[0], v[1]); }, 0.5, 2.0},
      {"pow", {{5}}, [](const auto& v) { return pow(v[0], 1.5); }, 0.5, 2.0},
      {"abs", {{5}}, [](const auto& v) { return abs(v[0]); }, 0.2, 1.0},
      {"sigmoid", {{6}}, [](const auto& v) { return sigmoid(v[0]); }},
      {"gelu", {{6}}, [](const auto& v) { return gelu(v[0]); }},
      {"relu", {{6}}, [](const auto& v) { return relu(v[0]); }, 0.1, 1.0},
      {"clamp", {{6}}, [](const auto& v) { return clamp(v[0], -0.5, 0.5); }},
      {"mean_trailing", {{2, 3, 4}}, [](const auto& v) { return mean_trailing(v[0], 1); }},
      {"permute", {{2, 3, 4}}, [](const auto& v) { return permute(v[0], {2, 0, 1}); }},
      {"concat", {{2, 3}, {2, 2}}, [](const auto& v) { return concat<double>({v[0], v[1]}, 1); }},
      {"slice", {{4, 5}}, [](const auto& v) { return slice(v[0], 1, 1, 3); }},
      {"pad_symmetric", {{1, 1, 3, 4}}, [](const auto& v) { return pad(v[0], 3, 2, 3, PadMode::kSymmetric); }},
      {"roll", {{1, 1, 3, 4}}, [](const auto& v) { return roll(v[0], 3, -1); }},
      {"gather_rows", {{4, 3}}, [](const auto& v) { return gather_rows(v[0], {3, 0, 3, 1}); }},
      {"linear", {{2, 4}, {3, 4}, {3}}, [](const auto& v) { return linear(v[0], v[1], v[2]); }},
      {"matmul_tt", {{3, 2}, {4, 3}}, [](const auto& v) { return matmul(v[0], v[1], true, true); }},
      {"softmax", {{2, 5}}, [](const auto& v) { return softmax(v[0], -1); }},
      {"layer_norm", {{2, 4, 3}, {4}, {4}}, [](const auto& v) { return layer_norm(v[0], 1, v[1], v[2]); }},
      {"conv2d", {{1, 2, 6, 6}, {3, 2, 3, 3}, {3}}, [](const auto& v) { return conv2d(v[0], v[1], v[2], 1, 1, 1); }},
      {"conv2d_strided_dilated", {{1, 2, 7, 7}, {2, 2, 3, 3}, {2}},
       [](const auto& v) { return conv2d(v[0], v[1], v[2], 2, 2, 2); }},
      {"upsample_nearest", {{1, 2, 2, 3}}, [](const auto& v) { return upsample_nearest(v[0], 2); }},
      {"avg_pool2", {{1, 2, 5, 4}}, [](const auto& v) { return avg_pool2(v[0]); }},
  };
  for (const auto& c : cases) {
    rec.gradcheck3(c.name, 1e-4, [&c](Rng& r) -> Made {
      std::vector<D> in;
      for (const auto& s : c.shapes) in.push_back(random(s, r, c.lo, c.hi));
      D y = c.fn(in);
      D w = random(y.shape(), r);
      auto fn = c.fn;
      return {[fn, w](const std::vector<D>& v) { return sum(mul(fn(v), w)); }, in};
    });
  }
}

inline ModelConfig verification_config() {
  ModelConfig c;
  c.stages = 2;
  c.channels = {4, 8};
  c.blocks_per_stage = {1, 1};
  c.num_heads = {2, 2};
  c.window_size = 4;
  c.dcm_dilations = {1, 2};
  c.zero_head = false;
  c.precision = 64;
  return c;
}

// Replaces every parameter with seeded uniform noise so no branch is trivially zero.
inline void randomize(Model<double>& model, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& p : model.params().all()) {
    D t = p.tensor;
    for (auto& v : t.mutable_data()) v = rng.uniform(-0.5, 0.5);
  }
}

template <class P>
std::vector<D> tensors_of(const P& p);

template <>
inline std::vector<D> tensors_of(const FormerBlockParams<double>& p) {
  std::vector<D> out;
  for (const D* t : {&p.resample_weight, &p.norm1_gain, &p.attn.qkv_weight, &p.attn.rel_bias_table, &p.sfas.conv1_weight,
                     &p.fuse_weight, &p.fc1_weight, &p.fc2_weight})
    if (t->defined()) out.push_back(*t);
  return out;
}

inline void blocks_suite(VerifyReport& report) {
  Recorder rec(report, "blocks");
  const Index checks = 30;
  // Smooth blocks use the fourth-order stencil at a wider step: their probe sums carry
  // ~1e-9 roundoff at h = 1e-5, which swamps entries whose gradient is near 1e-7.
  const double step = 3e-4;
  auto with_params = [](std::vector<D> inputs, const std::vector<D>& params) {
    inputs.insert(inputs.end(), params.begin(), params.end());
    return inputs;
  };
  rec.gradcheck3("dwtformer_block", 1e-4, [&](Rng& r) -> Made {
    auto model = std::make_shared<Model<double>>(verification_config());
    randomize(*model, r.next_u64());
    D x = random({1, 4, 8, 8}, r);
    D w = random({1, 8, 4, 4}, r);
    return {[model, w](const std::vector<D>& v) {
              return sum(mul(dwtformer_block(v[0], model->encoder_block(1, 0), model->geometry(1, 0), model->basis(), true), w));
            },
            with_params({x}, tensors_of(model->encoder_block(1, 0)))};
  }, checks, step);
  rec.gradcheck3("idwtformer_block", 1e-4, [&](Rng& r) -> Made {
    auto model = std::make_shared<Model<double>>(verification_config());
    randomize(*model, r.next_u64());
    D x = random({1, 8, 4, 4}, r);
    D w = random({1, 4, 8, 8}, r);
    return {[model, w](const std::vector<D>& v) {
              return sum(mul(idwtformer_block(v[0], model->decoder_block(1, 0), model->geometry(1, 0), model->basis(), true), w));
            },
            with_params({x}, tensors_of(model->decoder_block(1, 0)))};
  }, checks, step);
  rec.gradcheck3("cifm", 1e-4, [&](Rng& r) -> Made {
    auto model = std::make_shared<Model<double>>(verification_config());
    randomize(*model, r.next_u64());
    const auto& p = model->cifm_params(1);
    D w = random({1, 8, 4, 4}, r);
    return {[model, w](const std::vector<D>& v) { return sum(mul(cifm(v[0], v[1], model->cifm_params(1), 2, 4), w)); },
            {random({1, 8, 4, 4}, r), random({1, 8, 4, 4}, r), p.attn.q_weight, p.attn.kv_weight, p.fuse_weight}};
  }, checks, step);
  rec.gradcheck3("dcm", 1e-4, [&](Rng& r) -> Made {
    auto model = std::make_shared<Model<double>>(verification_config());
    randomize(*model, r.next_u64());
    const auto& p = model->dcm_params();
    D w = random({1, 8, 4, 4}, r);
    return {[model, w](const std::vector<D>& v) {
              return sum(mul(dcm(v[0], model->dcm_params(), model->config().dcm_dilations, model->basis()), w));
            },
            {random({1, 8, 4, 4}, r), p.dilated_weight[1], p.pointwise_weight, p.fuse_weight}};
  }, checks, step);
  rec.gradcheck3("total_loss", 1e-4, [&](Rng& r) -> Made {
    auto extractor = std::make_shared<PerceptualExtractor<double>>(r.next_u64());
    D target = random({1, 3, 24, 24}, r, 0.05, 0.95);
    return {[extractor, target](const std::vector<D>& v) {
              return total_loss(v[0], target, LossWeights{1.0, 0.4, 0.01}, *extractor, 2).total;
            },
            {random({1, 3, 24, 24}, r, 0.05, 0.95)}};
  }, 200);
}

inline void model_suite(VerifyReport& report) {
  Recorder rec(report, "model");
  rec.gradcheck3("full_model_2stage", 1e-3, [](Rng& r) -> Made {
    auto model = std::make_shared<Model<double>>(verification_config());
    randomize(*model, r.next_u64());
    D target = random({1, 3, 16, 16}, r, 0.1, 0.9);
    std::vector<D> inputs{random({1, 3, 16, 16}, r, 0.3, 0.7)};
    for (const auto& p : model->params().all()) inputs.push_back(p.tensor);
    // Keep the pre-clamp output inside (0, 1) so the check sees a smooth function.
    for (auto& t : inputs)
      if (&t != &inputs[0])
        for (auto& v : t.mutable_data()) v *= 0.2;
    return {[model, target](const std::vector<D>& v) { return mean(square(sub(model->forward(v[0]), target))); },
            inputs};
  }, 6);

  Model<float> identity{ModelConfig{}};
  Rng rng(5);
  Tensor<float> x({1, 3, 64, 64});
  for (auto& v : x.mutable_data()) v = static_cast<float>(rng.uniform());
  const Tensor<float> y = identity.forward(x);
  double diff = 0;
  for (Index i = 0; i < x.numel(); ++i) diff = std::max(diff, std::abs(static_cast<double>(y[i]) - x[i]));
  rec.record("zero_head_identity", diff, 1e-300);
}

inline void objectives_suite(VerifyReport& report) {
  Recorder rec(report, "objectives");
  D a({1, 3, 4, 4}, 0.5), b({1, 3, 4, 4}, 0.5 + 0.1);
  rec.record("psnr_20db", std::abs(psnr(a, b) - 20.0), 1e-9);
  D ramp({1, 3, 16, 16});
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 256; ++i) ramp.mutable_data()[static_cast<std::size_t>(c * 256 + i)] = static_cast<double>(i) / 255.0;
  rec.record("entropy_uniform_8bit", std::abs(entropy(ramp) - 8.0), 1e-12);
  Rng rng(4);
  D x = random({1, 3, 32, 32}, rng, 0, 1);
  rec.record("ms_ssim_self", std::abs(ms_ssim(x, x, 2).item() - 1.0), 1e-12);
}

inline void synth_suite(VerifyReport& report) {
  Recorder rec(report, "synth");
  Rng rng(6);
  D clean = random({1, 3, 16, 16}, rng, 0, 1);
  DustField<double> f;
  f.depth = make_depth<double>(16, 16, 1, 0.5);
  f.beta = 0;
  rec.record("beta_zero_identity", max_abs_diff(apply_asm(clean, f), clean), 1e-300);
  f.beta = 1.3;
  const D t = f.transmission();
  const D back = invert_asm(apply_asm(clean, f), f);
  double err = 0;
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 256; ++p)
      if (t[p] > 0.05) err = std::max(err, std::abs(back[c * 256 + p] - clean[c * 256 + p]));
  rec.record("asm_inversion", err, 1e-6);
  f.depth = D({1, 1, 16, 16}, 1e4);
  double far = 0;
  const D opaque = apply_asm(clean, f);
  for (Index c = 0; c < 3; ++c)
    for (Index p = 0; p < 256; ++p) far = std::max(far, std::abs(opaque[c * 256 + p] - f.ambient[static_cast<std::size_t>(c)]));
  rec.record("opaque_limit", far, 1e-12);
}

}  // namespace verify_detail

inline const std::vector<std::string>& verification_modules() {
  static const std::vector<std::string> names{"wavelet", "attention", "ops", "blocks", "model", "objectives", "synth"};
  return names;
}

/// Runs one named suite, or every suite for "all".
inline VerifyReport run_verification(const std::string& module = "all") {
  using namespace verify_detail;
  const std::vector<std::pair<std::string, void (*)(VerifyReport&)>> suites{
      {"wavelet", wavelet_suite}, {"attention", attention_suite}, {"ops", ops_suite},   {"blocks", blocks_suite},
      {"model", model_suite},     {"objectives", objectives_suite}, {"synth", synth_suite}};
  VerifyReport report;
  bool matched = false;
  for (const auto& [name, fn] : suites) {
    if (module != "all" && module != name) continue;
    matched = true;
    fn(report);
  }
  if (!matched) throw ConfigError("unknown verification module '" + module + "'");
  return report;
}

}  // namespace dustlab
