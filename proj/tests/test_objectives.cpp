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

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dustlab/gradcheck.hpp"
#include "dustlab/objectives.hpp"
#include "test_util.hpp"

namespace dustlab {
namespace {

using testing::random_tensor;
using D = Tensor<double>;

// Straightforward MS-SSIM: explicit 2-D window sums, explicit pooling, per-plane product.
struct Plane {
  Index h, w;
  std::vector<double> v;
  double at(Index i, Index j) const { return v[static_cast<std::size_t>(i * w + j)]; }
};

double reference_ms_ssim(const D& a, const D& b, int scales) {
  const double sigma = 1.5;
  double win[11][11];
  double z = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) z += win[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
  for (auto& row : win)
    for (double& e : row) e /= z;
  const double weights_raw[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  double wsum = 0;
  for (int s = 0; s < scales; ++s) wsum += weights_raw[s];
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Index n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  double total = 0;
  for (Index p = 0; p < n * c; ++p) {
    Plane x{h, w, {}}, y{h, w, {}};
    for (Index i = 0; i < h * w; ++i) {
      x.v.push_back(a[p * h * w + i]);
      y.v.push_back(b[p * h * w + i]);
    }
    double prod = 1;
    for (int s = 0; s < scales; ++s) {
      double cs_sum = 0, ssim_sum = 0;
      const Index oh = x.h - 10, ow = x.w - 10;
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) {
          double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
          for (int u = 0; u < 11; ++u)
            for (int t = 0; t < 11; ++t) {
              const double g = win[u][t], xv = x.at(i + u, j + t), yv = y.at(i + u, j + t);
              mx += g * xv;
              my += g * yv;
              xx += g * xv * xv;
              yy += g * yv * yv;
              xy += g * xv * yv;
            }
          const double sx = xx - mx * mx, sy = yy - my * my, sxy = xy - mx * my;
          const double cs = (2 * sxy + c2) / (sx + sy + c2);
          const double l = (2 * mx * my + c1) / (mx * mx + my * my + c1);
          cs_sum += cs;
          ssim_sum += cs * l;
        }
      const double term = (s + 1 < scales ? cs_sum : ssim_sum) / static_cast<double>(oh * ow);
      prod *= std::pow(std::max(term, 1e-6), weights_raw[s] / wsum);
      Plane px{x.h / 2, x.w / 2, {}}, py{y.h / 2, y.w / 2, {}};
      for (Index i = 0; i < px.h; ++i)
        for (Index j = 0; j < px.w; ++j) {
          px.v.push_back((x.at(2 * i, 2 * j) + x.at(2 * i + 1, 2 * j) + x.at(2 * i, 2 * j + 1) + x.at(2 * i + 1, 2 * j + 1)) / 4);
          py.v.push_back((y.at(2 * i, 2 * j) + y.at(2 * i + 1, 2 * j) + y.at(2 * i, 2 * j + 1) + y.at(2 * i + 1, 2 * j + 1)) / 4);
        }
      x = px;
      y = py;
    }
    total += prod;
  }
  return total / static_cast<double>(n * c);
}

D noisy(const D& x, double std, Rng& rng) {
  D y = x.clone();
  for (auto& v : y.mutable_data()) v = std::clamp(v + std * rng.normal(), 0.0, 1.0);
  return y;
}

// Smooth random scene so structure terms are meaningful.
D smooth_image(Shape s, Rng& rng) {
  D x(s);
  const double fx = rng.uniform(0.05, 0.3), fy = rng.uniform(0.05, 0.3), ph = rng.uniform(0, 6);
  auto d = x.mutable_data();
  for (Index i = 0; i < x.numel(); ++i) {
    const Index col = i % s[3], row = (i / s[3]) % s[2], ch = (i / (s[2] * s[3])) % s[1];
    d[static_cast<std::size_t>(i)] = 0.5 + 0.3 * std::sin(fx * col + fy * row + ph + ch) + 0.1 * rng.uniform(-1, 1);
  }
  return x;
}

TEST(L1Loss, Examples) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 4, 4}, rng, 0, 1);
  EXPECT_EQ(l1_loss(x, x).item(), 0.0);
  EXPECT_DOUBLE_EQ(l1_loss(D({1, 3, 2, 2}, 0.5), D({1, 3, 2, 2}, 0.25)).item(), 0.25);
  auto y = random_tensor({2, 3, 4, 4}, rng, 0, 1);
  double acc = 0;
  for (Index i = 0; i < x.numel(); ++i) acc += std::abs(x[i] - y[i]);
  EXPECT_NEAR(l1_loss(x, y).item(), acc / static_cast<double>(x.numel()), 1e-7);
  EXPECT_THROW(l1_loss(x, D::ones({2, 3, 4, 5})), DimensionError);
}

TEST(MsSsim, SelfSimilarityAndSymmetry) {
  Rng rng(2);
  auto x = smooth_image({2, 3, 48, 48}, rng);
  EXPECT_NEAR(ms_ssim(x, x).item(), 1.0, 1e-6);
  auto y = noisy(x, 0.05, rng);
  EXPECT_NEAR(ms_ssim(x, y).item(), ms_ssim(y, x).item(), 1e-7);
}

TEST(MsSsim, ConstantOffsetMatchesReference) {
  D a({1, 3, 64, 64}, 0.5), b({1, 3, 64, 64}, 0.6);
  EXPECT_NEAR(ms_ssim(a, b).item(), reference_ms_ssim(a, b, 3), 1e-5);
  // Closed form: only luminance at the coarsest of 3 scales differs from 1.
  const double l = (2 * 0.3 + 1e-4) / (0.61 + 1e-4);
  EXPECT_NEAR(ms_ssim(a, b).item(), std::pow(l, 0.3001 / (0.0448 + 0.2856 + 0.3001)), 1e-9);
}

TEST(MsSsim, MatchesReferenceOnRandomPairs) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Index side = trial % 2 ? 48 : 96;
    auto x = smooth_image({1, 2, side, side + 8}, rng);
    auto y = noisy(x, rng.uniform(0.01, 0.2), rng);
    const int used = ms_ssim_scale_count(side, side + 8, 5);
    EXPECT_NEAR(ms_ssim(x, y).item(), reference_ms_ssim(x, y, used), 1e-5) << trial;
  }
}

TEST(MsSsim, DecreasesWithNoise) {
  Rng rng(4);
  auto x = smooth_image({1, 3, 64, 64}, rng);
  double last = 1.0;
  for (double std : {0.01, 0.05, 0.1}) {
    Rng noise_rng(40);
    const double v = ms_ssim(x, noisy(x, std, noise_rng)).item();
    EXPECT_LT(v, last) << std;
    last = v;
  }
}

TEST(MsSsim, ScaleSelectionAndWarning) {
  EXPECT_EQ(ms_ssim_scale_count(176, 200, 5), 5);
  EXPECT_EQ(ms_ssim_scale_count(64, 64, 5), 3);
  EXPECT_EQ(ms_ssim_scale_count(44, 44, 5), 3);
  EXPECT_EQ(ms_ssim_scale_count(43, 60, 5), 2);
  EXPECT_EQ(ms_ssim_scale_count(11, 11, 5), 1);
  EXPECT_THROW(ms_ssim_scale_count(10, 64, 5), GeometryError);
  EXPECT_THROW(ms_ssim(D::ones({1, 1, 10, 10}), D::ones({1, 1, 10, 10})), GeometryError);
  auto w = ms_ssim_weights(3);
  EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-15);

  std::vector<std::string> seen;
  auto old = set_warning_handler([&](const std::string& m) { seen.push_back(m); });
  ms_ssim(D::ones({1, 1, 24, 26}), D::ones({1, 1, 24, 26}));
  ms_ssim(D::ones({1, 1, 24, 26}), D::ones({1, 1, 24, 26}));
  set_warning_handler(old);
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_NE(seen[0].find("2 of 5"), std::string::npos);
}

TEST(Perceptual, FrozenAndDeterministic) {
  Rng rng(5);
  PerceptualExtractor<double> ex(1234);
  auto x = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  auto y = random_tensor({1, 3, 16, 16}, rng, 0, 1);
  EXPECT_EQ(perceptual_loss(x, x, ex).item(), 0.0);
  const auto before = ex.fingerprint();
  D px = x.clone();
  px.set_requires_grad(true);
  auto loss = perceptual_loss(px, y, ex);
  EXPECT_GT(loss.item(), 0.0);
  loss.backward();
  EXPECT_TRUE(px.has_grad());
  for (const auto& w : ex.weights()) EXPECT_FALSE(w.has_grad());
  for (const auto& b : ex.biases()) EXPECT_FALSE(b.has_grad());
  EXPECT_EQ(ex.fingerprint(), before);
  PerceptualExtractor<double> again(1234), other(99);
  EXPECT_EQ(perceptual_loss(x, y, again).item(), loss.item());
  EXPECT_NE(perceptual_loss(x, y, other).item(), loss.item());
  auto feats = ex.features(x);
  ASSERT_EQ(feats.size(), 3u);
  EXPECT_EQ(feats[2].shape(), (Shape{1, 64, 2, 2}));
}

TEST(Perceptual, RawBlobWeights) {
  PerceptualExtractor<float> seeded(7);
  const auto path = (std::filesystem::temp_directory_path() / "dustlab_perc.bin").string();
  {
    std::ofstream out(path, std::ios::binary);
    for (std::size_t s = 0; s < 3; ++s) {
      for (float v : seeded.weights()[s].data()) out.write(reinterpret_cast<const char*>(&v), 4);
      for (float v : seeded.biases()[s].data()) out.write(reinterpret_cast<const char*>(&v), 4);
    }
  }
  auto loaded = PerceptualExtractor<float>::from_blob(path);
  EXPECT_EQ(loaded.fingerprint(), seeded.fingerprint());
  {
    std::ofstream out(path, std::ios::binary | std::ios::app);
    out.put('x');
  }
  EXPECT_THROW(PerceptualExtractor<float>::from_blob(path), IoError);
  std::filesystem::remove(path);
  EXPECT_THROW(PerceptualExtractor<float>::from_blob(path), IoError);
}

TEST(TotalLoss, IdentityAblationAndNonNegativity) {
  Rng rng(6);
  PerceptualExtractor<double> ex(1);
  auto x = smooth_image({1, 3, 32, 32}, rng);
  auto y = noisy(x, 0.1, rng);
  for (LossWeights w : {LossWeights{}, LossWeights{1, 0, 0}, LossWeights{0, 1, 0}, LossWeights{0.3, 0.2, 5}}) {
    EXPECT_NEAR(total_loss(x, x, w, ex).total.item(), 0.0, 1e-12);
    auto t = total_loss(x, y, w, ex);
    EXPECT_GE(t.total.item(), 0.0);
    EXPECT_GT(t.l1, 0.0);
    EXPECT_LT(t.ms_ssim, 1.0);
    EXPECT_GT(t.perceptual, 0.0);
  }
  EXPECT_EQ(total_loss(x, y, LossWeights{1, 0, 0}, ex).total.item(), l1_loss(x, y).item());
  EXPECT_THROW(total_loss(x, y, LossWeights{0, 0, 0}, ex), ConfigError);
}

TEST(TotalLoss, Gradcheck) {
  Rng rng(7);
  PerceptualExtractor<double> ex(3);
  auto target = smooth_image({1, 3, 44, 44}, rng);
  auto pred = noisy(target, 0.1, rng);
  for (auto& v : pred.mutable_data()) v = std::clamp(v, 0.02, 0.98);
  GradcheckOptions opts;
  opts.max_checks_per_input = 300;
  auto report = gradcheck(
      [&](const std::vector<D>& in) { return total_loss(in[0], target, LossWeights{1.0, 0.4, 0.5}, ex, 2).total; },
      {pred}, 1e-3, opts);
  EXPECT_TRUE(report.passed) << report.max_error;
  auto ms_only = gradcheck([&](const std::vector<D>& in) { return ms_ssim(in[0], target, 5); }, {pred}, 1e-3, opts);
  EXPECT_TRUE(ms_only.passed) << ms_only.max_error;
}

TEST(Metrics, PsnrExactAndMonotone) {
  D a({1, 3, 8, 8}, 0.5), b({1, 3, 8, 8}, 0.625);
  EXPECT_EQ(psnr(a, b, 1.25), 20.0);  // MSE = 1/64 = 1.25²/100
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  Rng rng(8);
  auto x = random_tensor({1, 3, 16, 16}, rng, 0.2, 0.8);
  double last = std::numeric_limits<double>::infinity();
  for (double amp : {0.01, 0.05, 0.1}) {
    Rng n(9);
    D y = x.clone();
    for (auto& v : y.mutable_data()) v += n.uniform(-amp, amp);
    const double p = psnr(y, x);
    EXPECT_LT(p, last);
    last = p;
  }
}

TEST(Metrics, EntropyAndSsim) {
  D ramp({3, 16, 16});
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 256; ++i) ramp.mutable_data()[static_cast<std::size_t>(c * 256 + i)] = i / 255.0;
  EXPECT_NEAR(entropy(ramp), 8.0, 1e-12);
  EXPECT_EQ(entropy(D({1, 3, 4, 4}, 0.3)), 0.0);
  EXPECT_THROW(entropy(D::ones({2, 4, 4})), DimensionError);
  Rng rng(10);
  auto x = smooth_image({1, 3, 24, 24}, rng);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
  EXPECT_LT(ssim(x, noisy(x, 0.1, rng)), 1.0);
}

TEST(Metrics, ReportFormats) {
  std::vector<MetricRow> rows{{"a.png", 30.5, 0.9, 7.25}, {"b.png", std::numeric_limits<double>::infinity(), 1, 6}};
  auto table = metrics_report_table(rows);
  EXPECT_EQ(table.substr(0, table.find('\n')), "file\tpsnr_db\tssim\tentropy_bits");
  EXPECT_NE(table.find("b.png\tinf\t1.000000\t6.000000"), std::string::npos);
  auto kv = metrics_report_kv(rows);
  EXPECT_NE(kv.find("ssim_channels=rgb_mean"), std::string::npos);
  EXPECT_NE(kv.find("image file=a.png psnr_db=30.500000"), std::string::npos);
}

}  // namespace
}  // namespace dustlab
