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

#include <Eigen/Dense>
#include <cmath>

#include "dustlab/gradcheck.hpp"
#include "dustlab/wavelet.hpp"
#include "test_util.hpp"

namespace dustlab {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;
using D = Tensor<double>;

const WaveletBasis kHaar = WaveletBasis::named("db1");
const WaveletBasis kDb2 = WaveletBasis::named("db2");

double energy(const D& t) {
  double e = 0;
  for (double v : t.data()) e += v * v;
  return e;
}

TEST(Basis, OrthonormalFilters) {
  for (const auto& b : {kHaar, kDb2}) {
    double ll = 0, hh = 0, lh = 0;
    for (std::size_t i = 0; i < b.lowpass.size(); ++i) {
      ll += b.lowpass[i] * b.lowpass[i];
      hh += b.highpass[i] * b.highpass[i];
      lh += b.lowpass[i] * b.highpass[i];
    }
    EXPECT_NEAR(ll, 1.0, 1e-12) << b.name;
    EXPECT_NEAR(hh, 1.0, 1e-12) << b.name;
    EXPECT_NEAR(lh, 0.0, 1e-12) << b.name;
  }
  // Published db2 decomposition lowpass (tabulated to ~1e-13), in analysis order.
  const double ref[4] = {0.48296291314469025, 0.836516303737469, 0.22414386804185735, -0.12940952255092145};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(kDb2.lowpass[static_cast<std::size_t>(i)], ref[i], 1e-12);
  EXPECT_THROW(WaveletBasis::named("sym4"), ConfigError);
}

TEST(Dwt2, ConstantImageHaar) {
  auto bands = dwt2(D({1, 2, 4, 6}, 1.75), kHaar);
  for (double v : bands.ll.data()) EXPECT_NEAR(v, 3.5, 1e-12);
  for (const auto* b : {&bands.lh, &bands.hl, &bands.hh})
    for (double v : b->data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Dwt2, TwoByTwoHandArithmetic) {
  const double a = 1, b = 2, c = 5, d = 11;
  auto bands = dwt2(D({1, 1, 2, 2}, {a, b, c, d}), kHaar);
  EXPECT_NEAR(bands.ll.item(), (a + b + c + d) / 2, 1e-14);
  EXPECT_NEAR(bands.lh.item(), (a - b + c - d) / 2, 1e-14);  // low along height, high along width
  EXPECT_NEAR(bands.hl.item(), (a + b - c - d) / 2, 1e-14);
  EXPECT_NEAR(bands.hh.item(), (a - b - c + d) / 2, 1e-14);
}

// Periodic 1-D analysis matrix: rows [0,n/2) lowpass, [n/2,n) highpass.
Eigen::MatrixXd analysis_matrix(const WaveletBasis& basis, int n) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (int k = 0; k < n / 2; ++k)
    for (std::size_t t = 0; t < basis.lowpass.size(); ++t) {
      m(k, (2 * k + static_cast<int>(t)) % n) += basis.lowpass[t];
      m(n / 2 + k, (2 * k + static_cast<int>(t)) % n) += basis.highpass[t];
    }
  return m;
}

TEST(Dwt2, Db2MatchesMatrixForm) {
  Rng rng(3);
  auto x = random_tensor({1, 1, 8, 8}, rng);
  Eigen::MatrixXd m = analysis_matrix(kDb2, 8);
  ASSERT_LT((m * m.transpose() - Eigen::MatrixXd::Identity(8, 8)).norm(), 1e-12);
  Eigen::MatrixXd xm(8, 8);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) xm(i, j) = x[i * 8 + j];
  Eigen::MatrixXd y = m * xm * m.transpose();
  auto bands = dwt2(x, kDb2);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      EXPECT_NEAR(bands.ll[i * 4 + j], y(i, j), 1e-10);
      EXPECT_NEAR(bands.lh[i * 4 + j], y(i, j + 4), 1e-10);
      EXPECT_NEAR(bands.hl[i * 4 + j], y(i + 4, j), 1e-10);
      EXPECT_NEAR(bands.hh[i * 4 + j], y(i + 4, j + 4), 1e-10);
    }
}

TEST(Idwt2, ConstantFromLowBand) {
  Subbands<double> bands{D({1, 1, 2, 3}, 4.0), D::zeros({1, 1, 2, 3}), D::zeros({1, 1, 2, 3}),
                         D::zeros({1, 1, 2, 3}), 4, 6};
  auto x = idwt2(bands, kHaar);
  EXPECT_EQ(x.shape(), (Shape{1, 1, 4, 6}));
  for (double v : x.data()) EXPECT_NEAR(v, 2.0, 1e-12);
}

TEST(Idwt2, HaarLhImpulseIsSynthesisAtom) {
  Subbands<double> bands{D::zeros({1, 1, 2, 2}), D::zeros({1, 1, 2, 2}), D::zeros({1, 1, 2, 2}),
                         D::zeros({1, 1, 2, 2}), 4, 4};
  bands.lh.mutable_data()[3] = 1.0;  // block (1,1)
  auto x = idwt2(bands, kHaar);
  // Column of the inverse matrix form: Mᵀ e_lh.
  Eigen::MatrixXd m = analysis_matrix(kHaar, 4);
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(4, 4);
  y(1, 2 + 1) = 1.0;
  Eigen::MatrixXd atom = m.transpose() * y * m;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(x[i * 4 + j], atom(i, j), 1e-14);
  EXPECT_NEAR(x[2 * 4 + 2], 0.5, 1e-14);
  EXPECT_NEAR(x[2 * 4 + 3], -0.5, 1e-14);
  EXPECT_NEAR(x[3 * 4 + 2], 0.5, 1e-14);
  EXPECT_NEAR(x[3 * 4 + 3], -0.5, 1e-14);
}

TEST(Idwt2, BandShapeMismatch) {
  Subbands<double> bands{D::zeros({1, 1, 2, 2}), D::zeros({1, 1, 2, 3}), D::zeros({1, 1, 2, 2}),
                         D::zeros({1, 1, 2, 2}), 4, 4};
  EXPECT_THROW(idwt2(bands, kHaar), DimensionError);
}

TEST(Dwt2, OddExtentPolicy) {
  EXPECT_THROW(dwt2(D::ones({1, 1, 5, 4}), kHaar, OddPolicy::kReject), GeometryError);
  Rng rng(9);
  auto x = random_tensor({2, 3, 7, 5}, rng);
  for (const auto& b : {kHaar, kDb2}) {
    auto bands = dwt2(x, b);
    EXPECT_EQ(bands.ll.shape(), (Shape{2, 3, 4, 3}));
    auto back = idwt2(bands, b);
    ASSERT_EQ(back.shape(), x.shape());
    EXPECT_LT(max_abs_diff(back, x), 1e-9);
  }
}

TEST(Dwt2, PerfectReconstructionAndParsevalOverRandomShapes) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(2)), c = 1 + static_cast<Index>(rng.below(3));
    const Index h = 2 * (1 + static_cast<Index>(rng.below(8))), w = 2 * (1 + static_cast<Index>(rng.below(8)));
    auto x = random_tensor({n, c, h, w}, rng, -3, 3);
    for (const auto& b : {kHaar, kDb2}) {
      auto packed = dwt2_packed(x, b);
      EXPECT_LT(max_abs_diff(idwt2_packed(packed, b), x), 1e-9) << b.name << " " << to_string(x.shape());
      EXPECT_NEAR(energy(packed) / energy(x), 1.0, 1e-9);
    }
  }
  auto x = random_tensor({1, 3, 16, 16}, rng);
  EXPECT_LT(max_abs_diff(idwt2(dwt2(x, kDb2), kDb2), x), 1e-9);
}

TEST(PackBands, GeometryOrderAndInverse) {
  Rng rng(4);
  Subbands<double> bands{random_tensor({1, 2, 4, 4}, rng), random_tensor({1, 2, 4, 4}, rng),
                         random_tensor({1, 2, 4, 4}, rng), random_tensor({1, 2, 4, 4}, rng), 8, 8};
  auto packed = pack_bands(bands);
  EXPECT_EQ(packed.shape(), (Shape{1, 8, 4, 4}));
  auto back = unpack_bands(packed);
  EXPECT_EQ(max_abs_diff(back.ll, bands.ll), 0.0);
  EXPECT_EQ(max_abs_diff(back.hh, bands.hh), 0.0);

  bands.hh = D::zeros({1, 2, 4, 4});
  auto zeroed = pack_bands(bands);
  for (Index ch = 0; ch < 8; ++ch) {
    bool all_zero = true;
    for (Index i = 0; i < 16; ++i) all_zero = all_zero && zeroed[ch * 16 + i] == 0.0;
    EXPECT_EQ(all_zero, ch >= 6) << "channel " << ch;
  }
  EXPECT_THROW(unpack_bands(D::ones({1, 6, 2, 2})), DimensionError);
  EXPECT_THROW(idwt2_packed(D::ones({1, 6, 2, 2}), kHaar), DimensionError);
}

TEST(Dwt2, Gradcheck) {
  Rng rng(5);
  for (const auto& b : {kHaar, kDb2}) {
    auto x = random_tensor({1, 2, 6, 5}, rng);
    auto weights = random_tensor({1, 8, 3, 3}, rng);
    auto report = gradcheck([&](const std::vector<D>& in) { return sum(mul(dwt2_packed(in[0], b), weights)); },
                            {x}, 1e-6);
    EXPECT_TRUE(report.passed) << b.name << " " << report.max_error;
    auto packed = random_tensor({1, 8, 3, 3}, rng);
    auto wx = random_tensor({1, 2, 5, 6}, rng);
    auto inv = gradcheck(
        [&](const std::vector<D>& in) { return sum(mul(idwt2_packed(in[0], b, 5, 6), wx)); }, {packed}, 1e-6);
    EXPECT_TRUE(inv.passed) << b.name << " " << inv.max_error;
  }
}

}  // namespace
}  // namespace dustlab
