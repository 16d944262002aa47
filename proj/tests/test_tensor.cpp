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
#include <numbers>

#include "dustlab/gradcheck.hpp"
#include "dustlab/ops.hpp"
#include "test_util.hpp"

namespace dustlab {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;
using D = Tensor<double>;

// Six-loop cross-correlation.
D reference_conv(const D& x, const D& w, const D& b, Index stride, Index pad, Index dil) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const Index k = ws[2];
  const Index ho = (xs[2] + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  const Index wo = (xs[3] + 2 * pad - dil * (k - 1) - 1) / stride + 1;
  D out({xs[0], ws[0], ho, wo});
  auto o = out.mutable_data();
  for (Index n = 0; n < xs[0]; ++n)
    for (Index co = 0; co < ws[0]; ++co)
      for (Index y = 0; y < ho; ++y)
        for (Index z = 0; z < wo; ++z) {
          double acc = b.defined() ? b[co] : 0.0;
          for (Index ci = 0; ci < xs[1]; ++ci)
            for (Index i = 0; i < k; ++i)
              for (Index j = 0; j < k; ++j) {
                const Index iy = y * stride - pad + i * dil, ix = z * stride - pad + j * dil;
                if (iy < 0 || iy >= xs[2] || ix < 0 || ix >= xs[3]) continue;
                acc += x[testing::at4(xs, n, ci, iy, ix)] * w[testing::at4(ws, co, ci, i, j)];
              }
          o[static_cast<std::size_t>(testing::at4(out.shape(), n, co, y, z))] = acc;
        }
  return out;
}

TEST(Conv2d, OnesKernelCenterSumsNine) {
  auto out = conv2d(D::ones({1, 1, 3, 3}), D::ones({1, 1, 3, 3}), D{}, 1, 1, 1);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_DOUBLE_EQ(out[4], 9.0);
}

TEST(Conv2d, DilatedGeometry) {
  auto out = conv2d(D::ones({1, 1, 5, 5}), D::ones({1, 1, 3, 3}), D{}, 1, 0, 2);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_DOUBLE_EQ(out.item(), 9.0);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
  Rng rng(7);
  auto x = random_tensor({1, 2, 6, 6}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  EXPECT_LT(max_abs_diff(conv2d(x, w, b, 1, 1, 1), reference_conv(x, w, b, 1, 1, 1)), 1e-6);
  EXPECT_LT(max_abs_diff(conv2d(x, w, D{}, 2, 1, 1), reference_conv(x, w, D{}, 2, 1, 1)), 1e-6);
  EXPECT_LT(max_abs_diff(conv2d(x, w, b, 1, 2, 2), reference_conv(x, w, b, 1, 2, 2)), 1e-6);
  Tensor<float> xf(x.shape(), std::vector<float>(x.data().begin(), x.data().end()));
  Tensor<float> wf(w.shape(), std::vector<float>(w.data().begin(), w.data().end()));
  auto of = conv2d(xf, wf, Tensor<float>{}, 1, 1, 1);
  auto od = reference_conv(x, w, D{}, 1, 1, 1);
  for (Index i = 0; i < od.numel(); ++i) EXPECT_NEAR(of[i], od[i], 1e-5);
}

TEST(Conv2d, Errors) {
  EXPECT_THROW(conv2d(D::ones({1, 2, 5, 5}), D::ones({1, 3, 3, 3})), DimensionError);
  EXPECT_THROW(conv2d(D::ones({1, 1, 3, 3}), D::ones({1, 1, 3, 3}), D{}, 1, 0, 2), GeometryError);
  EXPECT_THROW(conv2d(D::ones({1, 1, 4, 4}), D::ones({1, 1, 2, 2})), DimensionError);
}

TEST(Conv2d, FlopConvention) {
  FlopCounter counter;
  conv2d(Tensor<float>::ones({1, 3, 8, 8}), Tensor<float>::ones({16, 3, 3, 3}), Tensor<float>::zeros({16}), 1, 1, 1);
  EXPECT_EQ(counter.count(), 55296);
}

TEST(Linear, IdentityAndHandArithmetic) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 4}, rng);
  D eye({4, 4});
  for (Index i = 0; i < 4; ++i) eye.mutable_data()[static_cast<std::size_t>(i * 5)] = 1.0;
  EXPECT_EQ(max_abs_diff(linear(x, eye, D::zeros({4})), x), 0.0);

  auto y = linear(D({1, 2}, {1, 2}), D({2, 2}, {1, 1, 0, 1}), D::zeros({2}));
  EXPECT_DOUBLE_EQ(y[0], 3.0);
  EXPECT_DOUBLE_EQ(y[1], 2.0);
  EXPECT_THROW(linear(x, D::ones({4, 5})), DimensionError);
}

TEST(Linear, MatchesMatmulOracle) {
  Rng rng(2);
  auto x = random_tensor({4, 8}, rng);
  auto w = random_tensor({5, 8}, rng);
  auto b = random_tensor({5}, rng);
  auto y = linear(x, w, b);
  for (Index r = 0; r < 4; ++r)
    for (Index j = 0; j < 5; ++j) {
      double acc = b[j];
      for (Index i = 0; i < 8; ++i) acc += x[r * 8 + i] * w[j * 8 + i];
      EXPECT_NEAR(y[r * 5 + j], acc, 1e-6);
    }
}

TEST(Matmul, AllTransposeCombinationsMatchLoops) {
  Rng rng(3);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      auto a = random_tensor(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
      auto b = random_tensor(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
      auto c = matmul(a, b, ta, tb);
      ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
      for (Index n = 0; n < 2; ++n)
        for (Index i = 0; i < 3; ++i)
          for (Index j = 0; j < 5; ++j) {
            double acc = 0;
            for (Index k = 0; k < 4; ++k) {
              const double av = ta ? a[(n * 4 + k) * 3 + i] : a[(n * 3 + i) * 4 + k];
              const double bv = tb ? b[(n * 5 + j) * 4 + k] : b[(n * 4 + k) * 5 + j];
              acc += av * bv;
            }
            EXPECT_NEAR(c[(n * 3 + i) * 5 + j], acc, 1e-12);
          }
    }
}

TEST(Softmax, AnalyticCases) {
  auto u = softmax(D::ones({4}), 0);
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(u[i], 0.25, 1e-15);
  auto a = softmax(D({2}, {0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(a[0], 0.25, 1e-15);
  EXPECT_NEAR(a[1], 0.75, 1e-15);
  auto big = softmax(D({2}, {1000.0, 1000.0}), 0);
  EXPECT_DOUBLE_EQ(big[0], 0.5);
  EXPECT_DOUBLE_EQ(big[1], 0.5);
}

TEST(Softmax, ShiftInvariantAndNormalizedOnEveryAxis) {
  Rng rng(4);
  auto x = random_tensor({3, 4, 5}, rng, -5, 5);
  for (Index axis = 0; axis < 3; ++axis) {
    auto y = softmax(x, axis);
    auto y2 = softmax(add_scalar(x, 17.5), axis);
    EXPECT_LT(max_abs_diff(y, y2), 1e-6);
    auto sums = sum(y).item();
    EXPECT_NEAR(sums, static_cast<double>(x.numel() / x.dim(axis)), 1e-9);
    for (Index i = 0; i < y.numel(); ++i) {
      EXPECT_GT(y[i], 0.0);
      EXPECT_LT(y[i], 1.0);
    }
  }
}

TEST(Elementwise, BasicValues) {
  EXPECT_DOUBLE_EQ(sigmoid(D::scalar(0.0)).item(), 0.5);
  auto ln = layer_norm(D({1, 4}, {2.5, 2.5, 2.5, 2.5}), 1, D{}, D{});
  for (Index i = 0; i < ln.numel(); ++i) EXPECT_EQ(ln[i], 0.0);
  auto cat = concat<double>({D::ones({1, 2, 4, 4}), D::zeros({1, 3, 4, 4})}, 1);
  EXPECT_EQ(cat.shape(), (Shape{1, 5, 4, 4}));
  EXPECT_NEAR(gelu(D::scalar(1.0)).item(), 0.8413447460685429, 1e-14);
}

TEST(Elementwise, RoundTrips) {
  Rng rng(5);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  EXPECT_EQ(max_abs_diff(reshape(reshape(x, {6, 20}), x.shape()), x), 0.0);
  auto parts = split(x, 1, {1, 2});
  EXPECT_EQ(max_abs_diff(concat(parts, 1), x), 0.0);
  EXPECT_EQ(max_abs_diff(roll(roll(x, 3, 2), 3, -2), x), 0.0);
  EXPECT_EQ(max_abs_diff(permute(permute(x, {2, 0, 3, 1}), {1, 3, 0, 2}), x), 0.0);
}

TEST(Elementwise, SymmetricPadRepeatsEdge) {
  auto p = pad(D({1, 3}, {1, 2, 3}), 1, 1, 2, PadMode::kSymmetric);
  std::vector<double> expected{1, 1, 2, 3, 3, 2};
  EXPECT_EQ(p.vec(), expected);
}

TEST(Autograd, NonFiniteIsAnError) {
  EXPECT_THROW(pow(D::scalar(-1.0), 0.5), NumericError);
  EXPECT_THROW(div(D::ones({2}), D::zeros({2})), NumericError);
}

TEST(Autograd, BackwardRequiresScalar) {
  D x = D::ones({3});
  x.set_requires_grad(true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Gradcheck, SumOfSquares) {
  D x({3}, {1, 2, 3});
  auto report = gradcheck([](const std::vector<D>& in) { return sum(square(in[0])); }, {x}, 1e-7);
  EXPECT_TRUE(report.passed) << report.max_error;
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Gradcheck, ConvComposedWithMean) {
  Rng rng(11);
  auto x = random_tensor({1, 2, 5, 5}, rng);
  auto w = random_tensor({3, 2, 3, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto report = gradcheck(
      [](const std::vector<D>& in) { return mean(conv2d(in[0], in[1], in[2], 1, 1, 1)); }, {x, w, b}, 1e-6);
  EXPECT_TRUE(report.passed) << report.max_error;
}

TEST(Gradcheck, RejectsNonScalarClosure) {
  EXPECT_THROW(gradcheck([](const std::vector<D>& in) { return in[0]; }, {D::ones({2})}, 1e-5), ContractError);
}

// Every differentiable op, contracted against fixed random weights, 3 seeds.
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  std::function<D(const std::vector<D>&)> op;
  double lo = -1.0, hi = 1.0;
};

std::vector<OpCase> op_cases() {
  return {
      {"add", {{2, 3}, {2, 3}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add_broadcast", {{2, 3, 4}, {1, 3, 1}}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub", {{2, 3}, {2, 1}}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{2, 3}, {1, 3}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"div", {{2, 3}, {2, 3}}, [](auto& v) { return div(v[0], v[1]); }, 0.5, 2.0},
      {"scale", {{5}}, [](auto& v) { return scale(v[0], 3.0); }},
      {"add_scalar", {{5}}, [](auto& v) { return add_scalar(v[0], 3.0); }},
      {"square", {{5}}, [](auto& v) { return square(v[0]); }},
      {"abs", {{6}}, [](auto& v) { return abs(v[0]); }},
      {"pow", {{5}}, [](auto& v) { return pow(v[0], 1.7); }, 0.2, 2.0},
      {"relu", {{6}}, [](auto& v) { return relu(v[0]); }},
      {"sigmoid", {{6}}, [](auto& v) { return sigmoid(v[0]); }, -4, 4},
      {"gelu", {{6}}, [](auto& v) { return gelu(v[0]); }, -3, 3},
      {"clamp", {{6}}, [](auto& v) { return clamp(v[0], -0.5, 0.5); }},
      {"sum", {{2, 3}}, [](auto& v) { return sum(v[0]); }},
      {"mean", {{2, 3}}, [](auto& v) { return mean(v[0]); }},
      {"mean_trailing", {{2, 3, 4}}, [](auto& v) { return mean_trailing(v[0], 1); }},
      {"reshape", {{2, 6}}, [](auto& v) { return reshape(v[0], {3, -1}); }},
      {"permute", {{2, 3, 4}}, [](auto& v) { return permute(v[0], {2, 0, 1}); }},
      {"transpose", {{2, 3}}, [](auto& v) { return transpose(v[0], 0, 1); }},
      {"concat", {{2, 3}, {2, 2}}, [](auto& v) { return concat<double>({v[0], v[1]}, 1); }},
      {"slice", {{4, 5}}, [](auto& v) { return slice(v[0], 1, 1, 3); }},
      {"pad_zero", {{2, 3}}, [](auto& v) { return pad(v[0], 1, 1, 2, PadMode::kZero); }},
      {"pad_symmetric", {{2, 3}}, [](auto& v) { return pad(v[0], 1, 2, 3, PadMode::kSymmetric); }},
      {"roll", {{2, 5}}, [](auto& v) { return roll(v[0], 1, 2); }},
      {"gather_rows", {{4, 3}}, [](auto& v) { return gather_rows(v[0], {3, 0, 0, 2, 1}); }},
      {"linear", {{2, 3, 4}, {5, 4}, {5}}, [](auto& v) { return linear(v[0], v[1], v[2]); }},
      {"matmul", {{2, 3, 4}, {2, 4, 2}}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"matmul_tt", {{2, 4, 3}, {2, 2, 4}}, [](auto& v) { return matmul(v[0], v[1], true, true); }},
      {"softmax", {{3, 4}}, [](auto& v) { return softmax(v[0], 0); }, -3, 3},
      {"layer_norm", {{2, 4, 3}, {4}, {4}}, [](auto& v) { return layer_norm(v[0], 1, v[1], v[2]); }},
      {"conv2d_strided", {{1, 2, 5, 5}, {3, 2, 3, 3}}, [](auto& v) { return conv2d(v[0], v[1], D{}, 2, 1, 1); }},
      {"conv2d_dilated", {{1, 2, 6, 6}, {2, 2, 3, 3}, {2}}, [](auto& v) { return conv2d(v[0], v[1], v[2], 1, 2, 2); }},
      {"upsample_nearest", {{1, 2, 2, 3}}, [](auto& v) { return upsample_nearest(v[0], 2); }},
      {"avg_pool2", {{1, 2, 5, 4}}, [](auto& v) { return avg_pool2(v[0]); }},
      {"filter_valid", {{2, 7, 3}}, [](auto& v) { return filter_valid(v[0], 1, {0.25, 0.5, -0.125}); }},
  };
}

TEST(Gradcheck, EveryOpThreeSeeds) {
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed * 101 + 3);
      std::vector<D> inputs;
      for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
      // Keep kinks (abs, relu, clamp) away from the finite-difference stencil.
      for (auto& in : inputs)
        for (auto& v : in.mutable_data())
          if (std::abs(std::abs(v) - 0.5) < 1e-3 || std::abs(v) < 1e-3) v += 0.01;
      const D probe = c.op(inputs);
      const D weights = random_tensor(probe.shape(), rng);
      auto report = gradcheck(
          [&](const std::vector<D>& in) { return sum(mul(c.op(in), weights)); }, inputs, 1e-5);
      EXPECT_TRUE(report.passed) << c.name << " seed " << seed << " err " << report.max_error;
    }
  }
}

}  // namespace
}  // namespace dustlab
