// Copyright 2026 The SMILE Workbench Authors.
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


#include "smile/diffcore.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "testing.hpp"

namespace smile::diff {
namespace {

void fill_normal(Tensor& t, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (double& v : t.value) v = normal(rng);
}

/// Fixed random projection turning a vector output into a scalar loss.
double project(std::span<const double> y, std::span<double> dy, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double w = normal(rng);
    s += w * y[i];
    if (!dy.empty()) dy[i] = w;
  }
  return s;
}

TEST(Kernels, BasicValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  Vec p(5);
  softmax(Vec(5, 3.7), 1.0, p);
  for (double v : p) EXPECT_DOUBLE_EQ(v, 0.2);
  EXPECT_GT(sigmoid(800.0), 0.0);
  EXPECT_TRUE(std::isfinite(sigmoid(-800.0)));
}

TEST(Kernels, ShapeMismatchesThrow) {
  ParameterStore ps;
  auto& w = ps.add("w", {3, 2});
  auto& b = ps.add("b", {3});
  Vec y(3);
  EXPECT_THROW(linear(w, b, Vec(3), y), InvalidArgument);
  Vec bad(2);
  EXPECT_THROW(relu(Vec(3), bad), InvalidArgument);
  EXPECT_THROW(softmax(Vec(3), 1.0, bad), InvalidArgument);
  EXPECT_THROW(cosine_similarity(Vec(3), Vec(2)), InvalidArgument);
  EXPECT_THROW(kl_divergence(Vec(3), Vec(2)), InvalidArgument);
  EXPECT_THROW(concat({Vec(2), Vec(2)}, y), InvalidArgument);
}

TEST(GradCheck, LinearReluSigmoid) {
  ParameterStore ps;
  auto& w1 = ps.add("w1", {5, 4});
  auto& b1 = ps.add("b1", {5});
  auto& w2 = ps.add("w2", {1, 5});
  auto& b2 = ps.add("b2", {1});
  auto& x = ps.add("x", {4});
  fill_normal(w1, 1);
  fill_normal(b1, 2);
  fill_normal(w2, 3);
  fill_normal(x, 4);
  const auto loss = [&](bool g) {
    Vec h(5), o(1);
    linear(w1, b1, x.value, h);
    relu(h, h);
    linear(w2, b2, h, o);
    const double y = sigmoid(o[0]);
    if (g) {
      const Vec dout = {sigmoid_backward(y, 1.0)};
      Vec dh(5, 0.0), dpre(5, 0.0), dx(4, 0.0);
      linear_backward(w2, b2, h, dout, dh);
      relu_backward(h, dh, dpre);
      linear_backward(w1, b1, x.value, dpre, dx);
      for (std::size_t i = 0; i < 4; ++i) x.grad[i] += dx[i];
    }
    return y;
  };
  EXPECT_LT(grad_check(loss, ps).max_rel_error, 1e-4);
}

TEST(GradCheck, SoftmaxWithTemperature) {
  for (double temp : {1.0, 0.3, 2.5}) {
    ParameterStore ps;
    auto& x = ps.add("x", {7});
    fill_normal(x, 5);
    const auto loss = [&](bool g) {
      Vec p(7), dp(7);
      softmax(x.value, temp, p);
      const double v = project(p, dp, 9);
      if (g) softmax_backward(p, dp, temp, x.grad);
      return v;
    };
    EXPECT_LT(grad_check(loss, ps).max_rel_error, 1e-4) << temp;
  }
}

TEST(GradCheck, ConcatAndMeanPool) {
  ParameterStore ps;
  auto& a = ps.add("a", {3});
  auto& b = ps.add("b", {2});
  auto& r = ps.add("rows", {4, 5});
  fill_normal(a, 1);
  fill_normal(b, 2);
  fill_normal(r, 3);
  const auto loss = [&](bool g) {
    Vec c(5), dc(5);
    concat({a.value, b.value}, c);
    double v = project(c, dc, 4);
    std::vector<std::span<const double>> rows;
    for (std::size_t i = 0; i < 4; ++i) rows.push_back(r.row(i));
    Vec m(5), dm(5);
    mean_pool(rows, m);
    v += project(m, dm, 5);
    if (g) {
      concat_backward(dc, {a.grad, b.grad});
      std::vector<std::span<double>> drows;
      for (std::size_t i = 0; i < 4; ++i) drows.push_back(r.grad_row(i));
      mean_pool_backward(4, dm, drows);
    }
    return v;
  };
  EXPECT_LT(grad_check(loss, ps).max_rel_error, 1e-4);
}

TEST(GradCheck, CosineSimilarity) {
  ParameterStore ps;
  auto& a = ps.add("a", {6});
  auto& b = ps.add("b", {6});
  fill_normal(a, 11);
  fill_normal(b, 12);
  const auto loss = [&](bool g) {
    const double c = cosine_similarity(a.value, b.value);
    if (g) cosine_similarity_backward(a.value, b.value, 1.0, a.grad, b.grad);
    return c;
  };
  EXPECT_LT(grad_check(loss, ps).max_rel_error, 1e-4);
}

TEST(Cosine, ZeroVectorStaysFinite) {
  const Vec z(4, 0.0), v = {1, 2, 3, 4};
  EXPECT_EQ(cosine_similarity(z, v), 0.0);
  Vec da(4, 0.0), db(4, 0.0);
  cosine_similarity_backward(z, v, 1.0, da, db);
  EXPECT_TRUE(all_finite(da));
  EXPECT_TRUE(all_finite(db));
}

TEST(Bce, AnalyticValues) {
  const Vec y = {1, 0, 1, 0};
  EXPECT_LE(bce_loss(y, y), 1e-6);
  EXPECT_NEAR(bce_loss(Vec(4, 0.5), y), std::numbers::ln2, 1e-15);
  EXPECT_THROW(bce_loss(Vec{}, Vec{}), InvalidArgument);
  EXPECT_THROW(bce_loss(Vec{0.5}, Vec{1, 0}), InvalidArgument);
}

TEST(Bce, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    Vec p(33), y(33);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = u(rng);
      y[i] = u(rng) < 0.4 ? 1.0 : 0.0;
    }
    double want = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double q = std::min(std::max(p[i], 1e-7), 1.0 - 1e-7);
      want -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
    }
    want /= static_cast<double>(p.size());
    EXPECT_NEAR(bce_loss(p, y), want, 1e-9);
  }
}

TEST(GradCheck, BceAndKl) {
  ParameterStore ps;
  auto& x = ps.add("x", {6});
  auto& z = ps.add("z", {6});
  fill_normal(x, 21);
  fill_normal(z, 22);
  const Vec y = {1, 0, 0, 1, 1, 0};
  const auto loss = [&](bool g) {
    Vec p(6), dp(6, 0.0);
    for (std::size_t i = 0; i < 6; ++i) p[i] = sigmoid(x.value[i]);
    double v = bce_loss(p, y, g ? std::span<double>(dp) : std::span<double>{});
    Vec a(6), b(6), da(6, 0.0), db(6, 0.0);
    softmax(x.value, 1.0, a);
    softmax(z.value, 1.0, b);
    v += kl_divergence(a, b, g ? std::span<double>(da) : std::span<double>{}, g ? std::span<double>(db) : std::span<double>{});
    if (g) {
      for (std::size_t i = 0; i < 6; ++i) x.grad[i] += sigmoid_backward(p[i], dp[i]);
      softmax_backward(a, da, 1.0, x.grad);
      softmax_backward(b, db, 1.0, z.grad);
    }
    return v;
  };
  EXPECT_LT(grad_check(loss, ps).max_rel_error, 1e-4);
}

TEST(Kl, AnalyticValues) {
  const Vec p = {0.2, 0.3, 0.5};
  EXPECT_EQ(kl_divergence(p, p), 0.0);
  EXPECT_NEAR(kl_divergence(Vec{1, 0}, Vec{0.5, 0.5}), std::numbers::ln2, 1e-15);
  // q is floored, so a zero in q does not produce an infinity.
  EXPECT_TRUE(std::isfinite(kl_divergence(Vec{0.5, 0.5}, Vec{1, 0})));
  EXPECT_GE(kl_divergence(Vec{0.1, 0.9}, Vec{0.6, 0.4}), 0.0);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParameterStore ps;
  auto& w = ps.add("w", {3});
  fill_normal(w, 1);
  const Vec before = w.value;
  ps.adam_step({});
  EXPECT_EQ(w.value, before);
  EXPECT_EQ(ps.timestep(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterStore ps;
  auto& w = ps.add("w", {1});
  w.value[0] = 2.0;
  w.grad[0] = 1.0;
  ps.adam_step({.lr = 0.01});
  EXPECT_NEAR(w.value[0], 2.0 - 0.01, 1e-9);
  EXPECT_EQ(w.grad[0], 0.0);
}

TEST(Adam, MinimisesAQuadratic) {
  ParameterStore ps;
  auto& w = ps.add("w", {1});
  w.value[0] = 1.0;
  double prev = 1.0;
  for (int i = 0; i < 100; ++i) {
    w.grad[0] = 2.0 * w.value[0];
    ps.adam_step({.lr = 0.05});
    const double f = w.value[0] * w.value[0];
    if (i > 0 && i < 15) EXPECT_LT(f, prev);
    prev = f;
  }
  EXPECT_LT(std::abs(w.value[0]), 1.0);
}

TEST(GradCheck, QuadraticIsExact) {
  ParameterStore ps;
  auto& w = ps.add("w", {8});
  fill_normal(w, 4);
  const auto loss = [&](bool g) {
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      s += 0.5 * static_cast<double>(i + 1) * w.value[i] * w.value[i];
      if (g) w.grad[i] += static_cast<double>(i + 1) * w.value[i];
    }
    return s;
  };
  EXPECT_LT(grad_check(loss, ps).max_rel_error, 1e-7);
}

TEST(GradCheck, CorruptedGradientIsCaught) {
  ParameterStore ps;
  auto& w = ps.add("w", {8});
  fill_normal(w, 4);
  const auto loss = [&](bool g) {
    double s = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      s += w.value[i] * w.value[i] * w.value[i];
      if (g) w.grad[i] += 2.0 * 3.0 * w.value[i] * w.value[i];
    }
    return s;
  };
  EXPECT_NEAR(grad_check(loss, ps).max_rel_error, 1.0, 1e-6);
}

TEST(GradCheck, NonFiniteLossFaults) {
  ParameterStore ps;
  ps.add("w", {2});
  EXPECT_THROW(grad_check([](bool) { return std::nan(""); }, ps), NumericFault);
}

TEST(GradCheck, LargeTensorsAreSampled) {
  ParameterStore ps;
  auto& w = ps.add("w", {100, 20});
  fill_normal(w, 8);
  const auto loss = [&](bool g) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); i += 7) {
      s += std::sin(w.value[i]);
      if (g) w.grad[i] += std::cos(w.value[i]);
    }
    return s;
  };
  const auto r = grad_check(loss, ps);
  EXPECT_GE(r.coords_checked, 64u);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(ParameterStoreTest, NamesShapesAndFaults) {
  ParameterStore ps;
  ps.add("a", {2, 3});
  ps.add("b", {4});
  EXPECT_THROW(ps.add("a", {1}), InvalidArgument);
  EXPECT_THROW(ps.at("zzz"), InvalidArgument);
  EXPECT_EQ(ps.names(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(ps.parameter_count(), 10u);
  ps.at("b").grad[2] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(ps.check_finite(), NumericFault);
}

TEST(ParameterStoreTest, SaveLoadRoundTrip) {
  testing::TempDir dir("params");
  ParameterStore ps;
  auto& a = ps.add("a", {3, 2});
  fill_normal(a, 1);
  a.grad.assign(6, 1.0);
  ps.adam_step({});
  ps.save(dir.path() / "ckpt", {{"seed", 1}});
  ParameterStore other;
  other.add("a", {3, 2});
  other.load(dir.path() / "ckpt");
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(other.at("a").value[i], static_cast<double>(static_cast<float>(a.value[i])));
  EXPECT_EQ(other.timestep(), 1u);
  ParameterStore wrong;
  wrong.add("a", {2, 2});
  EXPECT_ANY_THROW(wrong.load(dir.path() / "ckpt"));
  EXPECT_THROW(other.load(dir.path() / "nothing"), ArtifactError);
}

TEST(Purity, RepeatedForwardIsBitIdentical) {
  ParameterStore ps;
  auto& w = ps.add("w", {8, 8});
  auto& b = ps.add("b", {8});
  fill_normal(w, 3);
  fill_normal(b, 4);
  std::mt19937_64 rng(1);
  const Vec x = testing::random_vec(8, rng);
  Vec y1(8), y2(8), p1(8), p2(8);
  linear(w, b, x, y1);
  softmax(y1, 0.7, p1);
  linear(w, b, x, y2);
  softmax(y2, 0.7, p2);
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(p1, p2);
}

}  // namespace
}  // namespace smile::diff
