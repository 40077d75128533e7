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


#include "smile/model.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "testing.hpp"

namespace smile::model {
namespace {

constexpr std::size_t kK = 4;

/// Small hand-built world: 12 items over a 4-code codebook.
struct World {
  ItemSideInfo items;
  NeighborTable neighbors{kK, 3};
  ModelDims dims;
  std::vector<TrainingSample> samples;

  World() {
    std::mt19937_64 rng(5);
    const std::size_t n = 12;
    items.sids.resize(n);
    items.features = Matrix(n, kItemFeatureDim);
    for (std::size_t i = 0; i < n; ++i) {
      items.sids[i] = {static_cast<quant::Code>(i % kK), static_cast<quant::Code>((i / 2) % kK),
                       static_cast<quant::Code>((i / 3) % kK), static_cast<quant::Code>(i % 3),
                       static_cast<quant::Code>((i * 7) % kK)};
      for (std::size_t f = 0; f < kItemFeatureDim; ++f) items.features(i, f) = std::log1p(static_cast<double>(rng() % 50));
    }
    for (std::size_t p = 0; p < kK * kK; ++p) {
      std::vector<std::uint32_t> list;
      for (std::size_t q = 1; q <= 3; ++q) list.push_back(static_cast<std::uint32_t>((p + q * 5) % (kK * kK)));
      neighbors.set(p, list);
    }
    dims.n_items = n;
    dims.n_users = 5;
    dims.n_queries = 4;
    dims.codebook_size = kK;
    dims.d = 6;
    dims.gate_hidden = 5;
    dims.tower_h1 = 7;
    dims.tower_h2 = 4;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t s = 0; s < 8; ++s) {
      TrainingSample t;
      t.user = static_cast<std::uint32_t>(s % dims.n_users);
      t.query = static_cast<std::uint32_t>(s % dims.n_queries);
      t.item = static_cast<std::uint32_t>((s * 5) % n);
      t.context = {u(rng), u(rng) - 0.5, u(rng) - 0.5, static_cast<double>(s % 2)};
      for (std::size_t h = 0; h < s % 4; ++h) t.history.push_back(static_cast<std::uint32_t>((s + h * 3) % n));
      t.label = s % 3 == 0 ? 1 : 0;
      samples.push_back(t);
    }
  }

  Batch batch(std::size_t b, std::size_t extra) const {
    Batch out{std::span(samples).first(b), {}};
    for (std::size_t i = 0; i < b * extra; ++i) out.extra_negatives.push_back(static_cast<std::uint32_t>((i * 5 + 1) % dims.n_items));
    return out;
  }
};

void zero_all(SmileModel& m, std::initializer_list<const char*> prefixes) {
  for (const auto& name : m.params().names()) {
    for (const char* p : prefixes) {
      if (name.rfind(p, 0) == 0) std::ranges::fill(m.params().at(name).value, 0.0);
    }
  }
}

TEST(Variants, NamesRoundTrip) {
  for (auto v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("nope"), InvalidArgument);
}

TEST(Combine, EndpointsAreExact) {
  const Vec id = {0.3, -1.7, 2.0}, rq = {5.5, 0.25, -3.0};
  Vec out(3);
  combine(id, rq, 1.0, out);
  EXPECT_EQ(out, id);
  combine(id, rq, 0.0, out);
  EXPECT_EQ(out, rq);
  Vec mid(2);
  combine(Vec{2, 0}, Vec{0, 2}, 0.5, mid);
  EXPECT_EQ(mid, (Vec{1, 1}));
  EXPECT_THROW(combine(id, Vec{1}, 0.5, out), InvalidArgument);
}

TEST(FinalItemRep, DegenerateAndArithmetic) {
  const Vec c = {0.7, -0.2}, o = {9.0, 4.0};
  Vec out(2);
  final_item_rep(c, o, 0.0, out);
  EXPECT_EQ(out, c);
  final_item_rep(Vec{1, 1}, Vec{2, 0}, 0.5, out);
  EXPECT_EQ(out, (Vec{2, 1}));
  // Linearity in the combined input.
  const Vec a = {0.5, 1.5}, b = {-2.0, 0.25};
  Vec ab(2), fa(2);
  final_item_rep(Vec{a[0] + b[0], a[1] + b[1]}, o, 0.5, ab);
  final_item_rep(a, o, 0.5, fa);
  EXPECT_DOUBLE_EQ(ab[0], fa[0] + b[0]);
  EXPECT_DOUBLE_EQ(ab[1], fa[1] + b[1]);
}

TEST(TotalLoss, WeightedSum) {
  EXPECT_DOUBLE_EQ(total_loss(0.6, 2.0, 1.0, 0.01, 0.05), 0.6 + 0.02 + 0.05);
  EXPECT_EQ(total_loss(0.6, 2.0, 1.0, 0.0, 0.0), 0.6);
}

TEST(TransferLoss, ZeroWhenDistributionsCoincide) {
  const Vec v = {0.1, 0.9, -0.4};
  for (double t : {0.0, 0.3, 1.0}) EXPECT_EQ(transfer_loss(v, v, t, 1.0), 0.0);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const Vec a = testing::random_vec(6, rng), b = testing::random_vec(6, rng);
    EXPECT_GE(transfer_loss(a, b, 0.37, 1.0), 0.0);
  }
}

TEST(TransferLoss, StopGradientDirections) {
  const Vec id = {0.4, -1.0, 0.3, 0.8}, rq = {-0.5, 0.2, 1.1, 0.0};
  Vec d_id(4, 0.0), d_rq(4, 0.0);
  TransferGrads g{d_id, d_rq, 0.0};
  transfer_loss(id, rq, 1.0, 1.0, &g);
  for (double v : d_id) EXPECT_EQ(v, 0.0);
  EXPECT_GT(std::abs(d_rq[0]) + std::abs(d_rq[2]), 0.0);
  std::ranges::fill(d_id, 0.0);
  std::ranges::fill(d_rq, 0.0);
  transfer_loss(id, rq, 0.0, 1.0, &g);
  for (double v : d_rq) EXPECT_EQ(v, 0.0);
  EXPECT_GT(std::abs(d_id[0]) + std::abs(d_id[2]), 0.0);
}

TEST(TransferLoss, EachBranchMatchesFiniteDifferences) {
  // With the stop-gradient argument frozen, each branch is an ordinary function.
  const Vec id = {0.4, -1.0, 0.3, 0.8}, rq = {-0.5, 0.2, 1.1, 0.0};
  Vec p_id(4), p_rq(4);
  diff::softmax(id, 1.0, p_id);
  diff::softmax(rq, 1.0, p_rq);
  const FrozenTargets frozen{p_id, p_rq};
  const double t = 0.35, h = 1e-6;
  Vec d_id(4, 0.0), d_rq(4, 0.0);
  TransferGrads g{d_id, d_rq, 0.0};
  transfer_loss(id, rq, t, 1.0, &g, 1.0, false, &frozen);
  for (std::size_t j = 0; j < 4; ++j) {
    Vec up = rq, dn = rq;
    up[j] += h;
    dn[j] -= h;
    const double num_rq = (transfer_loss(id, up, t, 1.0, nullptr, 1.0, false, &frozen) -
                           transfer_loss(id, dn, t, 1.0, nullptr, 1.0, false, &frozen)) / (2 * h);
    EXPECT_NEAR(d_rq[j], num_rq, 1e-8);
    up = id;
    dn = id;
    up[j] += h;
    dn[j] -= h;
    const double num_id = (transfer_loss(up, rq, t, 1.0, nullptr, 1.0, false, &frozen) -
                           transfer_loss(dn, rq, t, 1.0, nullptr, 1.0, false, &frozen)) / (2 * h);
    EXPECT_NEAR(d_id[j], num_id, 1e-8);
  }
}

/// Independent scalar InfoNCE: -log(sum_pos e^{s/t} / sum_all e^{s/t}) averaged over anchors with positives.
double scalar_infonce(const Matrix& e, const std::vector<std::uint8_t>& mask, const Matrix& extra, std::size_t per,
                      double tau) {
  const std::size_t b = e.rows;
  auto cos = [](std::span<const double> x, std::span<const double> y) {
    return dot(x, y) / (std::sqrt(dot(x, x)) * std::sqrt(dot(y, y)));
  };
  double total = 0.0;
  int anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double num = 0.0, den = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const double x = std::exp(cos(e.row(i), e.row(j)) / tau);
      den += x;
      if (mask[i * b + j]) {
        num += x;
        any = true;
      }
    }
    for (std::size_t k = 0; k < per; ++k) den += std::exp(cos(e.row(i), extra.row(i * per + k)) / tau);
    if (!any) continue;
    total += -std::log(num / den);
    ++anchors;
  }
  return anchors ? total / anchors : 0.0;
}

TEST(Contrastive, AnalyticCases) {
  // Anchor 0: one positive at cosine 1, one negative at cosine -1.
  Matrix e(3, 2);
  e(0, 0) = 1;
  e(1, 0) = 2;
  e(2, 0) = -1;
  std::vector<std::uint8_t> mask(9, 0);
  mask[0 * 3 + 1] = 1;
  EXPECT_NEAR(contrastive_loss(e, mask, Matrix(), 0, 0.1), std::log1p(std::exp(-20.0)), 1e-15);

  // Equal similarities: |P| = 1, |N| = n gives log(1 + n).
  Matrix same(5, 3, 1.0);
  std::vector<std::uint8_t> m5(25, 0);
  m5[1] = 1;
  Matrix extra(5 * 2, 3, 1.0);
  EXPECT_NEAR(contrastive_loss(same, m5, extra, 2, 0.1), std::log(1.0 + 5.0), 1e-12);
}

TEST(Contrastive, MatchesScalarOracle) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 20; ++t) {
    const Matrix e = testing::random_matrix(8, 5, 100 + t);
    const Matrix extra = testing::random_matrix(8 * 4, 5, 200 + t);
    std::vector<std::uint8_t> mask(64, 0);
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t j = 0; j < 8; ++j) mask[i * 8 + j] = i != j && rng() % 4 == 0;
    }
    ContrastiveStats st;
    EXPECT_NEAR(contrastive_loss(e, mask, extra, 4, 0.1, nullptr, nullptr, &st), scalar_infonce(e, mask, extra, 4, 0.1),
                1e-9);
  }
}

TEST(Contrastive, GradientMatchesFiniteDifferences) {
  Matrix e = testing::random_matrix(6, 4, 3);
  Matrix extra = testing::random_matrix(12, 4, 4);
  std::vector<std::uint8_t> mask(36, 0);
  mask[1] = mask[6] = mask[2 * 6 + 5] = mask[3 * 6 + 4] = 1;
  Matrix de(6, 4), dx(12, 4);
  contrastive_loss(e, mask, extra, 2, 0.1, &de, &dx);
  const double h = 1e-6;
  for (std::size_t i = 0; i < e.data.size(); ++i) {
    const double s = e.data[i];
    e.data[i] = s + h;
    const double up = contrastive_loss(e, mask, extra, 2, 0.1);
    e.data[i] = s - h;
    const double dn = contrastive_loss(e, mask, extra, 2, 0.1);
    e.data[i] = s;
    EXPECT_NEAR(de.data[i], (up - dn) / (2 * h), 1e-6 * std::max(1.0, std::abs(de.data[i])));
  }
  for (std::size_t i = 0; i < extra.data.size(); ++i) {
    const double s = extra.data[i];
    extra.data[i] = s + h;
    const double up = contrastive_loss(e, mask, extra, 2, 0.1);
    extra.data[i] = s - h;
    const double dn = contrastive_loss(e, mask, extra, 2, 0.1);
    extra.data[i] = s;
    EXPECT_NEAR(dx.data[i], (up - dn) / (2 * h), 1e-6 * std::max(1.0, std::abs(dx.data[i])));
  }
}

TEST(Contrastive, NegativeOrderDoesNotMatter) {
  const Matrix e = testing::random_matrix(4, 3, 8);
  Matrix extra = testing::random_matrix(4 * 3, 3, 9);
  std::vector<std::uint8_t> mask(16, 0);
  mask[1] = mask[4] = 1;
  const double before = contrastive_loss(e, mask, extra, 3, 0.1);
  // Reverse each anchor's block of extra negatives.
  Matrix swapped = extra;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 3; ++k) std::ranges::copy(extra.row(i * 3 + k), swapped.row(i * 3 + (2 - k)).begin());
  }
  EXPECT_NEAR(contrastive_loss(e, mask, swapped, 3, 0.1), before, 1e-12);
}

TEST(Contrastive, CloserPositiveLowersLoss) {
  Matrix e = testing::random_matrix(4, 3, 10);
  std::vector<std::uint8_t> mask(16, 0);
  mask[0 * 4 + 1] = 1;
  const double before = contrastive_loss(e, mask, Matrix(), 0, 0.1);
  // Move the positive halfway towards the anchor's direction.
  for (std::size_t j = 0; j < 3; ++j) e(1, j) = 0.5 * e(1, j) + 0.5 * e(0, j) * 3.0;
  EXPECT_LT(contrastive_loss(e, mask, Matrix(), 0, 0.1), before);
}

TEST(Contrastive, PositiveFreeBatchAndDomain) {
  const Matrix e = testing::random_matrix(3, 2, 1);
  std::vector<std::uint8_t> mask(9, 0);
  ContrastiveStats st;
  EXPECT_EQ(contrastive_loss(e, mask, Matrix(), 0, 0.1, nullptr, nullptr, &st), 0.0);
  EXPECT_EQ(st.positive_free_batches, 1u);
  EXPECT_THROW(contrastive_loss(testing::random_matrix(1, 2, 1), std::vector<std::uint8_t>(1, 0), Matrix(), 0, 0.1),
               InvalidArgument);
  EXPECT_THROW(contrastive_loss(e, mask, Matrix(), 0, 0.0), InvalidArgument);
}

TEST(PositiveMask, SamePairOrNeighbor) {
  NeighborTable nb(3, 2);
  for (std::size_t p = 0; p < 9; ++p) nb.set(p, {static_cast<std::uint32_t>((p + 1) % 9), static_cast<std::uint32_t>((p + 2) % 9)});
  const std::vector<quant::OpqPair> pairs = {{0, 0}, {0, 1}, {0, 0}, {2, 2}};
  const auto m = positive_mask(pairs, nb);
  EXPECT_EQ(m[0 * 4 + 1], 1);  // (0,1) is index 1, a neighbor of index 0
  EXPECT_EQ(m[0 * 4 + 2], 1);  // identical pair
  EXPECT_EQ(m[0 * 4 + 0], 0);  // never self
  EXPECT_EQ(m[0 * 4 + 3], 0);
  EXPECT_EQ(m[3 * 4 + 0], 1);  // (2,2) = 8, neighbors 0 and 1
}

TEST(Model, GateIsHalfWhenZeroAndAlwaysInside) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 3);
  zero_all(m, {"gate."});
  const Vec ctx = {0.3, 0.1, -0.2, 1.0}, user(6, 0.7), feats = {1.0, 2.0, 3.0};
  EXPECT_EQ(m.transfer_gate(ctx, user, feats), 0.5);
  SmileModel r(w.dims, {}, Variant::kSmile, 4);
  r.perturb(0.5, 4);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100000; ++i) {
    const Vec c = testing::random_vec(4, rng, 3.0), u = testing::random_vec(6, rng, 3.0), f = testing::random_vec(3, rng, 3.0);
    const double g = r.transfer_gate(c, u, f);
    ASSERT_GT(g, 0.0);
    ASSERT_LT(g, 1.0);
  }
}

TEST(Model, FreshGateIsHalfForEveryRequest) {
  World w;
  SmileModel m(w.dims, {}, Variant::kIidRq, 9);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const Vec c = testing::random_vec(4, rng, 3.0), u = testing::random_vec(6, rng, 3.0), f = testing::random_vec(3, rng, 5.0);
    EXPECT_EQ(m.transfer_gate(c, u, f), 0.5);
  }
}

TEST(Model, FuseRqZeroAndSharedCodes) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 3);
  zero_all(m, {"emb.rq", "fuse.b"});
  Vec out(6);
  m.fuse_rq(w.items.sids[0], out);
  for (double v : out) EXPECT_EQ(v, 0.0);
  SmileModel r(w.dims, {}, Variant::kSmile, 3);
  quant::SemanticId a{1, 2, 3, 0, 0}, b{1, 2, 3, 2, 1};
  Vec oa(6), ob(6);
  r.fuse_rq(a, oa);
  r.fuse_rq(b, ob);
  EXPECT_EQ(oa, ob);
  EXPECT_THROW(r.fuse_rq(quant::SemanticId{kK, 0, 0, 0, 0}, oa), InvalidArgument);
}

TEST(Model, OpqEmbedZeroSharedAndDistinct) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 3);
  Vec a(6), b(6), c(6);
  m.opq_embed({0, 0, 0, 1, 2}, a);
  m.opq_embed({3, 3, 3, 1, 2}, b);
  m.opq_embed({0, 0, 0, 2, 1}, c);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  zero_all(m, {"emb.opq"});
  m.opq_embed({0, 0, 0, 1, 2}, a);
  for (double v : a) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(m.opq_embed({0, 0, 0, 0, kK}, a), InvalidArgument);
}

TEST(Model, ZeroTowerPredictsHalfAndOutputsStayInside) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 3);
  zero_all(m, {"tower."});
  EXPECT_EQ(m.predict(w.samples[0], w.items), 0.5);
  SmileModel r(w.dims, {.init_std = 1.0}, Variant::kSmile, 5);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10000; ++i) {
    TrainingSample s = w.samples[static_cast<std::size_t>(i) % w.samples.size()];
    s.user = static_cast<std::uint32_t>(rng() % w.dims.n_users);
    s.item = static_cast<std::uint32_t>(rng() % w.dims.n_items);
    for (double& c : s.context) c = testing::random_vec(1, rng, 2.0)[0];
    const double p = r.predict(s, w.items);
    ASSERT_GT(p, 0.0);
    ASSERT_LT(p, 1.0);
  }
}

TEST(Model, LookupsAreRangeChecked) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 3);
  TrainingSample s = w.samples[0];
  s.user = 99;
  EXPECT_THROW(m.predict(s, w.items), InvalidArgument);
  s = w.samples[0];
  s.item = 99;
  EXPECT_THROW(m.predict(s, w.items), InvalidArgument);
  s = w.samples[0];
  s.history.push_back(1000);
  EXPECT_THROW(m.predict(s, w.items), InvalidArgument);
}

TEST(Model, GateCombinationEndpointsInsideTheModel) {
  World w;
  SmileModel m(w.dims, {}, Variant::kIidRq, 3);
  const auto& s = w.samples[1];
  Vec rq(6);
  m.fuse_rq(w.items.sids[s.item], rq);
  const auto id = m.params().at("emb.id").row(s.item);
  // Saturate the gate through its output bias.
  zero_all(m, {"gate.W2"});
  m.params().at("gate.b2").value[0] = 1000.0;
  const Vec at_one = m.item_representation(s.item, s, w.items);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(at_one[j], id[j]);
  m.params().at("gate.b2").value[0] = -1000.0;
  const Vec at_zero = m.item_representation(s.item, s, w.items);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(at_zero[j], rq[j]);
}

TEST(Model, FullObjectivePassesGradCheckForEveryVariant) {
  World w;
  for (auto v : kAllVariants) {
    HyperParams hp;
    hp.alpha1 = 0.5;  // larger weights make the auxiliary losses visible to the checker
    hp.alpha2 = 0.5;
    SmileModel m(w.dims, hp, v, 11);
    m.perturb(0.1, 12);
    const auto r = m.grad_check(w.batch(4, hp.extra_negatives), w.items, w.neighbors);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(v) << " worst " << r.worst_tensor;
  }
}

TEST(Model, CorruptedGradientIsDetectedOnTheFullObjective) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 11);
  const auto b = w.batch(4, 4);
  const auto r = diff::grad_check(
      [&](bool g) {
        const double v = m.loss(b, w.items, w.neighbors, g).total;
        if (g) {
          for (double& x : m.params().at("tower.W1").grad) x *= 2.0;
        }
        return v;
      },
      m.params(), {.only = {"tower.W1"}});
  EXPECT_NEAR(r.max_rel_error, 1.0, 1e-3);
}

Vec flat_grads(SmileModel& m, const Batch& b, const World& w) {
  m.params().zero_grad();
  m.loss(b, w.items, w.neighbors, true);
  Vec g;
  for (const auto& n : m.params().names()) {
    const auto& t = m.params().at(n).grad;
    g.insert(g.end(), t.begin(), t.end());
  }
  return g;
}

TEST(Model, TotalGradientIsWeightedSumOfComponents) {
  World w;
  const auto b = w.batch(6, 4);
  auto grads = [&](double a1, double a2) {
    HyperParams hp;
    hp.alpha1 = a1;
    hp.alpha2 = a2;
    SmileModel m(w.dims, hp, Variant::kSmile, 2);
    return flat_grads(m, b, w);
  };
  const Vec g00 = grads(0, 0), g10 = grads(0.3, 0), g01 = grads(0, 0.7), g11 = grads(0.3, 0.7);
  for (std::size_t i = 0; i < g00.size(); ++i) EXPECT_NEAR(g11[i], g10[i] + g01[i] - g00[i], 1e-12);

  HyperParams none;
  none.alpha1 = none.alpha2 = 0.0;
  SmileModel m(w.dims, none, Variant::kSmile, 2);
  const auto lb = m.loss(b, w.items, w.neighbors, false);
  EXPECT_EQ(lb.total, lb.bce);
}

TEST(Model, VariantsCutTheExpectedTables) {
  World w;
  const auto b = w.batch(6, 4);
  auto touched = [&](Variant v, const std::string& name) {
    SmileModel m(w.dims, {}, v, 1);
    m.perturb(0.1, 2);
    m.params().zero_grad();
    m.loss(b, w.items, w.neighbors, true);
    const auto& g = m.params().at(name).grad;
    return std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; });
  };
  EXPECT_FALSE(touched(Variant::kOnlySid, "emb.id"));
  EXPECT_TRUE(touched(Variant::kOnlySid, "emb.opq1"));
  EXPECT_FALSE(touched(Variant::kOnlySid, "gate.W1"));
  EXPECT_TRUE(touched(Variant::kIidSid, "emb.id"));
  EXPECT_FALSE(touched(Variant::kIidSid, "fuse.W"));
  EXPECT_FALSE(touched(Variant::kIidRq, "emb.opq1"));
  EXPECT_TRUE(touched(Variant::kIidRq, "gate.W1"));
  EXPECT_FALSE(touched(Variant::kIidOpq, "emb.rq1"));
  EXPECT_FALSE(touched(Variant::kIidOpq, "gate.W1"));
  EXPECT_TRUE(touched(Variant::kIidOpq, "emb.opq2"));
  EXPECT_TRUE(touched(Variant::kSmile, "fuse.W"));
  EXPECT_TRUE(touched(Variant::kSmile, "emb.opq2"));
}

TEST(Model, GateGradientReachesEveryInputGroup) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 6);
  m.perturb(0.1, 7);
  m.params().zero_grad();
  m.loss(w.batch(8, 4), w.items, w.neighbors, true);
  const auto& g = m.params().at("gate.W1");
  const std::size_t in = g.cols();
  auto group_norm = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = from; c < to; ++c) s += std::abs(g.grad[r * in + c]);
    }
    return s;
  };
  EXPECT_GT(group_norm(0, 4), 0.0);                 // context
  EXPECT_GT(group_norm(4, 4 + w.dims.d), 0.0);      // user embedding
  EXPECT_GT(group_norm(4 + w.dims.d, in), 0.0);     // item features
  double rq_grad[3] = {0, 0, 0};
  for (int l = 0; l < 3; ++l) {
    for (double x : m.params().at("emb.rq" + std::to_string(l + 1)).grad) rq_grad[l] += std::abs(x);
    EXPECT_GT(rq_grad[l], 0.0);
  }
}

TEST(Model, ForwardIsPure) {
  World w;
  SmileModel m(w.dims, {}, Variant::kSmile, 8);
  const auto a = m.predict(w.samples, w.items);
  const auto b = m.predict(w.samples, w.items);
  EXPECT_EQ(a, b);
  const auto la = m.loss(w.batch(6, 4), w.items, w.neighbors, false);
  const auto lb = m.loss(w.batch(6, 4), w.items, w.neighbors, false);
  EXPECT_EQ(la.total, lb.total);
}

TEST(MakeSamples, HistoryHoldsPriorClicksOnly) {
  std::vector<data::Event> ev;
  auto add = [&](std::uint32_t user, std::uint32_t item, std::uint8_t label) {
    data::Event e;
    e.ts = ev.size();
    e.user = user;
    e.item = item;
    e.label = label;
    ev.push_back(e);
  };
  add(0, 1, 1);
  add(0, 2, 0);
  add(1, 3, 1);
  add(0, 4, 1);
  add(0, 5, 1);
  add(0, 6, 0);
  const auto s = make_samples(ev, 2);
  EXPECT_TRUE(s[0].history.empty());
  EXPECT_EQ(s[1].history, (std::vector<std::uint32_t>{1}));
  EXPECT_TRUE(s[2].history.empty());
  EXPECT_EQ(s[4].history, (std::vector<std::uint32_t>{1, 4}));
  EXPECT_EQ(s[5].history, (std::vector<std::uint32_t>{4, 5}));
  std::swap(ev[0], ev[3]);
  EXPECT_THROW(make_samples(ev, 2), InvalidArgument);
}

TEST(Model, DailyCountersOnlySeeEarlierDays) {
  std::vector<data::Event> ev;
  auto add = [&](std::uint32_t day, std::uint32_t item, std::uint8_t label, std::uint8_t order) {
    data::Event e;
    e.ts = ev.size();
    e.day = day;
    e.item = item;
    e.label = label;
    e.order = order;
    ev.push_back(e);
  };
  add(0, 0, 1, 0);
  add(1, 0, 0, 0);
  add(1, 1, 1, 1);
  add(2, 1, 0, 0);
  add(3, 0, 1, 0);
  ItemSideInfo info;
  info.sids.resize(2);
  info.features = Matrix(2, kItemFeatureDim, 9.0);
  add_daily_counters(info, ev, 4, 2);
  ASSERT_EQ(info.daily.size(), 4u);
  auto raw = [&](std::uint32_t day, std::uint32_t item) {
    std::vector<double> out;
    for (double v : info.features_at(day, item)) out.push_back(std::round(std::expm1(v)));
    return out;
  };
  using V = std::vector<double>;
  EXPECT_EQ(raw(0, 0), (V{0, 0, 0}));
  EXPECT_EQ(raw(1, 0), (V{1, 1, 0}));
  EXPECT_EQ(raw(2, 1), (V{1, 1, 1}));
  // Window of two days: day 3 sees days 1 and 2 only.
  EXPECT_EQ(raw(3, 0), (V{1, 0, 0}));
  EXPECT_EQ(raw(3, 1), (V{2, 1, 1}));
  // Past the table the static features apply.
  EXPECT_EQ(info.features_at(4, 0)[0], 9.0);

  const auto samples = make_samples(ev, 2);
  for (std::size_t i = 0; i < ev.size(); ++i) EXPECT_EQ(samples[i].day, ev[i].day);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  World w;
  HyperParams hp;
  hp.lr = 0.0;
  hp.batch_size = 4;
  SmileModel m(w.dims, hp, Variant::kSmile, 1);
  const auto before = m.params().at("tower.W1").value;
  const auto emb = m.params().at("emb.id").value;
  TrainConfig cfg;
  cfg.hp = hp;
  cfg.epochs = 1;
  train(m, w.samples, w.items, w.neighbors, cfg);
  EXPECT_EQ(m.params().at("tower.W1").value, before);
  EXPECT_EQ(m.params().at("emb.id").value, emb);
}

TEST(Train, FitsATinySeparableDataset) {
  World w;
  // Label is determined by the item: even items are clicked.
  std::vector<TrainingSample> data;
  for (std::uint32_t i = 0; i < 12; ++i) {
    TrainingSample s = w.samples[i % w.samples.size()];
    s.item = i;
    s.label = i % 2 == 0;
    data.push_back(s);
  }
  HyperParams hp;
  hp.lr = 0.01;
  hp.batch_size = 6;
  SmileModel m(w.dims, hp, Variant::kSmile, 1);
  TrainConfig cfg;
  cfg.hp = hp;
  cfg.epochs = 200;
  const auto r = train(m, data, w.items, w.neighbors, cfg);
  EXPECT_LT(r.curve.back().bce, 0.1);
  EXPECT_LT(r.curve.back().bce, r.curve.front().bce);
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
  World w;
  testing::TempDir dir("train-det");
  HyperParams hp;
  hp.batch_size = 4;
  TrainConfig cfg;
  cfg.hp = hp;
  cfg.epochs = 3;
  cfg.seed = 9;
  for (int run = 0; run < 2; ++run) {
    SmileModel m(w.dims, hp, Variant::kSmile, 4);
    train(m, w.samples, w.items, w.neighbors, cfg);
    m.params().save(dir.path() / ("m" + std::to_string(run)), {{"seed", 9}});
  }
  EXPECT_EQ(read_file(dir.path() / "m0.bin"), read_file(dir.path() / "m1.bin"));
  EXPECT_EQ(read_file(dir.path() / "m0.manifest.json"), read_file(dir.path() / "m1.manifest.json"));
}

TEST(Train, NonFiniteLossAbortsWithDiagnostics) {
  World w;
  HyperParams hp;
  hp.batch_size = 4;
  SmileModel m(w.dims, hp, Variant::kSmile, 4);
  m.params().at("tower.b3").value[0] = std::nan("");
  TrainConfig cfg;
  cfg.hp = hp;
  try {
    train(m, w.samples, w.items, w.neighbors, cfg);
    FAIL() << "expected a numeric fault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("items:"), std::string::npos);
  }
}

TEST(HyperParamsCheck, RejectsOutOfDomain) {
  World w;
  HyperParams hp;
  hp.tau = 0.0;
  EXPECT_THROW(SmileModel(w.dims, hp, Variant::kSmile, 1), InvalidArgument);
  hp = {};
  hp.lambda = -1.0;
  EXPECT_THROW(SmileModel(w.dims, hp, Variant::kSmile, 1), InvalidArgument);
}

}  // namespace
}  // namespace smile::model
