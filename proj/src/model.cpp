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

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

namespace smile::model {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kOnlySid:
      return "only_sid";
    case Variant::kIidSid:
      return "iid_sid";
    case Variant::kIidRq:
      return "iid_rq";
    case Variant::kIidOpq:
      return "iid_opq";
    case Variant::kSmile:
      return "smile";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw InvalidArgument("unknown variant '" + std::string(name) + "'");
}

VariantPlan plan_for(Variant v, const HyperParams& hp) {
  VariantPlan p;
  switch (v) {
    case Variant::kOnlySid:
      p.sid_as_ids = true;
      break;
    case Variant::kIidSid:
      p.sid_as_ids = true;
      p.use_id = true;
      break;
    case Variant::kIidRq:
      p.use_id = true;
      p.gated_rq = true;
      p.alpha1 = hp.alpha1;
      break;
    case Variant::kIidOpq:
      p.use_id = true;
      p.use_opq = true;
      p.alpha2 = hp.alpha2;
      p.lambda = hp.lambda;
      break;
    case Variant::kSmile:
      p.use_id = true;
      p.gated_rq = true;
      p.use_opq = true;
      p.alpha1 = hp.alpha1;
      p.alpha2 = hp.alpha2;
      p.lambda = hp.lambda;
      break;
  }
  return p;
}

ItemSideInfo make_item_side_info(const std::map<quant::ItemId, SemanticId>& sids, const data::Catalog& catalog) {
  ItemSideInfo info;
  const std::size_t n = catalog.size();
  info.sids.resize(n);
  info.features = Matrix(n, kItemFeatureDim);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = sids.find(static_cast<quant::ItemId>(i));
    if (it == sids.end()) throw InvalidArgument("make_item_side_info: item " + std::to_string(i) + " has no semantic id");
    info.sids[i] = it->second;
    info.features(i, 0) = std::log1p(static_cast<double>(catalog.impressions_7d[i]));
    info.features(i, 1) = std::log1p(static_cast<double>(catalog.clicks_7d[i]));
    info.features(i, 2) = std::log1p(static_cast<double>(catalog.orders_7d[i]));
  }
  return info;
}

void add_daily_counters(ItemSideInfo& info, std::span<const data::Event> events, std::uint32_t n_days,
                        std::uint32_t window_days) {
  const std::size_t n = info.size();
  // per_day[t] = raw impressions, clicks, orders of each item on day t
  std::vector<std::vector<std::array<std::uint32_t, kItemFeatureDim>>> per_day(n_days,
                                                                             std::vector<std::array<std::uint32_t, kItemFeatureDim>>(n));
  for (const data::Event& ev : events) {
    if (ev.item >= n) throw InvalidArgument("add_daily_counters: item " + std::to_string(ev.item) + " out of range");
    if (ev.day >= n_days) continue;
    auto& c = per_day[ev.day][ev.item];
    ++c[0];
    c[1] += ev.label;
    c[2] += ev.order;
  }
  info.daily.assign(n_days, Matrix(n, kItemFeatureDim));
  std::vector<std::array<std::uint32_t, kItemFeatureDim>> window(n);
  for (std::uint32_t t = 0; t < n_days; ++t) {
    if (t > 0) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < kItemFeatureDim; ++f) {
          window[i][f] += per_day[t - 1][i][f];
          if (t > window_days) window[i][f] -= per_day[t - 1 - window_days][i][f];
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < kItemFeatureDim; ++f) info.daily[t](i, f) = std::log1p(static_cast<double>(window[i][f]));
    }
  }
}

std::vector<TrainingSample> make_samples(std::span<const data::Event> events, std::size_t history_len) {
  std::vector<TrainingSample> out;
  out.reserve(events.size());
  std::unordered_map<std::uint32_t, std::deque<std::uint32_t>> clicks;
  std::uint64_t last_ts = 0;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const auto& ev = events[e];
    if (e > 0 && ev.ts < last_ts) throw InvalidArgument("make_samples: events must be in timestamp order");
    last_ts = ev.ts;
    TrainingSample s;
    s.user = ev.user;
    s.query = ev.query;
    s.item = ev.item;
    s.context = ev.context;
    s.label = ev.label;
    s.day = ev.day;
    auto& hist = clicks[ev.user];
    s.history.assign(hist.begin(), hist.end());
    out.push_back(std::move(s));
    if (ev.label && history_len > 0) {
      hist.push_back(ev.item);
      if (hist.size() > history_len) hist.pop_front();
    }
  }
  return out;
}

// --- stand-alone pieces -------------------------------------------------------

void combine(std::span<const double> id_emb, std::span<const double> rq_emb, double gate, std::span<double> out) {
  if (id_emb.size() != rq_emb.size() || out.size() != id_emb.size()) throw InvalidArgument("combine: dimension mismatch");
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = gate * id_emb[j] + (1.0 - gate) * rq_emb[j];
}

void final_item_rep(std::span<const double> combined, std::span<const double> opq_emb, double lambda,
                    std::span<double> out) {
  if (combined.size() != opq_emb.size() || out.size() != combined.size()) {
    throw InvalidArgument("final_item_rep: dimension mismatch");
  }
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = combined[j] + lambda * opq_emb[j];
}

double transfer_loss(std::span<const double> id_emb, std::span<const double> rq_emb, double gate, double temp,
                     TransferGrads* grads, double scale, bool detach_gate, const FrozenTargets* frozen) {
  const std::size_t n = id_emb.size();
  if (rq_emb.size() != n) throw InvalidArgument("transfer_loss: dimension mismatch");
  Vec p_id(n), p_rq(n);
  diff::softmax(id_emb, temp, p_id);
  diff::softmax(rq_emb, temp, p_rq);
  std::span<const double> sg_id = p_id, sg_rq = p_rq;
  if (frozen != nullptr) {
    if (frozen->p_id.size() != n || frozen->p_rq.size() != n) throw InvalidArgument("transfer_loss: frozen size");
    sg_id = frozen->p_id;
    sg_rq = frozen->p_rq;
  }
  Vec dq, dp;
  if (grads != nullptr) {
    dq.assign(n, 0.0);
    dp.assign(n, 0.0);
  }
  // T * KL(sg(p_id) || p_rq): gradient reaches p_rq only.
  const double kl_to_rq = diff::kl_divergence(sg_id, p_rq, {}, dq);
  // (1 - T) * KL(p_id || sg(p_rq)): gradient reaches p_id only.
  const double kl_to_id = diff::kl_divergence(p_id, sg_rq, dp, {});
  if (grads != nullptr) {
    for (std::size_t j = 0; j < n; ++j) {
      dq[j] *= scale * gate;
      dp[j] *= scale * (1.0 - gate);
    }
    if (!grads->d_rq.empty()) diff::softmax_backward(p_rq, dq, temp, grads->d_rq);
    if (!grads->d_id.empty()) diff::softmax_backward(p_id, dp, temp, grads->d_id);
    if (!detach_gate) grads->d_gate += scale * (kl_to_rq - kl_to_id);
  }
  return gate * kl_to_rq + (1.0 - gate) * kl_to_id;
}

std::vector<std::uint8_t> positive_mask(std::span<const quant::OpqPair> pairs, const NeighborTable& neighbors) {
  const std::size_t b = pairs.size();
  std::vector<std::uint8_t> mask(b * b, 0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      if (i == j) continue;
      mask[i * b + j] = pairs[i] == pairs[j] || neighbors.is_neighbor(pairs[i], pairs[j]);
    }
  }
  return mask;
}

double contrastive_loss(const Matrix& emb, std::span<const std::uint8_t> positive, const Matrix& extra,
                        std::size_t extra_per_anchor, double tau, Matrix* d_emb, Matrix* d_extra,
                        ContrastiveStats* stats, double scale) {
  const std::size_t b = emb.rows;
  if (b < 2) throw InvalidArgument("contrastive_loss: need at least 2 items in the batch");
  if (!(tau > 0.0)) throw InvalidArgument("contrastive_loss: tau must be positive");
  if (positive.size() != b * b) throw InvalidArgument("contrastive_loss: mask must be B x B");
  if (extra.rows != b * extra_per_anchor || (extra.rows > 0 && extra.cols != emb.cols)) {
    throw InvalidArgument("contrastive_loss: extra negatives must be (B * E) x d");
  }

  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    if (std::any_of(positive.begin() + static_cast<std::ptrdiff_t>(i * b),
                    positive.begin() + static_cast<std::ptrdiff_t>((i + 1) * b), [](auto m) { return m != 0; })) {
      ++anchors;
    }
  }
  if (stats) stats->contributing_anchors += anchors;
  if (anchors == 0) {
    if (stats) ++stats->positive_free_batches;
    return 0.0;
  }
  const double inv_anchors = 1.0 / static_cast<double>(anchors);

  // Candidate c < b is batch row c, otherwise extra row i*E + (c - b).
  const std::size_t n_cand = b + extra_per_anchor;
  std::vector<double> logit(n_cand);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const std::uint8_t* pos = positive.data() + i * b;
    if (std::none_of(pos, pos + b, [](auto m) { return m != 0; })) continue;
    auto row_of = [&](std::size_t c) { return c < b ? emb.row(c) : extra.row(i * extra_per_anchor + (c - b)); };

    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n_cand; ++c) {
      if (c == i) continue;
      logit[c] = diff::cosine_similarity(emb.row(i), row_of(c)) / tau;
      mx = std::max(mx, logit[c]);
    }
    double sum_all = 0.0, sum_pos = 0.0;
    for (std::size_t c = 0; c < n_cand; ++c) {
      if (c == i) continue;
      const double e = std::exp(logit[c] - mx);
      sum_all += e;
      if (c < b && pos[c]) sum_pos += e;
    }
    const double lse_all = mx + std::log(sum_all);
    const double lse_pos = mx + std::log(sum_pos);
    total += lse_all - lse_pos;

    if (d_emb == nullptr) continue;
    for (std::size_t c = 0; c < n_cand; ++c) {
      if (c == i) continue;
      const double w_all = std::exp(logit[c] - lse_all);
      const double w_pos = (c < b && pos[c]) ? std::exp(logit[c] - lse_pos) : 0.0;
      const double d_cos = (w_all - w_pos) / tau * inv_anchors * scale;
      if (d_cos == 0.0) continue;
      std::span<double> d_other = c < b ? d_emb->row(c)
                                        : (d_extra ? d_extra->row(i * extra_per_anchor + (c - b)) : std::span<double>{});
      diff::cosine_similarity_backward(emb.row(i), row_of(c), d_cos, d_emb->row(i), d_other);
    }
  }
  return total * inv_anchors;
}

double total_loss(double bce, double trans, double cont, double alpha1, double alpha2) {
  return bce + alpha1 * trans + alpha2 * cont;
}

// --- model -------------------------------------------------------------------

struct SmileModel::ItemCache {
  std::uint32_t item = 0;
  SemanticId sid;
  Vec rq_sum, rq_fused, gate_in, gate_hidden, opq, final;
  double gate = 0.0;
  // backward scratch
  Vec d_rq, d_rq_sum, d_hidden, d_gate_in, d_id;

  void resize(const ModelDims& dims) {
    const std::size_t gin = dims.context_dim + dims.d + dims.feature_dim;
    for (Vec* v : {&rq_sum, &rq_fused, &opq, &final, &d_rq, &d_rq_sum, &d_id}) v->assign(dims.d, 0.0);
    gate_in.assign(gin, 0.0);
    d_gate_in.assign(gin, 0.0);
    gate_hidden.assign(dims.gate_hidden, 0.0);
    d_hidden.assign(dims.gate_hidden, 0.0);
  }
};

struct SmileModel::SampleCache {
  ItemCache target;
  std::vector<ItemCache> hist;
  std::size_t hist_begin = 0;
  std::size_t n_hist = 0;
  Vec ctx_emb, pool, z, h1, h2;
  double logit = 0.0;
  double y_hat = 0.0;
  Vec dz, dh1, dh2, d_user, d_trans_id, d_trans_rq;

  explicit SampleCache(const ModelDims& dims, std::size_t history_len) : hist(history_len) {
    target.resize(dims);
    for (auto& h : hist) h.resize(dims);
    ctx_emb.assign(dims.d, 0.0);
    pool.assign(dims.d, 0.0);
    z.assign(5 * dims.d, 0.0);
    dz.assign(5 * dims.d, 0.0);
    h1.assign(dims.tower_h1, 0.0);
    dh1.assign(dims.tower_h1, 0.0);
    h2.assign(dims.tower_h2, 0.0);
    dh2.assign(dims.tower_h2, 0.0);
    d_user.assign(dims.d, 0.0);
    d_trans_id.assign(dims.d, 0.0);
    d_trans_rq.assign(dims.d, 0.0);
  }
};

namespace {

void init_normal(diff::Tensor& t, double std_dev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std_dev);
  for (double& v : t.value) v = normal(rng);
}

void add_to(std::span<double> dst, std::span<const double> src, double scale = 1.0) {
  for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
}

}  // namespace

SmileModel::SmileModel(const ModelDims& dims, const HyperParams& hp, Variant variant, std::uint64_t init_seed)
    : dims_(dims), hp_(hp), variant_(variant), plan_(plan_for(variant, hp)) {
  if (!(hp.tau > 0.0)) throw InvalidArgument("HyperParams: tau must be positive");
  if (hp.lambda < 0.0 || hp.alpha1 < 0.0 || hp.alpha2 < 0.0) {
    throw InvalidArgument("HyperParams: lambda and loss weights must be non-negative");
  }
  if (dims.n_items == 0 || dims.n_users == 0 || dims.n_queries == 0 || dims.codebook_size == 0) {
    throw InvalidArgument("ModelDims: table sizes must be positive");
  }
  const std::size_t d = dims.d;
  id_ = &params_.add("emb.id", {dims.n_items, d});
  rq_[0] = &params_.add("emb.rq1", {dims.codebook_size, d});
  rq_[1] = &params_.add("emb.rq2", {dims.codebook_size, d});
  rq_[2] = &params_.add("emb.rq3", {dims.codebook_size, d});
  opq_[0] = &params_.add("emb.opq1", {dims.codebook_size, d});
  opq_[1] = &params_.add("emb.opq2", {dims.codebook_size, d});
  user_ = &params_.add("emb.user", {dims.n_users, d});
  query_ = &params_.add("emb.query", {dims.n_queries, d});
  ctx_w_ = &params_.add("ctx.W", {d, dims.context_dim});
  ctx_b_ = &params_.add("ctx.b", {d});
  fuse_w_ = &params_.add("fuse.W", {d, d});
  fuse_b_ = &params_.add("fuse.b", {d});
  const std::size_t gin = dims.context_dim + d + dims.feature_dim;
  gate_w1_ = &params_.add("gate.W1", {dims.gate_hidden, gin});
  gate_b1_ = &params_.add("gate.b1", {dims.gate_hidden});
  gate_w2_ = &params_.add("gate.W2", {1, dims.gate_hidden});
  gate_b2_ = &params_.add("gate.b2", {1});
  tower_w1_ = &params_.add("tower.W1", {dims.tower_h1, 5 * d});
  tower_b1_ = &params_.add("tower.b1", {dims.tower_h1});
  tower_w2_ = &params_.add("tower.W2", {dims.tower_h2, dims.tower_h1});
  tower_b2_ = &params_.add("tower.b2", {dims.tower_h2});
  tower_w3_ = &params_.add("tower.W3", {1, dims.tower_h2});
  tower_b3_ = &params_.add("tower.b3", {1});

  std::mt19937_64 rng(init_seed);
  for (diff::Tensor* t : {id_, rq_[0], rq_[1], rq_[2], opq_[0], opq_[1], user_, query_}) init_normal(*t, hp.init_std, rng);
  auto xavier = [&](diff::Tensor& w) {
    init_normal(w, std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols())), rng);
  };
  auto he = [&](diff::Tensor& w) { init_normal(w, std::sqrt(2.0 / static_cast<double>(w.cols())), rng); };
  xavier(*ctx_w_);
  init_normal(*fuse_w_, 0.1 / std::sqrt(static_cast<double>(d)), rng);
  he(*gate_w1_);
  // gate.W2 stays zero, so every request starts from T_g = 0.5 whatever its counters.
  he(*tower_w1_);
  he(*tower_w2_);
  xavier(*tower_w3_);
}

void SmileModel::perturb(double std_dev, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std_dev);
  for (const auto& name : params_.names()) {
    for (double& v : params_.at(name).value) v += normal(rng);
  }
}

void SmileModel::check_sid(const SemanticId& sid) const {
  const std::size_t k = dims_.codebook_size;
  if (sid.rq1 >= k || sid.rq2 >= k || sid.rq3 >= k || sid.opq1 >= k || sid.opq2 >= k) {
    throw InvalidArgument("semantic id code out of range for codebook size " + std::to_string(k));
  }
}

void SmileModel::fuse_rq(const SemanticId& sid, std::span<double> out) const {
  check_sid(sid);
  Vec sum(dims_.d, 0.0);
  const auto codes = sid.rq();
  for (std::size_t l = 0; l < 3; ++l) add_to(sum, rq_[l]->row(codes[l]));
  diff::linear(*fuse_w_, *fuse_b_, sum, out);
  add_to(out, sum);
}

double SmileModel::transfer_gate(std::span<const double> context, std::span<const double> user_emb,
                                 std::span<const double> item_features) const {
  Vec in(context.size() + user_emb.size() + item_features.size());
  diff::concat({context, user_emb, item_features}, in);
  Vec hidden(dims_.gate_hidden);
  diff::linear(*gate_w1_, *gate_b1_, in, hidden);
  diff::relu(hidden, hidden);
  double logit = 0.0;
  diff::linear(*gate_w2_, *gate_b2_, hidden, {&logit, 1});
  return diff::sigmoid(logit);
}

void SmileModel::opq_embed(const SemanticId& sid, std::span<double> out) const {
  check_sid(sid);
  if (out.size() != dims_.d) throw InvalidArgument("opq_embed: output dimension mismatch");
  auto a = opq_[0]->row(sid.opq1);
  auto b = opq_[1]->row(sid.opq2);
  for (std::size_t j = 0; j < dims_.d; ++j) out[j] = a[j] + b[j];
}

void SmileModel::item_forward(std::uint32_t item, const TrainingSample& request, std::span<const double> user_emb,
                              const ItemSideInfo& items, ItemCache& c) const {
  if (item >= dims_.n_items || item >= items.size()) {
    throw InvalidArgument("item id " + std::to_string(item) + " out of range");
  }
  c.item = item;
  c.sid = items.sids[item];
  check_sid(c.sid);
  const auto codes = c.sid.rq();

  if (plan_.sid_as_ids) {
    std::ranges::fill(c.final, 0.0);
    for (std::size_t l = 0; l < 3; ++l) add_to(c.final, rq_[l]->row(codes[l]));
    add_to(c.final, opq_[0]->row(c.sid.opq1));
    add_to(c.final, opq_[1]->row(c.sid.opq2));
    if (plan_.use_id) add_to(c.final, id_->row(item));
    return;
  }

  if (plan_.gated_rq) {
    std::ranges::fill(c.rq_sum, 0.0);
    for (std::size_t l = 0; l < 3; ++l) add_to(c.rq_sum, rq_[l]->row(codes[l]));
    diff::linear(*fuse_w_, *fuse_b_, c.rq_sum, c.rq_fused);
    add_to(c.rq_fused, c.rq_sum);

    diff::concat({request.context, user_emb, items.features_at(request.day, item)}, c.gate_in);
    diff::linear(*gate_w1_, *gate_b1_, c.gate_in, c.gate_hidden);
    diff::relu(c.gate_hidden, c.gate_hidden);
    double logit = 0.0;
    diff::linear(*gate_w2_, *gate_b2_, c.gate_hidden, {&logit, 1});
    c.gate = diff::sigmoid(logit);
    combine(id_->row(item), c.rq_fused, c.gate, c.final);
  } else {
    std::ranges::copy(id_->row(item), c.final.begin());
  }
  if (plan_.use_opq) {
    opq_embed(c.sid, c.opq);
    final_item_rep(c.final, c.opq, plan_.lambda, c.final);
  }
}

void SmileModel::item_backward(ItemCache& c, std::span<const double> d_final, std::span<const double> extra_d_id,
                               std::span<const double> extra_d_rq, double extra_d_gate, std::span<double> d_user) {
  const auto codes = c.sid.rq();
  if (plan_.sid_as_ids) {
    for (std::size_t l = 0; l < 3; ++l) add_to(rq_[l]->grad_row(codes[l]), d_final);
    add_to(opq_[0]->grad_row(c.sid.opq1), d_final);
    add_to(opq_[1]->grad_row(c.sid.opq2), d_final);
    if (plan_.use_id) add_to(id_->grad_row(c.item), d_final);
    return;
  }
  if (plan_.use_opq) {
    add_to(opq_[0]->grad_row(c.sid.opq1), d_final, plan_.lambda);
    add_to(opq_[1]->grad_row(c.sid.opq2), d_final, plan_.lambda);
  }
  if (!plan_.gated_rq) {
    add_to(id_->grad_row(c.item), d_final);
    if (!extra_d_id.empty()) add_to(id_->grad_row(c.item), extra_d_id);
    return;
  }

  auto id_row = id_->row(c.item);
  double d_gate = extra_d_gate;
  for (std::size_t j = 0; j < dims_.d; ++j) {
    c.d_id[j] = c.gate * d_final[j];
    c.d_rq[j] = (1.0 - c.gate) * d_final[j];
    d_gate += d_final[j] * (id_row[j] - c.rq_fused[j]);
  }
  if (!extra_d_id.empty()) add_to(c.d_id, extra_d_id);
  if (!extra_d_rq.empty()) add_to(c.d_rq, extra_d_rq);
  add_to(id_->grad_row(c.item), c.d_id);

  // rq_fused = rq_sum + W rq_sum + b
  std::ranges::copy(c.d_rq, c.d_rq_sum.begin());
  diff::linear_backward(*fuse_w_, *fuse_b_, c.rq_sum, c.d_rq, c.d_rq_sum);
  for (std::size_t l = 0; l < 3; ++l) add_to(rq_[l]->grad_row(codes[l]), c.d_rq_sum);

  const double d_logit = diff::sigmoid_backward(c.gate, d_gate);
  std::ranges::fill(c.d_hidden, 0.0);
  diff::linear_backward(*gate_w2_, *gate_b2_, c.gate_hidden, {&d_logit, 1}, c.d_hidden);
  for (std::size_t h = 0; h < c.d_hidden.size(); ++h) {
    if (!(c.gate_hidden[h] > 0.0)) c.d_hidden[h] = 0.0;
  }
  std::ranges::fill(c.d_gate_in, 0.0);
  diff::linear_backward(*gate_w1_, *gate_b1_, c.gate_in, c.d_hidden, c.d_gate_in);
  for (std::size_t j = 0; j < dims_.d; ++j) d_user[j] += c.d_gate_in[dims_.context_dim + j];
}

double SmileModel::sample_forward(const TrainingSample& s, const ItemSideInfo& items, SampleCache& c) const {
  if (s.user >= dims_.n_users) throw InvalidArgument("user id " + std::to_string(s.user) + " out of range");
  if (s.query >= dims_.n_queries) throw InvalidArgument("query id " + std::to_string(s.query) + " out of range");
  auto user = user_->row(s.user);
  diff::linear(*ctx_w_, *ctx_b_, s.context, c.ctx_emb);
  item_forward(s.item, s, user, items, c.target);

  c.n_hist = std::min(s.history.size(), hp_.history_len);
  c.hist_begin = s.history.size() - c.n_hist;
  std::ranges::fill(c.pool, 0.0);
  for (std::size_t k = 0; k < c.n_hist; ++k) {
    item_forward(s.history[c.hist_begin + k], s, user, items, c.hist[k]);
    add_to(c.pool, c.hist[k].final, 1.0 / static_cast<double>(c.n_hist));
  }

  diff::concat({user, query_->row(s.query), c.target.final, c.ctx_emb, c.pool}, c.z);
  diff::linear(*tower_w1_, *tower_b1_, c.z, c.h1);
  diff::relu(c.h1, c.h1);
  diff::linear(*tower_w2_, *tower_b2_, c.h1, c.h2);
  diff::relu(c.h2, c.h2);
  diff::linear(*tower_w3_, *tower_b3_, c.h2, {&c.logit, 1});
  c.y_hat = diff::sigmoid(c.logit);
  return c.y_hat;
}

double SmileModel::sample_transfer(std::size_t index, const SampleCache& c, TransferGrads* grads, double scale) {
  auto id = id_->row(c.target.item);
  const double temp = hp_.kl_softmax_temp;
  if (sg_mode_ == SgMode::kLive) {
    return transfer_loss(id, c.target.rq_fused, c.target.gate, temp, grads, scale, hp_.detach_gate_in_transfer);
  }
  if (sg_mode_ == SgMode::kRecord) {
    if (sg_targets_.size() < 2 * (index + 1)) sg_targets_.resize(2 * (index + 1));
    sg_targets_[2 * index].assign(dims_.d, 0.0);
    sg_targets_[2 * index + 1].assign(dims_.d, 0.0);
    diff::softmax(id, temp, sg_targets_[2 * index]);
    diff::softmax(c.target.rq_fused, temp, sg_targets_[2 * index + 1]);
  }
  const FrozenTargets frozen{sg_targets_.at(2 * index), sg_targets_.at(2 * index + 1)};
  return transfer_loss(id, c.target.rq_fused, c.target.gate, temp, grads, scale, hp_.detach_gate_in_transfer,
                       &frozen);
}

void SmileModel::sample_backward(std::size_t index, const TrainingSample& s, SampleCache& c, double d_logit,
                                 double trans_scale) {
  const std::size_t d = dims_.d;
  std::ranges::fill(c.dh2, 0.0);
  diff::linear_backward(*tower_w3_, *tower_b3_, c.h2, {&d_logit, 1}, c.dh2);
  for (std::size_t h = 0; h < c.dh2.size(); ++h) {
    if (!(c.h2[h] > 0.0)) c.dh2[h] = 0.0;
  }
  std::ranges::fill(c.dh1, 0.0);
  diff::linear_backward(*tower_w2_, *tower_b2_, c.h1, c.dh2, c.dh1);
  for (std::size_t h = 0; h < c.dh1.size(); ++h) {
    if (!(c.h1[h] > 0.0)) c.dh1[h] = 0.0;
  }
  std::ranges::fill(c.dz, 0.0);
  diff::linear_backward(*tower_w1_, *tower_b1_, c.z, c.dh1, c.dz);

  std::span<const double> dz(c.dz);
  auto d_user_tower = dz.subspan(0, d);
  auto d_query = dz.subspan(d, d);
  auto d_final = dz.subspan(2 * d, d);
  auto d_ctx = dz.subspan(3 * d, d);
  auto d_pool = dz.subspan(4 * d, d);

  std::ranges::copy(d_user_tower, c.d_user.begin());
  add_to(query_->grad_row(s.query), d_query);
  diff::linear_backward(*ctx_w_, *ctx_b_, s.context, d_ctx, {});

  if (c.n_hist > 0) {
    Vec d_hist(d);
    for (std::size_t j = 0; j < d; ++j) d_hist[j] = d_pool[j] / static_cast<double>(c.n_hist);
    for (std::size_t k = 0; k < c.n_hist; ++k) item_backward(c.hist[k], d_hist, {}, {}, 0.0, c.d_user);
  }

  double d_gate_trans = 0.0;
  std::span<const double> extra_id, extra_rq;
  if (plan_.gated_rq && plan_.alpha1 > 0.0) {
    std::ranges::fill(c.d_trans_id, 0.0);
    std::ranges::fill(c.d_trans_rq, 0.0);
    TransferGrads tg{c.d_trans_id, c.d_trans_rq, 0.0};
    sample_transfer(index, c, &tg, trans_scale);
    d_gate_trans = tg.d_gate;
    extra_id = c.d_trans_id;
    extra_rq = c.d_trans_rq;
  }
  item_backward(c.target, d_final, extra_id, extra_rq, d_gate_trans, c.d_user);
  add_to(user_->grad_row(s.user), c.d_user);
}

LossBreakdown SmileModel::loss(const Batch& batch, const ItemSideInfo& items, const NeighborTable& neighbors,
                               bool with_grad) {
  const std::size_t b = batch.samples.size();
  if (b == 0) throw InvalidArgument("loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(b);
  SampleCache cache(dims_, hp_.history_len);
  LossBreakdown out;

  const bool contrastive = plan_.use_opq && plan_.alpha2 > 0.0;
  Matrix opq_emb;
  std::vector<quant::OpqPair> pairs;
  if (contrastive) {
    opq_emb = Matrix(b, dims_.d);
    pairs.reserve(b);
  }

  for (std::size_t i = 0; i < b; ++i) {
    const TrainingSample& s = batch.samples[i];
    const double y_hat = sample_forward(s, items, cache);
    const double y = s.label;
    double d_yhat = 0.0;
    out.bce += diff::bce_loss({&y_hat, 1}, {&y, 1}, with_grad ? std::span<double>(&d_yhat, 1) : std::span<double>{}) *
               inv_b;
    if (plan_.gated_rq && plan_.alpha1 > 0.0) {
      out.trans += sample_transfer(i, cache, nullptr, 1.0) * inv_b;
    }
    if (contrastive) {
      std::ranges::copy(cache.target.opq, opq_emb.row(i).begin());
      pairs.push_back(cache.target.sid.opq());
    }
    if (with_grad) {
      sample_backward(i, s, cache, diff::sigmoid_backward(y_hat, d_yhat * inv_b), plan_.alpha1 * inv_b);
    }
  }

  if (contrastive) {
    const std::size_t e = hp_.extra_negatives;
    if (batch.extra_negatives.size() != b * e) {
      throw InvalidArgument("loss: batch needs " + std::to_string(b * e) + " extra negatives");
    }
    Matrix extra(b * e, dims_.d);
    for (std::size_t r = 0; r < b * e; ++r) {
      const auto item = batch.extra_negatives[r];
      if (item >= items.size()) throw InvalidArgument("loss: extra negative out of range");
      opq_embed(items.sids[item], extra.row(r));
    }
    const auto mask = positive_mask(pairs, neighbors);
    ContrastiveStats stats;
    Matrix d_emb, d_extra;
    if (with_grad) {
      d_emb = Matrix(b, dims_.d);
      d_extra = Matrix(b * e, dims_.d);
    }
    out.cont = contrastive_loss(opq_emb, mask, extra, e, hp_.tau, with_grad ? &d_emb : nullptr,
                                with_grad ? &d_extra : nullptr, &stats, plan_.alpha2);
    out.contrastive_anchors = stats.contributing_anchors;
    if (with_grad) {
      for (std::size_t i = 0; i < b; ++i) {
        add_to(opq_[0]->grad_row(pairs[i].first), d_emb.row(i));
        add_to(opq_[1]->grad_row(pairs[i].second), d_emb.row(i));
      }
      for (std::size_t r = 0; r < b * e; ++r) {
        const auto& sid = items.sids[batch.extra_negatives[r]];
        add_to(opq_[0]->grad_row(sid.opq1), d_extra.row(r));
        add_to(opq_[1]->grad_row(sid.opq2), d_extra.row(r));
      }
    }
  }
  out.total = total_loss(out.bce, out.trans, out.cont, plan_.alpha1, plan_.alpha2);
  return out;
}

Vec SmileModel::item_representation(std::uint32_t item, const TrainingSample& request, const ItemSideInfo& items) const {
  ItemCache c;
  c.resize(dims_);
  item_forward(item, request, user_->row(request.user), items, c);
  return c.final;
}

double SmileModel::predict(const TrainingSample& sample, const ItemSideInfo& items) const {
  SampleCache cache(dims_, hp_.history_len);
  return sample_forward(sample, items, cache);
}

std::vector<double> SmileModel::predict(std::span<const TrainingSample> samples, const ItemSideInfo& items) const {
  SampleCache cache(dims_, hp_.history_len);
  std::vector<double> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = sample_forward(samples[i], items, cache);
  return out;
}

diff::GradCheckReport SmileModel::grad_check(const Batch& batch, const ItemSideInfo& items,
                                             const NeighborTable& neighbors, const diff::GradCheckOptions& options) {
  // The base evaluation records the stop-gradient targets; perturbed ones reuse them.
  struct Restore {
    SgMode& mode;
    ~Restore() { mode = SgMode::kLive; }
  } restore{sg_mode_};
  return diff::grad_check(
      [&](bool with_grad) {
        sg_mode_ = with_grad ? SgMode::kRecord : SgMode::kReplay;
        return loss(batch, items, neighbors, with_grad).total;
      },
      params_, options);
}

// --- training ----------------------------------------------------------------

TrainResult train(SmileModel& model, std::span<const TrainingSample> samples, const ItemSideInfo& items,
                  const NeighborTable& neighbors, const TrainConfig& config, const EpochCallback& on_epoch) {
  if (samples.empty()) throw InvalidArgument("train: no samples");
  const auto& hp = model.hyper();
  const std::size_t bs = std::max<std::size_t>(hp.batch_size, 2);
  diff::AdamConfig adam = config.adam;
  adam.lr = hp.lr;

  std::vector<std::uint32_t> pool;
  {
    std::vector<std::uint8_t> seen(items.size(), 0);
    for (const auto& s : samples) seen[s.item] = 1;
    for (std::uint32_t i = 0; i < seen.size(); ++i) {
      if (seen[i]) pool.push_back(i);
    }
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<TrainingSample> batch_samples;
  batch_samples.reserve(bs);

  TrainResult result;
  model.params().zero_grad();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double weight = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      if (end - start < 2) break;  // contrastive loss needs two items; drop a singleton tail
      batch_samples.clear();
      for (std::size_t k = start; k < end; ++k) batch_samples.push_back(samples[order[k]]);
      Batch batch{batch_samples, {}};
      batch.extra_negatives.resize(batch_samples.size() * hp.extra_negatives);
      for (auto& neg : batch.extra_negatives) neg = pool[rng() % pool.size()];

      const LossBreakdown lb = model.loss(batch, items, neighbors, true);
      if (!std::isfinite(lb.total)) {
        std::ostringstream dump;
        dump << "train: non-finite loss at epoch " << rec.epoch << ", batch starting at " << start << " (bce=" << lb.bce
             << ", trans=" << lb.trans << ", cont=" << lb.cont << "); items:";
        for (const auto& s : batch_samples) dump << ' ' << s.item;
        std::cerr << dump.str() << '\n';
        throw NumericFault(dump.str());
      }
      if (model.plan().alpha2 > 0.0 && lb.contrastive_anchors == 0) ++result.positive_free_batches;
      model.params().check_finite();
      model.params().adam_step(adam);

      const double w = static_cast<double>(batch_samples.size());
      rec.bce += lb.bce * w;
      rec.trans += lb.trans * w;
      rec.cont += lb.cont * w;
      rec.total += lb.total * w;
      weight += w;
    }
    rec.bce /= weight;
    rec.trans /= weight;
    rec.cont /= weight;
    rec.total /= weight;
    if (on_epoch) rec.eval = on_epoch(model, rec.epoch);
    result.curve.push_back(std::move(rec));
  }
  return result;
}

nlohmann::json to_json(const HyperParams& hp) {
  return {{"alpha1", hp.alpha1},
          {"alpha2", hp.alpha2},
          {"tau", hp.tau},
          {"lambda", hp.lambda},
          {"lr", hp.lr},
          {"batch_size", hp.batch_size},
          {"kl_softmax_temp", hp.kl_softmax_temp},
          {"extra_negatives", hp.extra_negatives},
          {"history_len", hp.history_len},
          {"init_std", hp.init_std},
          {"detach_gate_in_transfer", hp.detach_gate_in_transfer}};
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch}, {"L_bce", r.bce}, {"L_trans", r.trans}, {"L_cont", r.cont},
                      {"L_total", r.total}};
  if (!r.eval.is_null()) j["eval"] = r.eval;
  return j;
}

}  // namespace smile::model
