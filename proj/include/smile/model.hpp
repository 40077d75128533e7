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


#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "smile/common.hpp"
#include "smile/datagen.hpp"
#include "smile/diffcore.hpp"
#include "smile/quantizer.hpp"

/// CTR model whose item representation fuses the hashed item ID with
/// semantic-ID code embeddings: a gated ID/RQ mixture trained with a
/// directional KL transfer loss, plus OPQ code embeddings shaped by an
/// in-batch contrastive loss.
namespace smile::model {

using quant::NeighborTable;
using quant::SemanticId;

enum class Variant { kOnlySid, kIidSid, kIidRq, kIidOpq, kSmile };
inline constexpr std::array<Variant, 5> kAllVariants = {Variant::kOnlySid, Variant::kIidSid, Variant::kIidRq,
                                                       Variant::kIidOpq, Variant::kSmile};
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

struct HyperParams {
  double alpha1 = 0.01;  // transfer loss weight
  double alpha2 = 0.05;  // contrastive loss weight
  double tau = 0.1;
  double lambda = 0.5;   // OPQ fusion coefficient
  double lr = 3e-3;
  std::size_t batch_size = 256;
  double kl_softmax_temp = 1.0;
  std::size_t extra_negatives = 4;
  std::size_t history_len = 20;
  double init_std = 0.01;
  /// Treat the gate as a constant inside the transfer loss.
  bool detach_gate_in_transfer = false;
};

/// Graph surgery applied by each ablation variant.
struct VariantPlan {
  bool use_id = false;
  bool gated_rq = false;  // fuse_rq + gate + combine
  bool sid_as_ids = false;  // plain sum of all five code embeddings
  bool use_opq = false;     // lambda * OPQ term on top of the gated or id representation
  double alpha1 = 0.0;
  double alpha2 = 0.0;
  double lambda = 0.0;
};
VariantPlan plan_for(Variant v, const HyperParams& hp);

inline constexpr std::size_t kItemFeatureDim = 3;

/// Per-item inputs that are not learned: semantic ID and the gate's conversion features.
struct ItemSideInfo {
  std::vector<SemanticId> sids;
  Matrix features;  // n_items x kItemFeatureDim: log1p of 7-day impressions, clicks, orders
  /// Optional per-day counters: daily[t] holds the same features over the
  /// window that closes at the start of day t. Days past the end fall back to
  /// `features`.
  std::vector<Matrix> daily;
  std::size_t size() const { return sids.size(); }
  std::span<const double> features_at(std::uint32_t day, std::uint32_t item) const {
    return day < daily.size() ? daily[day].row(item) : features.row(item);
  }
};
ItemSideInfo make_item_side_info(const std::map<quant::ItemId, SemanticId>& sids, const data::Catalog& catalog);
/// Fills `info.daily` for days [0, n_days) from a time-ordered log, counting
/// only events strictly before each day so nothing leaks from the request's own day.
void add_daily_counters(ItemSideInfo& info, std::span<const data::Event> events, std::uint32_t n_days,
                        std::uint32_t window_days);
struct TrainingSample {
  std::uint32_t user = 0;
  std::uint32_t query = 0;
  std::uint32_t item = 0;
  std::array<double, data::kContextDim> context{};
  std::vector<std::uint32_t> history;  // most recent clicks before this event, oldest first
  std::uint8_t label = 0;
  std::uint32_t day = 0;
};

/// Converts a time-ordered log into samples; history holds the user's last
/// `history_len` clicked items strictly before each event.
std::vector<TrainingSample> make_samples(std::span<const data::Event> events, std::size_t history_len);

struct ModelDims {
  std::size_t n_items = 0;
  std::size_t n_users = 0;
  std::size_t n_queries = 0;
  std::size_t codebook_size = 0;
  std::size_t d = 16;
  std::size_t context_dim = data::kContextDim;
  std::size_t feature_dim = kItemFeatureDim;
  std::size_t gate_hidden = 32;
  std::size_t tower_h1 = 64;
  std::size_t tower_h2 = 32;
};

struct Batch {
  std::span<const TrainingSample> samples;
  /// samples.size() * extra_negatives item ids; anchor i owns the i-th block.
  std::vector<std::uint32_t> extra_negatives;
};

struct LossBreakdown {
  double bce = 0.0;
  double trans = 0.0;
  double cont = 0.0;
  double total = 0.0;
  std::size_t contrastive_anchors = 0;
};

// --- stand-alone pieces of the objective ------------------------------------

/// I_c = T * id + (1 - T) * rq.
void combine(std::span<const double> id_emb, std::span<const double> rq_emb, double gate, std::span<double> out);
/// I_f = I_c + lambda * I_opq.
void final_item_rep(std::span<const double> combined, std::span<const double> opq_emb, double lambda,
                    std::span<double> out);

struct TransferGrads {
  std::span<double> d_id;   // may be empty
  std::span<double> d_rq;   // may be empty
  double d_gate = 0.0;
};
/// Values standing in for the stop-gradient arguments. Finite differences of
/// the objective only match its gradient when these are held fixed.
struct FrozenTargets {
  std::span<const double> p_id;
  std::span<const double> p_rq;
};
/// T * KL(sg(p_id) || p_rq) + (1 - T) * KL(p_id || sg(p_rq)), p = softmax(x / temp).
/// Gradients are scaled by `scale` and accumulated into `grads` when non-null.
double transfer_loss(std::span<const double> id_emb, std::span<const double> rq_emb, double gate, double temp,
                     TransferGrads* grads = nullptr, double scale = 1.0, bool detach_gate = false,
                     const FrozenTargets* frozen = nullptr);

struct ContrastiveStats {
  std::size_t contributing_anchors = 0;
  std::size_t positive_free_batches = 0;
};
/// InfoNCE with summed positives. `positive` is a row-major B x B mask; anchor
/// i additionally contrasts against rows [i*E, (i+1)*E) of `extra`. Anchors
/// without positives are skipped; the result is the mean over the rest.
double contrastive_loss(const Matrix& emb, std::span<const std::uint8_t> positive, const Matrix& extra,
                        std::size_t extra_per_anchor, double tau, Matrix* d_emb = nullptr, Matrix* d_extra = nullptr,
                        ContrastiveStats* stats = nullptr, double scale = 1.0);

/// mask[i*B + j] = 1 iff j != i and pair_j equals pair_i or is among pair_i's neighbors.
std::vector<std::uint8_t> positive_mask(std::span<const quant::OpqPair> pairs, const NeighborTable& neighbors);

double total_loss(double bce, double trans, double cont, double alpha1, double alpha2);

// --- model -----------------------------------------------------------------

class SmileModel {
 public:
  SmileModel(const ModelDims& dims, const HyperParams& hp, Variant variant, std::uint64_t init_seed);

  diff::ParameterStore& params() { return params_; }
  /// Adds N(0, std_dev^2) noise to every parameter. Gradient checks use it to
  /// leave the initial point, where the zero gate output layer hides gate.W1.
  void perturb(double std_dev, std::uint64_t seed);
  const diff::ParameterStore& params() const { return params_; }
  const ModelDims& dims() const { return dims_; }
  const HyperParams& hyper() const { return hp_; }
  Variant variant() const { return variant_; }
  const VariantPlan& plan() const { return plan_; }

  /// Sum of the three RQ code embeddings through a residual dense layer.
  void fuse_rq(const SemanticId& sid, std::span<double> out) const;
  /// Gate in (0,1) from context, user embedding and item conversion features.
  double transfer_gate(std::span<const double> context, std::span<const double> user_emb,
                       std::span<const double> item_features) const;
  /// Sum of the two OPQ code embeddings.
  void opq_embed(const SemanticId& sid, std::span<double> out) const;

  /// Item representation as seen by the tower for the given request.
  Vec item_representation(std::uint32_t item, const TrainingSample& request, const ItemSideInfo& items) const;

  double predict(const TrainingSample& sample, const ItemSideInfo& items) const;
  std::vector<double> predict(std::span<const TrainingSample> samples, const ItemSideInfo& items) const;

  /// Batch objective; with_grad accumulates into params().
  LossBreakdown loss(const Batch& batch, const ItemSideInfo& items, const NeighborTable& neighbors, bool with_grad);

  /// Full-objective finite-difference check on one batch.
  diff::GradCheckReport grad_check(const Batch& batch, const ItemSideInfo& items, const NeighborTable& neighbors,
                                   const diff::GradCheckOptions& options = {});

 private:
  struct ItemCache;
  struct SampleCache;

  void check_sid(const SemanticId& sid) const;
  void item_forward(std::uint32_t item, const TrainingSample& request, std::span<const double> user_emb,
                    const ItemSideInfo& items, ItemCache& c) const;
  void item_backward(ItemCache& c, std::span<const double> d_final, std::span<const double> extra_d_id,
                     std::span<const double> extra_d_rq, double extra_d_gate, std::span<double> d_user);
  double sample_forward(const TrainingSample& s, const ItemSideInfo& items, SampleCache& c) const;
  void sample_backward(std::size_t index, const TrainingSample& s, SampleCache& c, double d_logit, double trans_scale);

  enum class SgMode { kLive, kRecord, kReplay };
  double sample_transfer(std::size_t index, const SampleCache& c, TransferGrads* grads, double scale);

  ModelDims dims_;
  HyperParams hp_;
  SgMode sg_mode_ = SgMode::kLive;
  std::vector<Vec> sg_targets_;  // two per sample while grad checking
  Variant variant_;
  VariantPlan plan_;
  diff::ParameterStore params_;
  // Cached handles into params_ (std::map nodes are stable).
  diff::Tensor *id_, *user_, *query_;
  std::array<diff::Tensor*, 3> rq_;
  std::array<diff::Tensor*, 2> opq_;
  diff::Tensor *fuse_w_, *fuse_b_, *ctx_w_, *ctx_b_;
  diff::Tensor *gate_w1_, *gate_b1_, *gate_w2_, *gate_b2_;
  diff::Tensor *tower_w1_, *tower_b1_, *tower_w2_, *tower_b2_, *tower_w3_, *tower_b3_;
};

// --- training ----------------------------------------------------------------

struct TrainConfig {
  HyperParams hp;
  Variant variant = Variant::kSmile;
  std::size_t epochs = 2;
  std::uint64_t seed = 1;
  diff::AdamConfig adam;  // lr is taken from hp.lr
};

struct EpochRecord {
  std::size_t epoch = 0;
  double bce = 0.0;
  double trans = 0.0;
  double cont = 0.0;
  double total = 0.0;
  nlohmann::json eval;  // filled by the optional per-epoch callback
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  std::size_t positive_free_batches = 0;
};

using EpochCallback = std::function<nlohmann::json(const SmileModel&, std::size_t epoch)>;

/// Seeded shuffled mini-batches with one Adam step each. Extra negatives are
/// drawn from items that occur in the training samples.
TrainResult train(SmileModel& model, std::span<const TrainingSample> samples, const ItemSideInfo& items,
                  const NeighborTable& neighbors, const TrainConfig& config, const EpochCallback& on_epoch = {});

nlohmann::json to_json(const HyperParams& hp);
nlohmann::json to_json(const EpochRecord& r);

}  // namespace smile::model
