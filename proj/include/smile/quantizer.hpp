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
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "smile/common.hpp"

/// Residual quantization (RQ-KMeans) and optimized product quantization over
/// item content embeddings, producing 5-level semantic IDs.
namespace smile::quant {

using ItemId = std::uint32_t;
using Code = std::uint32_t;

struct Codebook {
  int level = 0;
  Matrix centroids;  // K x d_sub

  std::size_t size() const { return centroids.rows; }
  std::size_t dim() const { return centroids.cols; }
};

struct KMeansOptions {
  std::size_t k = 256;
  std::size_t max_iters = 50;
  double tol = 1e-6;  // max centroid shift that counts as converged
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Codebook codebook;
  std::vector<Code> assignment;
  std::vector<double> sse_history;  // SSE after each assignment step
  std::size_t iterations = 0;
};

/// Lloyd's algorithm from k-means++ seeds. Deterministic for a given seed.
KMeansResult kmeans(const Matrix& points, const KMeansOptions& options);

/// Lloyd iterations warm-started from `init`; never increases SSE.
KMeansResult lloyd(const Matrix& points, Matrix init, std::size_t max_iters, double tol);

/// Index of the nearest centroid; ties go to the lowest index.
Code nearest_centroid(const Matrix& centroids, std::span<const double> v);

struct RQEncoder {
  static constexpr std::size_t kLevels = 3;
  std::size_t dim = 0;
  std::size_t k = 256;
  std::uint64_t seed = 0;
  std::array<Codebook, kLevels> codebooks;
};

struct RQEncoding {
  std::array<Code, RQEncoder::kLevels> codes{};
  Vec residual;
};

RQEncoder train_rq(const Matrix& embeddings, std::size_t k, std::uint64_t seed, std::size_t max_iters = 50);
RQEncoding encode_rq(const RQEncoder& enc, std::span<const double> v);

/// Residual left after the first `levels` RQ levels (0 returns the input).
Vec rq_residual(const RQEncoder& enc, std::span<const double> v, std::size_t levels);

struct OPQEncoder {
  std::size_t dim = 0;
  std::size_t k = 256;
  std::uint64_t seed = 0;
  Matrix rotation;                     // d x d, applied as y = R x
  std::array<Codebook, 2> sub_codebooks;  // each K x d/2
  std::vector<double> error_history;   // mean squared error after each alternation
};

struct OPQOptions {
  std::size_t k = 256;
  std::size_t iters = 20;
  std::size_t kmeans_iters = 50;
  std::size_t refine_iters = 10;  // Lloyd steps per alternation after the first
  std::uint64_t seed = 0;
  bool learn_rotation = true;  // false gives plain PQ with the identity rotation
};

OPQEncoder train_opq(const Matrix& residuals, const OPQOptions& options);
inline OPQEncoder train_opq(const Matrix& residuals, std::size_t k, std::size_t iters, std::uint64_t seed) {
  return train_opq(residuals, OPQOptions{.k = k, .iters = iters, .seed = seed});
}

using OpqPair = std::pair<Code, Code>;

OpqPair encode_opq(const OPQEncoder& enc, std::span<const double> residual);

/// Mean over rows of ||x - R^T q(R x)||^2.
double opq_mse(const OPQEncoder& enc, const Matrix& residuals);

/// Frobenius norm of R^T R - I.
double orthogonality_error(const Matrix& rotation);

struct SemanticId {
  Code rq1 = 0, rq2 = 0, rq3 = 0, opq1 = 0, opq2 = 0;

  std::array<Code, RQEncoder::kLevels> rq() const { return {rq1, rq2, rq3}; }
  OpqPair opq() const { return {opq1, opq2}; }
  auto operator<=>(const SemanticId&) const = default;
};

struct ItemEmbedding {
  ItemId id;
  Vec embedding;
};

std::map<ItemId, SemanticId> assign_semantic_ids(std::span<const ItemEmbedding> items, const RQEncoder& rq,
                                                 const OPQEncoder& opq);

/// Sum of the RQ centroids plus the de-rotated OPQ sub-centroid concatenation.
Vec reconstruct(const SemanticId& sid, const RQEncoder& rq, const OPQEncoder& opq);

/// Reconstruction of only the RQ part (no OPQ term).
Vec reconstruct_rq(std::span<const Code> codes, const RQEncoder& rq);

/// Top-k most similar OPQ code pairs for every code pair, by cosine of the
/// concatenated sub-centroids. Pairs are indexed as opq1 * K + opq2.
class NeighborTable {
 public:
  NeighborTable() = default;
  NeighborTable(std::size_t codebook_size, std::size_t k);

  std::size_t k() const { return k_; }
  std::size_t codebook_size() const { return codebook_size_; }
  std::size_t pair_index(OpqPair p) const { return static_cast<std::size_t>(p.first) * codebook_size_ + p.second; }
  OpqPair pair_at(std::size_t index) const {
    return {static_cast<Code>(index / codebook_size_), static_cast<Code>(index % codebook_size_)};
  }

  /// False for zero-norm pairs, which are excluded from the table.
  bool contains(OpqPair p) const { return !neighbors_[pair_index(p)].empty(); }
  const std::vector<std::uint32_t>& neighbors(std::size_t pair_idx) const { return neighbors_[pair_idx]; }
  std::vector<OpqPair> neighbors(OpqPair p) const;
  /// True if `candidate` is in the neighbor list of `anchor`.
  bool is_neighbor(OpqPair anchor, OpqPair candidate) const;
  const std::vector<OpqPair>& excluded() const { return excluded_; }

  void set(std::size_t pair_idx, std::vector<std::uint32_t> list) { neighbors_[pair_idx] = std::move(list); }
  void mark_excluded(OpqPair p) { excluded_.push_back(p); }

  nlohmann::json to_json() const;
  static NeighborTable from_json(const nlohmann::json& j);

 private:
  std::size_t codebook_size_ = 0;
  std::size_t k_ = 0;
  std::vector<std::vector<std::uint32_t>> neighbors_;
  std::vector<OpqPair> excluded_;
};

NeighborTable opq_code_similarity_topk(const OPQEncoder& enc, std::size_t k = 10);

// Persistence: <stem>.manifest.json + <stem>.bin (float32 little-endian, row-major).
struct QuantizerBundle {
  RQEncoder rq;
  OPQEncoder opq;
};
void save_quantizer(const std::filesystem::path& stem, const QuantizerBundle& bundle, const nlohmann::json& provenance);
QuantizerBundle load_quantizer(const std::filesystem::path& stem);

nlohmann::json semantic_ids_to_json(const std::map<ItemId, SemanticId>& ids);
std::map<ItemId, SemanticId> semantic_ids_from_json(const nlohmann::json& j);

}  // namespace smile::quant
