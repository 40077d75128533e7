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


#include "smile/quantizer.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <random>

namespace smile::quant {
namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

void check_points(const Matrix& points, std::size_t k) {
  if (points.rows == 0) throw InvalidArgument("kmeans: empty point set");
  if (k == 0) throw InvalidArgument("kmeans: K must be >= 1");
  if (k > points.rows) {
    throw InvalidArgument("kmeans: K=" + std::to_string(k) + " exceeds number of points " +
                          std::to_string(points.rows));
  }
  if (!all_finite(points.data)) throw InvalidArgument("kmeans: non-finite input");
}

Matrix kmeanspp_seed(const Matrix& points, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = points.rows;
  Matrix centroids(k, points.cols);
  std::size_t first = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  std::ranges::copy(points.row(first), centroids.row(0).begin());

  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points.row(i), centroids.row(0));

  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = n - 1;
    if (total > 0.0) {
      const double target = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)), n - 1);
    }
    std::ranges::copy(points.row(pick), centroids.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
  }
  return centroids;
}

double assign_all(const Matrix& points, const Matrix& centroids, std::vector<Code>& assignment,
                  std::vector<double>& dist) {
  double sse = 0.0;
  for (std::size_t i = 0; i < points.rows; ++i) {
    const Code c = nearest_centroid(centroids, points.row(i));
    assignment[i] = c;
    dist[i] = squared_distance(points.row(i), centroids.row(c));
    sse += dist[i];
  }
  return sse;
}

Matrix rows_of(const Matrix& m, std::size_t col_begin, std::size_t col_count) {
  Matrix out(m.rows, col_count);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < col_count; ++j) out(i, j) = m(i, col_begin + j);
  }
  return out;
}

Matrix rotate_rows(const Matrix& x, const Matrix& rotation) {
  Matrix y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto xi = x.row(i);
    auto yi = y.row(i);
    for (std::size_t r = 0; r < x.cols; ++r) yi[r] = dot(rotation.row(r), xi);
  }
  return y;
}

Matrix identity(std::size_t d) {
  Matrix m(d, d);
  for (std::size_t i = 0; i < d; ++i) m(i, i) = 1.0;
  return m;
}

// Quantizes each rotated row half by half; returns the total squared error and fills `recon`.
double quantize_rotated(const Matrix& rotated, const std::array<Codebook, 2>& books, Matrix& recon) {
  const std::size_t half = rotated.cols / 2;
  double err = 0.0;
  for (std::size_t i = 0; i < rotated.rows; ++i) {
    auto y = rotated.row(i);
    for (std::size_t s = 0; s < 2; ++s) {
      auto part = y.subspan(s * half, half);
      const Code c = nearest_centroid(books[s].centroids, part);
      auto cen = books[s].centroids.row(c);
      for (std::size_t j = 0; j < half; ++j) {
        recon(i, s * half + j) = cen[j];
        const double t = part[j] - cen[j];
        err += t * t;
      }
    }
  }
  return err;
}

}  // namespace

Code nearest_centroid(const Matrix& centroids, std::span<const double> v) {
  Code best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double d = squared_distance(centroids.row(c), v);
    if (d < best_d) {
      best_d = d;
      best = static_cast<Code>(c);
    }
  }
  return best;
}

KMeansResult lloyd(const Matrix& points, Matrix centroids, std::size_t max_iters, double tol) {
  check_points(points, centroids.rows);
  const std::size_t n = points.rows;
  const std::size_t k = centroids.rows;
  const std::size_t d = points.cols;

  KMeansResult result;
  result.assignment.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k);
  Matrix sums(k, d);

  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    result.sse_history.push_back(assign_all(points, centroids, result.assignment, dist));
    ++result.iterations;

    std::ranges::fill(counts, 0);
    std::ranges::fill(sums.data, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const Code c = result.assignment[i];
      ++counts[c];
      auto row = sums.row(c);
      auto p = points.row(i);
      for (std::size_t j = 0; j < d; ++j) row[j] += p[j];
    }

    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      auto cen = centroids.row(c);
      if (counts[c] == 0) {
        // Empty cluster: reseed to the point farthest from its current centroid.
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i) {
          if (dist[i] > dist[far]) far = i;
        }
        dist[far] = 0.0;
        shift = std::max(shift, std::sqrt(squared_distance(cen, points.row(far))));
        std::ranges::copy(points.row(far), cen.begin());
        continue;
      }
      const double inv = 1.0 / static_cast<double>(counts[c]);
      double moved = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double next = sums(c, j) * inv;
        moved += (next - cen[j]) * (next - cen[j]);
        cen[j] = next;
      }
      shift = std::max(shift, std::sqrt(moved));
    }
    if (shift < tol) break;
  }
  // Leave the assignment consistent with the returned centroids.
  result.sse_history.push_back(assign_all(points, centroids, result.assignment, dist));
  result.codebook.centroids = std::move(centroids);
  return result;
}

KMeansResult kmeans(const Matrix& points, const KMeansOptions& options) {
  check_points(points, options.k);
  std::mt19937_64 rng(options.seed);
  Matrix init = kmeanspp_seed(points, options.k, rng);
  return lloyd(points, std::move(init), options.max_iters, options.tol);
}

RQEncoder train_rq(const Matrix& embeddings, std::size_t k, std::uint64_t seed, std::size_t max_iters) {
  if (embeddings.cols % 2 != 0) throw InvalidArgument("train_rq: dimension must be even for the OPQ stage");
  RQEncoder enc;
  enc.dim = embeddings.cols;
  enc.k = k;
  enc.seed = seed;
  Matrix residual = embeddings;
  for (std::size_t level = 0; level < RQEncoder::kLevels; ++level) {
    auto fit = kmeans(residual, {.k = k, .max_iters = max_iters, .seed = seed + level});
    fit.codebook.level = static_cast<int>(level + 1);
    for (std::size_t i = 0; i < residual.rows; ++i) {
      auto r = residual.row(i);
      auto c = fit.codebook.centroids.row(nearest_centroid(fit.codebook.centroids, r));
      for (std::size_t j = 0; j < r.size(); ++j) r[j] -= c[j];
    }
    enc.codebooks[level] = std::move(fit.codebook);
  }
  return enc;
}

RQEncoding encode_rq(const RQEncoder& enc, std::span<const double> v) {
  if (v.size() != enc.dim) {
    throw InvalidArgument("encode_rq: dimension " + std::to_string(v.size()) + " != " + std::to_string(enc.dim));
  }
  RQEncoding out;
  out.residual.assign(v.begin(), v.end());
  for (std::size_t level = 0; level < RQEncoder::kLevels; ++level) {
    const auto& cb = enc.codebooks[level].centroids;
    const Code c = nearest_centroid(cb, out.residual);
    out.codes[level] = c;
    auto cen = cb.row(c);
    for (std::size_t j = 0; j < enc.dim; ++j) out.residual[j] -= cen[j];
  }
  return out;
}

Vec rq_residual(const RQEncoder& enc, std::span<const double> v, std::size_t levels) {
  if (v.size() != enc.dim) throw InvalidArgument("rq_residual: dimension mismatch");
  Vec r(v.begin(), v.end());
  for (std::size_t level = 0; level < std::min(levels, RQEncoder::kLevels); ++level) {
    const auto& cb = enc.codebooks[level].centroids;
    auto cen = cb.row(nearest_centroid(cb, r));
    for (std::size_t j = 0; j < enc.dim; ++j) r[j] -= cen[j];
  }
  return r;
}

double orthogonality_error(const Matrix& rotation) {
  const std::size_t d = rotation.rows;
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double rtr = 0.0;
      for (std::size_t k = 0; k < d; ++k) rtr += rotation(k, i) * rotation(k, j);
      const double dev = rtr - (i == j ? 1.0 : 0.0);
      s += dev * dev;
    }
  }
  return std::sqrt(s);
}

OPQEncoder train_opq(const Matrix& residuals, const OPQOptions& options) {
  const std::size_t d = residuals.cols;
  if (d == 0 || d % 2 != 0) throw InvalidArgument("train_opq: dimension must be even, got " + std::to_string(d));
  if (residuals.rows < options.k) throw InvalidArgument("train_opq: fewer residuals than K");
  if (!all_finite(residuals.data)) throw InvalidArgument("train_opq: non-finite input");
  const std::size_t half = d / 2;
  const double n = static_cast<double>(residuals.rows);

  OPQEncoder enc;
  enc.dim = d;
  enc.k = options.k;
  enc.seed = options.seed;
  enc.rotation = identity(d);

  Matrix rotated = residuals;
  Matrix recon(residuals.rows, d);
  const std::size_t rounds = options.learn_rotation ? std::max<std::size_t>(options.iters, 1) : 1;

  for (std::size_t round = 0; round < rounds; ++round) {
    // (i) rotation fixed: refit both sub-codebooks on their halves.
    for (std::size_t s = 0; s < 2; ++s) {
      Matrix part = rows_of(rotated, s * half, half);
      KMeansResult fit = round == 0
                             ? kmeans(part, {.k = options.k, .max_iters = options.kmeans_iters, .seed = options.seed + s})
                             : lloyd(part, enc.sub_codebooks[s].centroids, options.refine_iters, 1e-6);
      fit.codebook.level = static_cast<int>(RQEncoder::kLevels + s + 1);
      enc.sub_codebooks[s] = std::move(fit.codebook);
    }
    quantize_rotated(rotated, enc.sub_codebooks, recon);

    if (options.learn_rotation) {
      // (ii) codes fixed: orthogonal Procrustes, R = U V^T from SVD(recon^T X).
      Eigen::MatrixXd corr = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
      for (std::size_t i = 0; i < residuals.rows; ++i) {
        for (std::size_t a = 0; a < d; ++a) {
          const double ya = recon(i, a);
          if (ya == 0.0) continue;
          for (std::size_t b = 0; b < d; ++b) corr(a, b) += ya * residuals(i, b);
        }
      }
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(corr, Eigen::ComputeFullU | Eigen::ComputeFullV);
      const Eigen::MatrixXd r = svd.matrixU() * svd.matrixV().transpose();
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b < d; ++b) enc.rotation(a, b) = r(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
      }
      const double ortho = orthogonality_error(enc.rotation);
      if (!(ortho < 1e-6)) throw NumericFault("train_opq: rotation lost orthogonality (" + std::to_string(ortho) + ")");
      rotated = rotate_rows(residuals, enc.rotation);
    }
    enc.error_history.push_back(quantize_rotated(rotated, enc.sub_codebooks, recon) / n);
  }
  return enc;
}

OpqPair encode_opq(const OPQEncoder& enc, std::span<const double> residual) {
  if (residual.size() != enc.dim) {
    throw InvalidArgument("encode_opq: dimension " + std::to_string(residual.size()) + " != " +
                          std::to_string(enc.dim));
  }
  const std::size_t half = enc.dim / 2;
  Vec y(enc.dim);
  for (std::size_t r = 0; r < enc.dim; ++r) y[r] = dot(enc.rotation.row(r), residual);
  std::span<const double> ys(y);
  return {nearest_centroid(enc.sub_codebooks[0].centroids, ys.first(half)),
          nearest_centroid(enc.sub_codebooks[1].centroids, ys.subspan(half))};
}

double opq_mse(const OPQEncoder& enc, const Matrix& residuals) {
  Matrix recon(residuals.rows, residuals.cols);
  return quantize_rotated(rotate_rows(residuals, enc.rotation), enc.sub_codebooks, recon) /
         static_cast<double>(residuals.rows);
}

std::map<ItemId, SemanticId> assign_semantic_ids(std::span<const ItemEmbedding> items, const RQEncoder& rq,
                                                 const OPQEncoder& opq) {
  if (rq.dim != opq.dim) throw InvalidArgument("assign_semantic_ids: RQ and OPQ dimensions differ");
  std::map<ItemId, SemanticId> out;
  for (const auto& item : items) {
    const RQEncoding e = encode_rq(rq, item.embedding);
    const auto [o1, o2] = encode_opq(opq, e.residual);
    out[item.id] = SemanticId{e.codes[0], e.codes[1], e.codes[2], o1, o2};
  }
  return out;
}

Vec reconstruct_rq(std::span<const Code> codes, const RQEncoder& rq) {
  Vec out(rq.dim, 0.0);
  for (std::size_t level = 0; level < codes.size(); ++level) {
    const auto& cb = rq.codebooks[level].centroids;
    if (codes[level] >= cb.rows) throw InvalidArgument("reconstruct: RQ code out of range");
    auto c = cb.row(codes[level]);
    for (std::size_t j = 0; j < rq.dim; ++j) out[j] += c[j];
  }
  return out;
}

Vec reconstruct(const SemanticId& sid, const RQEncoder& rq, const OPQEncoder& opq) {
  const auto codes = sid.rq();
  Vec out = reconstruct_rq(codes, rq);
  if (opq.dim != rq.dim) throw InvalidArgument("reconstruct: RQ and OPQ dimensions differ");
  if (sid.opq1 >= opq.sub_codebooks[0].size() || sid.opq2 >= opq.sub_codebooks[1].size()) {
    throw InvalidArgument("reconstruct: OPQ code out of range");
  }
  const std::size_t half = opq.dim / 2;
  Vec y(opq.dim);
  std::ranges::copy(opq.sub_codebooks[0].centroids.row(sid.opq1), y.begin());
  std::ranges::copy(opq.sub_codebooks[1].centroids.row(sid.opq2), y.begin() + static_cast<std::ptrdiff_t>(half));
  for (std::size_t j = 0; j < opq.dim; ++j) {
    double s = 0.0;
    for (std::size_t r = 0; r < opq.dim; ++r) s += opq.rotation(r, j) * y[r];
    out[j] += s;
  }
  return out;
}

// --- neighbor table -------------------------------------------------------

NeighborTable::NeighborTable(std::size_t codebook_size, std::size_t k)
    : codebook_size_(codebook_size), k_(k), neighbors_(codebook_size * codebook_size) {}

std::vector<OpqPair> NeighborTable::neighbors(OpqPair p) const {
  std::vector<OpqPair> out;
  for (auto idx : neighbors_[pair_index(p)]) out.push_back(pair_at(idx));
  return out;
}

bool NeighborTable::is_neighbor(OpqPair anchor, OpqPair candidate) const {
  const auto& list = neighbors_[pair_index(anchor)];
  const auto target = static_cast<std::uint32_t>(pair_index(candidate));
  return std::ranges::find(list, target) != list.end();
}

nlohmann::json NeighborTable::to_json() const {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t p = 0; p < neighbors_.size(); ++p) {
    if (neighbors_[p].empty()) continue;
    nlohmann::json list = nlohmann::json::array();
    for (auto q : neighbors_[p]) {
      const auto [a, b] = pair_at(q);
      list.push_back({a, b});
    }
    const auto [a, b] = pair_at(p);
    entries.push_back({{"pair", {a, b}}, {"neighbors", std::move(list)}});
  }
  nlohmann::json excluded = nlohmann::json::array();
  for (const auto& [a, b] : excluded_) excluded.push_back({a, b});
  return {{"format", "smile.neighbors"},
          {"version", kFormatVersion},
          {"codebook_size", codebook_size_},
          {"k", k_},
          {"entries", std::move(entries)},
          {"excluded", std::move(excluded)}};
}

NeighborTable NeighborTable::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "smile.neighbors" || j.value("version", -1) != kFormatVersion) {
    throw ArtifactError("neighbor table: unexpected format or version");
  }
  NeighborTable t(j.at("codebook_size").get<std::size_t>(), j.at("k").get<std::size_t>());
  for (const auto& e : j.at("entries")) {
    const OpqPair p{e.at("pair")[0].get<Code>(), e.at("pair")[1].get<Code>()};
    std::vector<std::uint32_t> list;
    for (const auto& q : e.at("neighbors")) {
      list.push_back(static_cast<std::uint32_t>(t.pair_index({q[0].get<Code>(), q[1].get<Code>()})));
    }
    t.set(t.pair_index(p), std::move(list));
  }
  for (const auto& e : j.at("excluded")) t.mark_excluded({e[0].get<Code>(), e[1].get<Code>()});
  return t;
}

NeighborTable opq_code_similarity_topk(const OPQEncoder& enc, std::size_t k) {
  const std::size_t kc = enc.sub_codebooks[0].size();
  if (enc.sub_codebooks[1].size() != kc) throw InvalidArgument("opq_code_similarity_topk: sub-codebook sizes differ");
  const std::size_t n_pairs = kc * kc;
  if (k == 0 || k >= n_pairs) throw InvalidArgument("opq_code_similarity_topk: need 0 < k < K^2");

  // Gram matrices of each sub-codebook; cosine of concatenations follows from them.
  std::array<Matrix, 2> gram;
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& c = enc.sub_codebooks[s].centroids;
    gram[s] = Matrix(kc, kc);
    for (std::size_t a = 0; a < kc; ++a) {
      for (std::size_t b = 0; b < kc; ++b) gram[s](a, b) = dot(c.row(a), c.row(b));
    }
  }
  NeighborTable table(kc, k);
  std::vector<double> norm(n_pairs);
  std::vector<char> valid(n_pairs, 1);
  std::size_t n_valid = 0;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const std::size_t a = p / kc, b = p % kc;
    norm[p] = std::sqrt(gram[0](a, a) + gram[1](b, b));
    if (norm[p] < 1e-12) {
      valid[p] = 0;
      table.mark_excluded(table.pair_at(p));
      std::cerr << "[smile] opq_code_similarity_topk: pair (" << a << "," << b
                << ") has zero-norm centroid, excluded\n";
    } else {
      ++n_valid;
    }
  }
  if (n_valid <= k) throw InvalidArgument("opq_code_similarity_topk: fewer than k+1 non-degenerate code pairs");

  // Sorted best-first: higher cosine wins, equal cosine goes to the lower pair index.
  auto better = [](const std::pair<double, std::uint32_t>& x, const std::pair<double, std::uint32_t>& y) {
    return x.first > y.first || (x.first == y.first && x.second < y.second);
  };
  std::vector<std::pair<double, std::uint32_t>> top;
  top.reserve(k + 1);
  for (std::size_t p = 0; p < n_pairs; ++p) {
    if (!valid[p]) continue;
    const std::size_t a = p / kc, b = p % kc;
    top.clear();
    for (std::size_t q = 0; q < n_pairs; ++q) {
      if (q == p || !valid[q]) continue;
      const std::size_t a2 = q / kc, b2 = q % kc;
      const double cos = (gram[0](a, a2) + gram[1](b, b2)) / (norm[p] * norm[q]);
      std::pair<double, std::uint32_t> cand{cos, static_cast<std::uint32_t>(q)};
      if (top.size() == k && !better(cand, top.back())) continue;
      top.insert(std::upper_bound(top.begin(), top.end(), cand, better), cand);
      if (top.size() > k) top.pop_back();
    }
    std::vector<std::uint32_t> list;
    list.reserve(k);
    for (const auto& [c, q] : top) list.push_back(q);
    table.set(p, std::move(list));
  }
  return table;
}

// --- persistence ----------------------------------------------------------

void save_quantizer(const std::filesystem::path& stem, const QuantizerBundle& bundle,
                    const nlohmann::json& provenance) {
  const auto& rq = bundle.rq;
  const auto& opq = bundle.opq;
  std::vector<char> blob;
  nlohmann::json layout = nlohmann::json::array();
  auto add = [&](const std::string& name, const Matrix& m) {
    layout.push_back({{"name", name}, {"offset", blob.size() / sizeof(float)}, {"shape", {m.rows, m.cols}}});
    append_f32(blob, m.data);
  };
  for (std::size_t level = 0; level < RQEncoder::kLevels; ++level) {
    add("rq" + std::to_string(level + 1), rq.codebooks[level].centroids);
  }
  add("rotation", opq.rotation);
  add("opq1", opq.sub_codebooks[0].centroids);
  add("opq2", opq.sub_codebooks[1].centroids);

  nlohmann::json manifest = {{"format", "smile.quantizer"},
                             {"version", kFormatVersion},
                             {"tool_version", kToolVersion},
                             {"dim", rq.dim},
                             {"k", rq.k},
                             {"opq_k", opq.k},
                             {"rq_levels", RQEncoder::kLevels},
                             {"opq_subspaces", 2},
                             {"seeds", {{"rq", rq.seed}, {"opq", opq.seed}}},
                             {"opq_error_history", opq.error_history},
                             {"dtype", "float32-le"},
                             {"layout", std::move(layout)},
                             {"provenance", provenance}};
  auto bin = stem;
  bin += ".bin";
  auto man = stem;
  man += ".manifest.json";
  write_file_atomic(bin, std::string_view(blob.data(), blob.size()));
  write_file_atomic(man, manifest.dump(2));
}

QuantizerBundle load_quantizer(const std::filesystem::path& stem) {
  auto man = stem;
  man += ".manifest.json";
  auto bin = stem;
  bin += ".bin";
  const auto text = read_file(man);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("quantizer manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "smile.quantizer" || manifest.value("version", -1) != kFormatVersion) {
    throw ArtifactError("quantizer manifest: unexpected format or version in " + man.string());
  }
  const auto blob = read_file(bin);
  auto read_matrix = [&](const std::string& name) {
    for (const auto& entry : manifest.at("layout")) {
      if (entry.at("name") != name) continue;
      Matrix m(entry.at("shape")[0].get<std::size_t>(), entry.at("shape")[1].get<std::size_t>());
      m.data = read_f32(blob, entry.at("offset").get<std::size_t>(), m.rows * m.cols);
      return m;
    }
    throw ArtifactError("quantizer manifest: missing array " + name);
  };
  QuantizerBundle b;
  b.rq.dim = b.opq.dim = manifest.at("dim").get<std::size_t>();
  b.rq.k = manifest.at("k").get<std::size_t>();
  b.opq.k = manifest.at("opq_k").get<std::size_t>();
  b.rq.seed = manifest.at("seeds").at("rq").get<std::uint64_t>();
  b.opq.seed = manifest.at("seeds").at("opq").get<std::uint64_t>();
  for (std::size_t level = 0; level < RQEncoder::kLevels; ++level) {
    b.rq.codebooks[level] = {static_cast<int>(level + 1), read_matrix("rq" + std::to_string(level + 1))};
  }
  b.opq.rotation = read_matrix("rotation");
  b.opq.sub_codebooks[0] = {4, read_matrix("opq1")};
  b.opq.sub_codebooks[1] = {5, read_matrix("opq2")};
  b.opq.error_history = manifest.at("opq_error_history").get<std::vector<double>>();
  return b;
}

nlohmann::json semantic_ids_to_json(const std::map<ItemId, SemanticId>& ids) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& [id, s] : ids) items.push_back({id, s.rq1, s.rq2, s.rq3, s.opq1, s.opq2});
  return {{"format", "smile.semantic_ids"},
          {"version", kFormatVersion},
          {"columns", {"item_id", "rq1", "rq2", "rq3", "opq1", "opq2"}},
          {"items", std::move(items)}};
}

std::map<ItemId, SemanticId> semantic_ids_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "smile.semantic_ids" || j.value("version", -1) != kFormatVersion) {
    throw ArtifactError("semantic id map: unexpected format or version");
  }
  std::map<ItemId, SemanticId> out;
  for (const auto& row : j.at("items")) {
    out[row[0].get<ItemId>()] =
        SemanticId{row[1].get<Code>(), row[2].get<Code>(), row[3].get<Code>(), row[4].get<Code>(), row[5].get<Code>()};
  }
  return out;
}

}  // namespace smile::quant
