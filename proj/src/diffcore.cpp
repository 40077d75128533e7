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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace smile::diff {

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  value.assign(n, 0.0);
  grad.assign(n, 0.0);
}

Tensor& ParameterStore::add(const std::string& name, std::vector<std::size_t> shape) {
  if (slots_.count(name) != 0) throw InvalidArgument("ParameterStore: duplicate parameter " + name);
  Slot slot{Tensor(std::move(shape)), {}, {}};
  slot.m.assign(slot.tensor.size(), 0.0);
  slot.v.assign(slot.tensor.size(), 0.0);
  order_.push_back(name);
  return slots_.emplace(name, std::move(slot)).first->second.tensor;
}

Tensor& ParameterStore::at(const std::string& name) {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw InvalidArgument("ParameterStore: unknown parameter " + name);
  return it->second.tensor;
}

const Tensor& ParameterStore::at(const std::string& name) const {
  auto it = slots_.find(name);
  if (it == slots_.end()) throw InvalidArgument("ParameterStore: unknown parameter " + name);
  return it->second.tensor;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, slot] : slots_) n += slot.tensor.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, slot] : slots_) std::ranges::fill(slot.tensor.grad, 0.0);
}

void ParameterStore::check_finite() const {
  for (const auto& name : order_) {
    const auto& t = slots_.at(name).tensor;
    if (!all_finite(t.value)) throw NumericFault("non-finite value in parameter " + name);
    if (!all_finite(t.grad)) throw NumericFault("non-finite gradient in parameter " + name);
  }
}

void ParameterStore::adam_step(const AdamConfig& config) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (const auto& name : order_) {
    Slot& slot = slots_.at(name);
    auto& p = slot.tensor.value;
    auto& g = slot.tensor.grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      slot.m[i] = config.beta1 * slot.m[i] + (1.0 - config.beta1) * g[i];
      slot.v[i] = config.beta2 * slot.v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = slot.m[i] / c1;
      const double v_hat = slot.v[i] / c2;
      p[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
      g[i] = 0.0;
    }
  }
}

void ParameterStore::save(const std::filesystem::path& stem, const nlohmann::json& provenance) const {
  std::vector<char> blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& name : order_) {
    const auto& t = slots_.at(name).tensor;
    tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset", blob.size() / sizeof(float)}});
    append_f32(blob, t.value);
  }
  const nlohmann::json manifest = {{"format", "smile.parameters"},
                                   {"version", kFormatVersion},
                                   {"tool_version", kToolVersion},
                                   {"dtype", "float32-le"},
                                   {"adam_timestep", step_},
                                   {"tensors", std::move(tensors)},
                                   {"provenance", provenance}};
  auto bin = stem;
  bin += ".bin";
  auto man = stem;
  man += ".manifest.json";
  write_file_atomic(bin, std::string_view(blob.data(), blob.size()));
  write_file_atomic(man, manifest.dump(2));
}

void ParameterStore::load(const std::filesystem::path& stem) {
  auto man = stem;
  man += ".manifest.json";
  auto bin = stem;
  bin += ".bin";
  const auto text = read_file(man);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("parameter manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "smile.parameters" || manifest.value("version", -1) != kFormatVersion) {
    throw ArtifactError("parameter manifest: unexpected format or version in " + man.string());
  }
  const auto blob = read_file(bin);
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    if (!contains(name)) throw ArtifactError("checkpoint has unknown parameter " + name);
    Tensor& t = at(name);
    if (entry.at("shape").get<std::vector<std::size_t>>() != t.shape) {
      throw ArtifactError("checkpoint shape mismatch for " + name);
    }
    t.value = read_f32(blob, entry.at("offset").get<std::size_t>(), t.size());
  }
  step_ = manifest.value("adam_timestep", std::uint64_t{0});
}

// --- kernels ---------------------------------------------------------------

void linear(const Tensor& weight, const Tensor& bias, std::span<const double> x, std::span<double> y) {
  const std::size_t out = weight.rows(), in = weight.cols();
  if (x.size() != in || y.size() != out || bias.size() != out) {
    throw InvalidArgument("linear: shape mismatch (W " + std::to_string(out) + "x" + std::to_string(in) + ", x " +
                          std::to_string(x.size()) + ", y " + std::to_string(y.size()) + ")");
  }
  for (std::size_t o = 0; o < out; ++o) {
    const double* w = weight.value.data() + o * in;
    double s = bias.value[o];
    for (std::size_t i = 0; i < in; ++i) s += w[i] * x[i];
    y[o] = s;
  }
}

void linear_backward(Tensor& weight, Tensor& bias, std::span<const double> x, std::span<const double> dy,
                     std::span<double> dx) {
  const std::size_t out = weight.rows(), in = weight.cols();
  if (x.size() != in || dy.size() != out || (!dx.empty() && dx.size() != in)) {
    throw InvalidArgument("linear_backward: shape mismatch");
  }
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    if (g == 0.0) continue;
    bias.grad[o] += g;
    double* gw = weight.grad.data() + o * in;
    const double* w = weight.value.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) gw[i] += g * x[i];
    if (!dx.empty()) {
      for (std::size_t i = 0; i < in; ++i) dx[i] += g * w[i];
    }
  }
}

void relu(std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw InvalidArgument("relu: shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_backward(std::span<const double> y, std::span<const double> dy, std::span<double> dx) {
  if (y.size() != dy.size() || dx.size() != dy.size()) throw InvalidArgument("relu_backward: shape mismatch");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] > 0.0) dx[i] += dy[i];
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void softmax(std::span<const double> x, double temperature, std::span<double> p) {
  if (x.size() != p.size() || x.empty()) throw InvalidArgument("softmax: shape mismatch");
  if (!(temperature > 0.0)) throw InvalidArgument("softmax: temperature must be positive");
  const double mx = *std::ranges::max_element(x);
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp((x[i] - mx) / temperature);
    z += p[i];
  }
  for (double& v : p) v /= z;
}

void softmax_backward(std::span<const double> p, std::span<const double> dp, double temperature,
                      std::span<double> dx) {
  if (p.size() != dp.size() || dx.size() != p.size()) throw InvalidArgument("softmax_backward: shape mismatch");
  const double inner = dot(p, dp);
  for (std::size_t i = 0; i < p.size(); ++i) dx[i] += p[i] * (dp[i] - inner) / temperature;
}

void concat(std::initializer_list<std::span<const double>> parts, std::span<double> out) {
  std::size_t off = 0;
  for (auto part : parts) {
    if (off + part.size() > out.size()) throw InvalidArgument("concat: output too small");
    std::ranges::copy(part, out.begin() + static_cast<std::ptrdiff_t>(off));
    off += part.size();
  }
  if (off != out.size()) throw InvalidArgument("concat: output size mismatch");
}

void concat_backward(std::span<const double> dy, std::initializer_list<std::span<double>> parts) {
  std::size_t off = 0;
  for (auto part : parts) {
    if (off + part.size() > dy.size()) throw InvalidArgument("concat_backward: shape mismatch");
    for (std::size_t i = 0; i < part.size(); ++i) part[i] += dy[off + i];
    off += part.size();
  }
  if (off != dy.size()) throw InvalidArgument("concat_backward: shape mismatch");
}

void mean_pool(std::span<const std::span<const double>> rows, std::span<double> out) {
  std::ranges::fill(out, 0.0);
  if (rows.empty()) return;
  for (auto r : rows) {
    if (r.size() != out.size()) throw InvalidArgument("mean_pool: row size mismatch");
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& v : out) v *= inv;
}

void mean_pool_backward(std::size_t n_rows, std::span<const double> dy, std::span<const std::span<double>> drows) {
  if (n_rows == 0) return;
  const double inv = 1.0 / static_cast<double>(n_rows);
  for (auto dr : drows) {
    if (dr.size() != dy.size()) throw InvalidArgument("mean_pool_backward: row size mismatch");
    for (std::size_t j = 0; j < dy.size(); ++j) dr[j] += dy[j] * inv;
  }
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("cosine_similarity: length mismatch");
  const double na = std::max(std::sqrt(dot(a, a)), kNormFloor);
  const double nb = std::max(std::sqrt(dot(b, b)), kNormFloor);
  return dot(a, b) / (na * nb);
}

void cosine_similarity_backward(std::span<const double> a, std::span<const double> b, double dc,
                                std::span<double> da, std::span<double> db) {
  if (a.size() != b.size()) throw InvalidArgument("cosine_similarity_backward: length mismatch");
  const double ra = std::sqrt(dot(a, a));
  const double rb = std::sqrt(dot(b, b));
  const double na = std::max(ra, kNormFloor);
  const double nb = std::max(rb, kNormFloor);
  const double ab = dot(a, b);
  const double c = ab / (na * nb);
  // Clamped norms are constants, so only the unclamped side carries the -c*x/|x|^2 term.
  const double ka = ra > kNormFloor ? c / (na * na) : 0.0;
  const double kb = rb > kNormFloor ? c / (nb * nb) : 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!da.empty()) da[i] += dc * (b[i] / (na * nb) - ka * a[i]);
    if (!db.empty()) db[i] += dc * (a[i] / (na * nb) - kb * b[i]);
  }
}

double bce_loss(std::span<const double> y_hat, std::span<const double> y, std::span<double> dy_hat) {
  if (y_hat.empty()) throw InvalidArgument("bce_loss: empty batch");
  if (y_hat.size() != y.size() || (!dy_hat.empty() && dy_hat.size() != y.size())) {
    throw InvalidArgument("bce_loss: length mismatch");
  }
  const double inv_n = 1.0 / static_cast<double>(y.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double p = std::clamp(y_hat[i], kProbClamp, 1.0 - kProbClamp);
    loss -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
    if (!dy_hat.empty() && p == y_hat[i]) dy_hat[i] += -(y[i] / p - (1.0 - y[i]) / (1.0 - p)) * inv_n;
  }
  return loss * inv_n;
}

double kl_divergence(std::span<const double> p, std::span<const double> q, std::span<double> dp,
                     std::span<double> dq) {
  if (p.size() != q.size()) throw InvalidArgument("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool clamped = q[i] < kKlFloor;
    const double qi = clamped ? kKlFloor : q[i];
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / qi);
    if (!dp.empty() && p[i] > 0.0) dp[i] += std::log(p[i] / qi) + 1.0;
    if (!dq.empty() && !clamped) dq[i] -= p[i] / qi;
  }
  return kl;
}

// --- gradient checking ------------------------------------------------------

GradCheckReport grad_check(const LossFn& loss, ParameterStore& params, const GradCheckOptions& options) {
  params.zero_grad();
  const double base = loss(true);
  if (!std::isfinite(base)) throw NumericFault("grad_check: non-finite loss");

  std::map<std::string, Vec> analytic;
  for (const auto& name : params.names()) analytic[name] = params.at(name).grad;
  params.zero_grad();

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (const auto& name : params.names()) {
    if (!options.only.empty() && std::ranges::find(options.only, name) == options.only.end()) continue;
    Tensor& t = params.at(name);
    const Vec& a = analytic[name];

    std::vector<std::size_t> coords;
    if (t.size() <= options.max_coords_per_tensor) {
      coords.resize(t.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    } else {
      // Every coordinate with a nonzero analytic gradient is a candidate; pad with random ones.
      std::vector<std::size_t> active;
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (a[i] != 0.0) active.push_back(i);
      }
      std::shuffle(active.begin(), active.end(), rng);
      if (active.size() > options.max_coords_per_tensor / 2) active.resize(options.max_coords_per_tensor / 2);
      coords = std::move(active);
      while (coords.size() < options.min_coords_per_tensor + options.max_coords_per_tensor / 8) {
        coords.push_back(static_cast<std::size_t>(rng() % t.size()));
      }
    }

    auto central = [&](std::size_t idx, double h) {
      const double saved = t.value[idx];
      t.value[idx] = saved + h;
      const double up = loss(false);
      t.value[idx] = saved - h;
      const double down = loss(false);
      t.value[idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NumericFault("grad_check: non-finite loss at " + name);
      return (up - down) / (2.0 * h);
    };
    auto rel_error = [&](double analytic, double numeric) {
      return std::abs(analytic - numeric) / std::max(std::abs(numeric), options.floor);
    };
    for (std::size_t idx : coords) {
      double numeric = central(idx, options.h);
      double rel = rel_error(a[idx], numeric);
      if (rel > options.retry_above) {
        // A ReLU kink inside [x - h, x + h] spoils the difference; a much smaller step usually clears it.
        const double fine = central(idx, options.h * options.retry_scale);
        const double fine_rel = rel_error(a[idx], fine);
        ++report.retried;
        if (fine_rel < rel) {
          numeric = fine;
          rel = fine_rel;
        }
      }
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = name;
        report.worst_index = idx;
        report.worst_analytic = a[idx];
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace smile::diff
