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

#include <cstdint>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smile/common.hpp"

/// A small differentiable substrate: named parameter tensors with gradients,
/// hand-written forward/backward kernels, Adam, and a finite-difference checker.
///
/// Backward kernels accumulate (+=) into gradient buffers, so callers zero
/// gradients once per step and may call several backward kernels into the
/// same buffer.
namespace smile::diff {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kKlFloor = 1e-9;
inline constexpr double kNormFloor = 1e-12;

struct Tensor {
  std::vector<std::size_t> shape;
  Vec value;
  Vec grad;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s);

  std::size_t size() const { return value.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  std::size_t cols() const { return shape.size() < 2 ? 1 : size() / rows(); }
  std::span<double> row(std::size_t i) { return {value.data() + i * cols(), cols()}; }
  std::span<const double> row(std::size_t i) const { return {value.data() + i * cols(), cols()}; }
  std::span<double> grad_row(std::size_t i) { return {grad.data() + i * cols(), cols()}; }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class ParameterStore {
 public:
  /// Registers a zero-initialised tensor. Names must be unique.
  Tensor& add(const std::string& name, std::vector<std::size_t> shape);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return slots_.count(name) != 0; }
  /// Registration order; also the on-disk order.
  const std::vector<std::string>& names() const { return order_; }
  std::size_t parameter_count() const;

  void zero_grad();
  /// Throws NumericFault naming the first tensor holding a NaN/Inf value or gradient.
  void check_finite() const;

  /// Bias-corrected Adam over every tensor, then zeroes gradients.
  void adam_step(const AdamConfig& config);
  std::uint64_t timestep() const { return step_; }

  void save(const std::filesystem::path& stem, const nlohmann::json& provenance) const;
  /// Loads values into an existing store; names and shapes must match.
  void load(const std::filesystem::path& stem);

 private:
  struct Slot {
    Tensor tensor;
    Vec m;
    Vec v;
  };
  std::vector<std::string> order_;
  std::map<std::string, Slot> slots_;
  std::uint64_t step_ = 0;
};

// --- kernels ---------------------------------------------------------------

/// y = W x + b with W shaped [out, in].
void linear(const Tensor& weight, const Tensor& bias, std::span<const double> x, std::span<double> y);
/// Accumulates dW, db, and (when dx is non-empty) dx.
void linear_backward(Tensor& weight, Tensor& bias, std::span<const double> x, std::span<const double> dy,
                     std::span<double> dx);

void relu(std::span<const double> x, std::span<double> y);
void relu_backward(std::span<const double> y, std::span<const double> dy, std::span<double> dx);

double sigmoid(double x);
/// d/dx given the forward output y.
inline double sigmoid_backward(double y, double dy) { return dy * y * (1.0 - y); }

/// softmax(x / temperature).
void softmax(std::span<const double> x, double temperature, std::span<double> p);
void softmax_backward(std::span<const double> p, std::span<const double> dp, double temperature,
                      std::span<double> dx);

void concat(std::initializer_list<std::span<const double>> parts, std::span<double> out);
/// Scatter-adds the pieces of dy back into each part's gradient.
void concat_backward(std::span<const double> dy, std::initializer_list<std::span<double>> parts);

void mean_pool(std::span<const std::span<const double>> rows, std::span<double> out);
/// Every pooled row receives dy / n.
void mean_pool_backward(std::size_t n_rows, std::span<const double> dy, std::span<const std::span<double>> drows);

/// Cosine similarity with norms clamped at kNormFloor.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
void cosine_similarity_backward(std::span<const double> a, std::span<const double> b, double dc,
                                std::span<double> da, std::span<double> db);

/// Mean binary cross-entropy over probabilities clamped to [1e-7, 1-1e-7].
/// If dy_hat is non-empty it receives dL/dy_hat (zero where the clamp is active).
double bce_loss(std::span<const double> y_hat, std::span<const double> y, std::span<double> dy_hat = {});

/// sum p log(p / max(q, 1e-9)); accumulates gradients into non-empty dp/dq.
double kl_divergence(std::span<const double> p, std::span<const double> q, std::span<double> dp = {},
                     std::span<double> dq = {});

// --- gradient checking ------------------------------------------------------

/// Evaluates the loss; when `with_grad` is true it must also accumulate the
/// analytic gradient into the store (grads are zeroed beforehand).
using LossFn = std::function<double(bool with_grad)>;

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t min_coords_per_tensor = 64;
  std::size_t max_coords_per_tensor = 256;
  /// Relative error is |a - n| / max(|n|, floor).
  double floor = 1e-6;
  std::uint64_t seed = 7;
  /// Coordinates worse than this are re-measured with step h * retry_scale.
  double retry_above = 1e-6;
  double retry_scale = 1e-2;
  std::vector<std::string> only;  // restrict to these tensors when non-empty
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  std::size_t retried = 0;
};

GradCheckReport grad_check(const LossFn& loss, ParameterStore& params, const GradCheckOptions& options = {});

}  // namespace smile::diff
