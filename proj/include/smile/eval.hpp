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
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smile/common.hpp"
#include "smile/datagen.hpp"
#include "smile/model.hpp"

/// Ranking metrics, slice evaluation, and the variant ablation harness.
namespace smile::eval {

/// Probability that a random positive outranks a random negative, ties scoring 0.5.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Weighted mean of per-group AUC over groups that contain both classes.
/// Without explicit weights a group weighs its number of samples.
double gauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
            std::span<const std::uint32_t> groups, const std::map<std::uint32_t, double>& weights = {});

enum class GroupBy { kUser, kQuery };
GroupBy parse_group_by(const std::string& name);
std::string to_string(GroupBy g);

inline const std::vector<std::string> kSlices = {"all", "warm", "cold"};

struct SliceMetrics {
  double auc = 0.0;   // NaN when the slice lacks one of the classes
  double gauc = 0.0;  // NaN when no group has both classes
  std::size_t n_samples = 0;
};

struct MetricsReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::map<std::string, SliceMetrics> slices;
};

/// All / Warm / Cold metrics; mid items only count towards All.
std::map<std::string, SliceMetrics> slice_metrics(std::span<const double> scores,
                                                  std::span<const model::TrainingSample> samples,
                                                  std::span<const data::ItemLabel> item_labels, GroupBy group_by);

MetricsReport evaluate(const model::SmileModel& m, std::span<const model::TrainingSample> test,
                       const model::ItemSideInfo& items, std::span<const data::ItemLabel> item_labels,
                       GroupBy group_by);

nlohmann::json to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const nlohmann::json& j);

// --- aggregation and reporting -------------------------------------------------

struct SliceSummary {
  double auc_mean = 0.0;
  double auc_std = 0.0;
  double gauc_mean = 0.0;
  double gauc_std = 0.0;
  std::size_t n_samples = 0;
};

/// One table row: a variant's metrics averaged over seeds.
struct VariantSummary {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> config_digests;
  std::map<std::string, SliceSummary> slices;
};

/// Mean and sample standard deviation across runs of one variant.
VariantSummary summarize(const std::string& name, std::span<const MetricsReport> runs);

struct Report {
  std::vector<VariantSummary> rows;
  std::string baseline;
  nlohmann::json meta;
};

/// Plain-text table: rows = variants, columns = slice x {AUC, GAUC}, then deltas vs the baseline.
std::string report_text(const Report& report);
nlohmann::json report_json(const Report& report);
Report report_from_json(const nlohmann::json& j);

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Cold-slice ordering expected of the ablation.
std::vector<Check> directional_checks(const Report& report, double min_margin = 0.005);

// --- ablation ----------------------------------------------------------------

struct AblationSetup {
  std::span<const model::TrainingSample> train;
  std::span<const model::TrainingSample> test;
  const model::ItemSideInfo* items = nullptr;
  const quant::NeighborTable* neighbors = nullptr;
  std::span<const data::ItemLabel> item_labels;
  model::ModelDims dims;
  model::TrainConfig base;
  GroupBy group_by = GroupBy::kUser;
  double grad_check_tolerance = 1e-4;
};

/// The run-level config each ablation cell trains with; variants differ only in "variant".
nlohmann::json run_config(const model::TrainConfig& base, model::Variant v, std::uint64_t seed);

using ProgressFn = std::function<void(const MetricsReport&)>;

/// Grad-checks every variant, then trains each (variant, seed) cell on the shared data.
Report run_ablation(const AblationSetup& setup, std::span<const model::Variant> variants,
                    std::span<const std::uint64_t> seeds, const std::string& baseline,
                    const ProgressFn& progress = {});

}  // namespace smile::eval
