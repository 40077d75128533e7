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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "smile/datagen.hpp"
#include "smile/eval.hpp"
#include "smile/model.hpp"

/// File-staged pipeline behind the command-line tool. Each stage reads the
/// artifacts of earlier stages from the work directory and writes its own.
namespace smile::pipeline {

enum ExitCode : int { kOk = 0, kUsageError = 1, kArtifactError = 2, kAcceptanceFailure = 3 };

struct QuantConfig {
  std::size_t k = 64;
  std::size_t opq_k = 64;
  std::size_t opq_iters = 20;
  std::size_t kmeans_iters = 50;
  std::size_t neighbors = 10;
};

struct EvalConfig {
  eval::GroupBy gauc_group = eval::GroupBy::kUser;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<model::Variant> variants = {model::kAllVariants.begin(), model::kAllVariants.end()};
  std::string baseline = "only_sid";
  bool check_directional = true;
  double min_margin = 0.005;
};

struct GradCheckConfig {
  std::size_t batch_size = 4;
  double tolerance = 1e-4;
};

struct RunConfig {
  std::uint64_t seed = 1;
  data::CatalogConfig catalog;
  data::LogConfig log;
  std::optional<double> scale_factor;  // default_scale_factor(n_events) when unset
  QuantConfig quant;
  model::Variant variant = model::Variant::kSmile;
  std::size_t epochs = 2;
  model::HyperParams hyper;
  diff::AdamConfig adam;
  EvalConfig eval;
  GradCheckConfig gradcheck;
};

/// Parses a (possibly partial) config. Unknown keys and ill-typed values
/// throw InvalidArgument naming the offending key.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
/// Fully populated normal form; parse_config(to_json(c)) == c.
nlohmann::json to_json(const RunConfig& c);
void apply_seed(RunConfig& c, std::uint64_t seed);

/// Content hashes of the config slices each stage depends on, chained so a
/// change upstream changes every downstream digest.
std::string data_digest(const RunConfig& c);
std::string quant_digest(const RunConfig& c);
std::string train_digest(const RunConfig& c, model::Variant v);

struct Paths {
  std::filesystem::path dir;
  std::filesystem::path catalog() const { return dir / "catalog"; }
  std::filesystem::path log() const { return dir / "log.ndjson"; }
  std::filesystem::path quantizer() const { return dir / "quantizer"; }
  std::filesystem::path semantic_ids() const { return dir / "semantic_ids.json"; }
  std::filesystem::path neighbors() const { return dir / "neighbors.json"; }
  std::filesystem::path checkpoint(model::Variant v) const { return dir / ("model-" + std::string(model::to_string(v))); }
  std::filesystem::path curve(model::Variant v) const {
    return dir / ("curve-" + std::string(model::to_string(v)) + ".json");
  }
  std::filesystem::path metrics(model::Variant v) const {
    return dir / ("metrics-" + std::string(model::to_string(v)) + ".json");
  }
  std::filesystem::path report_json() const { return dir / "ablation.json"; }
  std::filesystem::path report_text() const { return dir / "ablation.txt"; }
};

/// Everything later stages need, reloaded from disk with provenance checks.
struct Workspace {
  data::Catalog catalog;
  std::vector<data::Event> events;
  std::vector<data::ItemLabel> labels;
  model::ItemSideInfo items;
  quant::NeighborTable neighbors;
  std::vector<model::TrainingSample> train;
  std::vector<model::TrainingSample> test;
  model::ModelDims dims;
};
Workspace load_workspace(const RunConfig& c, const Paths& paths);

/// Each command writes its artifacts atomically and returns an exit code;
/// human-readable progress goes to `out`.
int cmd_gen(const RunConfig& c, const Paths& paths, std::ostream& out);
int cmd_quantize(const RunConfig& c, const Paths& paths, std::ostream& out);
int cmd_train(const RunConfig& c, const Paths& paths, std::ostream& out);
int cmd_eval(const RunConfig& c, const Paths& paths, std::ostream& out);
int cmd_ablate(const RunConfig& c, const Paths& paths, std::ostream& out);
/// Self-contained: checks the selected variants on a miniature in-memory instance.
int cmd_gradcheck(const RunConfig& c, const Paths& paths, std::ostream& out, bool all_variants);

/// Small in-memory world (120 items, K = 6) with one batch for gradient checks.
struct MiniInstance {
  model::ItemSideInfo items;
  quant::NeighborTable neighbors;
  std::vector<model::TrainingSample> samples;
  std::vector<std::uint32_t> extra_negatives;
  model::ModelDims dims;

  model::Batch batch() const { return {samples, extra_negatives}; }
};
MiniInstance make_mini_instance(const RunConfig& c);

/// Noise added to a fresh model before it is gradient-checked (see SmileModel::perturb).
inline constexpr double kCheckJitter = 0.1;

/// Largest relative error over the variants on the miniature instance.
double gradcheck_max_error(const RunConfig& c, std::span<const model::Variant> variants, std::ostream* out);

nlohmann::json provenance(const RunConfig& c, const std::string& stage, const std::string& digest);

}  // namespace smile::pipeline
