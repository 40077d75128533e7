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


// Command-line front end: gen, quantize, train, eval, ablate, gradcheck.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "smile/pipeline.hpp"

namespace {

using smile::pipeline::RunConfig;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string variant;
  bool all_variants = false;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "JSON run configuration (defaults apply to missing keys)");
  cmd->add_option("--seed", o.seed, "Overrides the configured seed");
  cmd->add_option("--out", o.out, "Work directory holding stage artifacts")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SMILE workbench: synthetic data, semantic IDs, CTR training and ablation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(smile::kToolVersion));
  Options o;

  auto* gen = app.add_subcommand("gen", "Generate the synthetic catalog and interaction log");
  auto* quantize = app.add_subcommand("quantize", "Train RQ/OPQ encoders, assign semantic IDs, build neighbors");
  auto* train = app.add_subcommand("train", "Train one model variant and write its checkpoint");
  auto* evaluate = app.add_subcommand("eval", "Evaluate a trained checkpoint on the test split");
  auto* ablate = app.add_subcommand("ablate", "Train and compare all variants over the configured seeds");
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the full objective");
  for (auto* cmd : {gen, quantize, train, evaluate, ablate, gradcheck}) add_common(cmd, o);
  for (auto* cmd : {train, evaluate, gradcheck}) {
    cmd->add_option("--variant", o.variant, "only_sid, iid_sid, iid_rq, iid_opq or smile");
  }
  gradcheck->add_flag("--all-variants", o.all_variants, "Check every ablation variant");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? smile::pipeline::kOk : smile::pipeline::kUsageError;
  }

  RunConfig cfg;
  try {
    cfg = o.config.empty() ? smile::pipeline::parse_config(nlohmann::json::object())
                           : smile::pipeline::load_config(o.config);
    if (o.seed) smile::pipeline::apply_seed(cfg, *o.seed);
    if (!o.variant.empty()) cfg.variant = smile::model::parse_variant(o.variant);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return smile::pipeline::kUsageError;
  }

  const smile::pipeline::Paths paths{o.out};
  try {
    if (gen->parsed()) return smile::pipeline::cmd_gen(cfg, paths, std::cout);
    if (quantize->parsed()) return smile::pipeline::cmd_quantize(cfg, paths, std::cout);
    if (train->parsed()) return smile::pipeline::cmd_train(cfg, paths, std::cout);
    if (evaluate->parsed()) return smile::pipeline::cmd_eval(cfg, paths, std::cout);
    if (ablate->parsed()) return smile::pipeline::cmd_ablate(cfg, paths, std::cout);
    return smile::pipeline::cmd_gradcheck(cfg, paths, std::cout, o.all_variants);
  } catch (const smile::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return smile::pipeline::kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return smile::pipeline::kArtifactError;
  }
}
