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


#include "smile/pipeline.hpp"

#include <fstream>
#include <iostream>
#include <set>
#include <type_traits>

#include "smile/quantizer.hpp"

namespace smile::pipeline {

namespace {

using nlohmann::json;

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw InvalidArgument("config " + where() + ": expected an object");
  }

  template <typename T>
  void get(const std::string& key, T& dst) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const json& v = *it;
    bool ok = false;
    if constexpr (std::is_same_v<T, bool>) {
      ok = v.is_boolean();
    } else if constexpr (std::is_unsigned_v<T>) {
      ok = v.is_number_integer() && v.get<std::int64_t>() >= 0;
    } else if constexpr (std::is_floating_point_v<T>) {
      ok = v.is_number();
    } else if constexpr (std::is_same_v<T, std::string>) {
      ok = v.is_string();
    } else {
      ok = true;
    }
    if (!ok) throw InvalidArgument("config key '" + path_ + key + "' has the wrong type");
    try {
      dst = v.get<T>();
    } catch (const json::exception&) {
      throw InvalidArgument("config key '" + path_ + key + "' has the wrong type");
    }
  }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_ + key + "."; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw InvalidArgument("unknown config key '" + path_ + k + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "root" : path_.substr(0, path_.size() - 1); }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string digest_of(const json& j) { return fnv1a_hex(j.dump()); }

json read_json(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ArtifactError("missing artifact " + path.string());
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw ArtifactError("unreadable artifact " + path.string() + ": " + e.what());
  }
}

json read_manifest(const std::filesystem::path& stem) {
  auto man = stem;
  man += ".manifest.json";
  return read_json(man);
}

void check_provenance(const json& prov, const std::string& stage, const std::string& expected_digest,
                      const std::string& what) {
  if (!prov.is_object() || prov.value("stage", "") != stage) {
    throw ArtifactError(what + ": not produced by the " + stage + " stage");
  }
  if (prov.value("tool_version", "") != kToolVersion) {
    throw ArtifactError(what + ": written by tool version " + prov.value("tool_version", "?") + ", expected " +
                        std::string(kToolVersion));
  }
  if (prov.value("config_digest", "") != expected_digest) {
    throw ArtifactError(what + ": built from a different configuration (digest " + prov.value("config_digest", "?") +
                        ", expected " + expected_digest + "); rerun the " + stage + " stage");
  }
}

void write_json(const std::filesystem::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

double scale_factor(const RunConfig& c) {
  return c.scale_factor ? *c.scale_factor : data::default_scale_factor(c.log.n_events);
}

std::uint64_t catalog_seed(const RunConfig& c) { return c.seed; }
std::uint64_t log_seed(const RunConfig& c) { return c.seed + 1; }
std::uint64_t quant_seed(const RunConfig& c) { return c.seed + 10; }

json data_json(const RunConfig& c) {
  json j = {{"catalog", data::to_json(c.catalog)}, {"log", data::to_json(c.log)}};
  j["catalog"].erase("seed");
  j["log"].erase("seed");
  j["scale_factor"] = c.scale_factor ? json(*c.scale_factor) : json(nullptr);
  return j;
}

model::TrainConfig train_config(const RunConfig& c, model::Variant v, std::uint64_t seed) {
  model::TrainConfig t;
  t.hp = c.hyper;
  t.variant = v;
  t.epochs = c.epochs;
  t.seed = seed;
  t.adam = c.adam;
  return t;
}

}  // namespace

// --- configuration -----------------------------------------------------------

RunConfig parse_config(const json& j) {
  RunConfig c;
  Reader root(j, "");
  root.get("seed", c.seed);

  if (const json* d = root.sub("data")) {
    Reader r(*d, "data.");
    auto& cat = c.catalog;
    auto& log = c.log;
    r.get("n_items", cat.n_items);
    r.get("d_true", cat.d_true);
    r.get("d", cat.d);
    r.get("noise_sigma", cat.noise_sigma);
    r.get("n_categories", cat.n_categories);
    r.get("category_spread", cat.category_spread);
    r.get("late_fraction", cat.late_fraction);
    r.get("bias_sigma", cat.bias_sigma);
    r.get("d_fine", cat.d_fine);
    r.get("fine_scale", cat.fine_scale);
    r.get("n_users", log.n_users);
    r.get("n_queries", log.n_queries);
    r.get("n_events", log.n_events);
    r.get("n_days", log.n_days);
    r.get("test_days", log.test_days);
    r.get("pareto_share", log.pareto_share);
    r.get("late_window", log.late_window);
    r.get("counter_window_days", log.counter_window_days);
    r.get("min_cold_test_share", log.min_cold_test_share);
    if (const json* sf = r.sub("scale_factor"); sf && !sf->is_null()) {
      if (!sf->is_number()) throw InvalidArgument("config key 'data.scale_factor' has the wrong type");
      c.scale_factor = sf->get<double>();
    }
    if (const json* cm = r.sub("click")) {
      Reader rc(*cm, "data.click.");
      auto& m = log.click;
      rc.get("base_ctr", m.base_ctr);
      rc.get("w_user", m.w_user);
      rc.get("w_query", m.w_query);
      rc.get("w_bias", m.w_bias);
      rc.get("w_fine", m.w_fine);
      rc.get("w_position", m.w_position);
      rc.get("w_device", m.w_device);
      rc.get("order_rate", m.order_rate);
      rc.finish();
    }
    r.finish();
  }

  if (const json* q = root.sub("quantizer")) {
    Reader r(*q, "quantizer.");
    r.get("k", c.quant.k);
    r.get("opq_k", c.quant.opq_k);
    r.get("opq_iters", c.quant.opq_iters);
    r.get("kmeans_iters", c.quant.kmeans_iters);
    r.get("neighbors", c.quant.neighbors);
    r.finish();
  }

  if (const json* m = root.sub("model")) {
    Reader r(*m, "model.");
    std::string variant(model::to_string(c.variant));
    r.get("variant", variant);
    c.variant = model::parse_variant(variant);
    r.get("epochs", c.epochs);
    if (const json* h = r.sub("hyper")) {
      Reader rh(*h, "model.hyper.");
      auto& hp = c.hyper;
      rh.get("alpha1", hp.alpha1);
      rh.get("alpha2", hp.alpha2);
      rh.get("tau", hp.tau);
      rh.get("lambda", hp.lambda);
      rh.get("lr", hp.lr);
      rh.get("batch_size", hp.batch_size);
      rh.get("kl_softmax_temp", hp.kl_softmax_temp);
      rh.get("extra_negatives", hp.extra_negatives);
      rh.get("history_len", hp.history_len);
      rh.get("init_std", hp.init_std);
      rh.get("detach_gate_in_transfer", hp.detach_gate_in_transfer);
      rh.finish();
    }
    if (const json* a = r.sub("adam")) {
      Reader ra(*a, "model.adam.");
      ra.get("beta1", c.adam.beta1);
      ra.get("beta2", c.adam.beta2);
      ra.get("eps", c.adam.eps);
      ra.finish();
    }
    r.finish();
  }

  if (const json* e = root.sub("eval")) {
    Reader r(*e, "eval.");
    std::string group = eval::to_string(c.eval.gauc_group);
    r.get("gauc_group", group);
    c.eval.gauc_group = eval::parse_group_by(group);
    r.get("seeds", c.eval.seeds);
    std::vector<std::string> variants;
    for (auto v : c.eval.variants) variants.emplace_back(model::to_string(v));
    r.get("variants", variants);
    c.eval.variants.clear();
    for (const auto& v : variants) c.eval.variants.push_back(model::parse_variant(v));
    r.get("baseline", c.eval.baseline);
    r.get("check_directional", c.eval.check_directional);
    r.get("min_margin", c.eval.min_margin);
    r.finish();
  }

  if (const json* g = root.sub("gradcheck")) {
    Reader r(*g, "gradcheck.");
    r.get("batch_size", c.gradcheck.batch_size);
    r.get("tolerance", c.gradcheck.tolerance);
    r.finish();
  }
  root.finish();

  if (c.epochs == 0) throw InvalidArgument("config: model.epochs must be positive");
  if (c.eval.seeds.empty()) throw InvalidArgument("config: eval.seeds must not be empty");
  if (c.quant.k < 2 || c.quant.opq_k < 2) throw InvalidArgument("config: codebook sizes must be at least 2");
  if (c.gradcheck.batch_size < 2) throw InvalidArgument("config: gradcheck.batch_size must be at least 2");
  apply_seed(c, c.seed);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw InvalidArgument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.catalog.seed = catalog_seed(c);
  c.log.seed = log_seed(c);
}

json to_json(const RunConfig& c) {
  json data = data_json(c);
  json d = data["catalog"];
  d.update(data["log"]);
  d["scale_factor"] = data["scale_factor"];
  std::vector<std::string> variants;
  for (auto v : c.eval.variants) variants.emplace_back(model::to_string(v));
  return {{"seed", c.seed},
          {"data", d},
          {"quantizer",
           {{"k", c.quant.k},
            {"opq_k", c.quant.opq_k},
            {"opq_iters", c.quant.opq_iters},
            {"kmeans_iters", c.quant.kmeans_iters},
            {"neighbors", c.quant.neighbors}}},
          {"model",
           {{"variant", std::string(model::to_string(c.variant))},
            {"epochs", c.epochs},
            {"hyper", model::to_json(c.hyper)},
            {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}}},
          {"eval",
           {{"gauc_group", eval::to_string(c.eval.gauc_group)},
            {"seeds", c.eval.seeds},
            {"variants", variants},
            {"baseline", c.eval.baseline},
            {"check_directional", c.eval.check_directional},
            {"min_margin", c.eval.min_margin}}},
          {"gradcheck", {{"batch_size", c.gradcheck.batch_size}, {"tolerance", c.gradcheck.tolerance}}}};
}

std::string data_digest(const RunConfig& c) { return digest_of({{"seed", c.seed}, {"data", data_json(c)}}); }

std::string quant_digest(const RunConfig& c) {
  return digest_of({{"data", data_digest(c)}, {"quantizer", to_json(c)["quantizer"]}});
}

std::string train_digest(const RunConfig& c, model::Variant v) {
  return digest_of({{"quantizer", quant_digest(c)}, {"run", eval::run_config(train_config(c, v, c.seed), v, c.seed)}});
}

json provenance(const RunConfig& c, const std::string& stage, const std::string& digest) {
  return {{"stage", stage}, {"config_digest", digest}, {"seed", c.seed}, {"tool_version", kToolVersion}};
}

// --- workspace ---------------------------------------------------------------

Workspace load_workspace(const RunConfig& c, const Paths& paths) {
  Workspace w;
  const std::string dd = data_digest(c);
  check_provenance(read_manifest(paths.catalog()).value("provenance", json()), "gen", dd, "catalog");
  w.catalog = data::load_catalog(paths.catalog());
  json meta;
  if (!std::filesystem::exists(paths.log())) throw ArtifactError("missing artifact " + paths.log().string());
  w.events = data::read_log(paths.log(), &meta);
  check_provenance(meta.value("provenance", json()), "gen", dd, "log");

  const std::string qd = quant_digest(c);
  check_provenance(read_manifest(paths.quantizer()).value("provenance", json()), "quantize", qd, "quantizer");
  const json sid_doc = read_json(paths.semantic_ids());
  check_provenance(sid_doc.value("provenance", json()), "quantize", qd, "semantic ids");
  const json nb_doc = read_json(paths.neighbors());
  check_provenance(nb_doc.value("provenance", json()), "quantize", qd, "neighbor table");

  const auto sids = quant::semantic_ids_from_json(sid_doc.at("semantic_ids"));
  w.neighbors = quant::NeighborTable::from_json(nb_doc.at("neighbors"));
  w.labels = data::label_cold_warm(w.catalog, scale_factor(c));

  const std::uint32_t train_days = c.log.n_days - c.log.test_days;
  w.items = model::make_item_side_info(sids, w.catalog);
  // The gate sees each request's counters as of the start of its day.
  model::add_daily_counters(w.items, w.events, c.log.n_days, c.log.counter_window_days);
  const auto samples = model::make_samples(w.events, c.hyper.history_len);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto day = w.events[i].day;
    if (day < train_days) {
      w.train.push_back(samples[i]);
    } else if (day < train_days + c.log.test_days) {
      w.test.push_back(samples[i]);
    }
  }
  if (w.train.empty() || w.test.empty()) throw ArtifactError("log yields an empty train or test split");

  w.dims.n_items = w.catalog.size();
  w.dims.n_users = c.log.n_users;
  w.dims.n_queries = c.log.n_queries;
  w.dims.codebook_size = std::max(c.quant.k, c.quant.opq_k);
  w.dims.d = c.catalog.d;
  return w;
}

// --- commands ----------------------------------------------------------------

int cmd_gen(const RunConfig& c, const Paths& paths, std::ostream& out) {
  std::filesystem::create_directories(paths.dir);
  data::Catalog cat = data::generate_catalog(c.catalog);
  const data::GeneratedLog log = data::generate_log(cat, c.log);
  const json prov = provenance(c, "gen", data_digest(c));
  data::save_catalog(paths.catalog(), cat, prov);

  const auto labels = data::label_cold_warm(cat, scale_factor(c));
  std::size_t n_warm = 0, n_cold = 0;
  for (auto l : labels) {
    n_warm += l == data::ItemLabel::kWarm;
    n_cold += l == data::ItemLabel::kCold;
  }
  const json stats = {{"zipf_exponent", log.zipf_exponent},     {"logit_offset", log.logit_offset},
                      {"top20_share", log.top20_share},         {"ctr", log.ctr},
                      {"new_item_test_share", log.new_item_test_share}, {"warm_items", n_warm},
                      {"cold_items", n_cold},                   {"scale_factor", scale_factor(c)}};
  data::write_log(paths.log(), log.events, {{"provenance", prov}, {"stats", stats}});
  out << "gen: " << log.events.size() << " events, " << cat.size() << " items, top-20% share " << log.top20_share
      << ", ctr " << log.ctr << ", test share on new items " << log.new_item_test_share << "\n";
  return kOk;
}

int cmd_quantize(const RunConfig& c, const Paths& paths, std::ostream& out) {
  check_provenance(read_manifest(paths.catalog()).value("provenance", json()), "gen", data_digest(c), "catalog");
  const data::Catalog cat = data::load_catalog(paths.catalog());
  const auto& emb = cat.content;

  quant::QuantizerBundle bundle;
  bundle.rq = quant::train_rq(emb, c.quant.k, quant_seed(c), c.quant.kmeans_iters);
  Matrix residuals(emb.rows, emb.cols);
  for (std::size_t i = 0; i < emb.rows; ++i) {
    const auto r = quant::encode_rq(bundle.rq, emb.row(i)).residual;
    std::ranges::copy(r, residuals.row(i).begin());
  }
  quant::OPQOptions oo;
  oo.k = c.quant.opq_k;
  oo.iters = c.quant.opq_iters;
  oo.kmeans_iters = c.quant.kmeans_iters;
  oo.seed = quant_seed(c) + 100;
  bundle.opq = quant::train_opq(residuals, oo);

  std::vector<quant::ItemEmbedding> items;
  items.reserve(emb.rows);
  for (std::size_t i = 0; i < emb.rows; ++i) {
    items.push_back({static_cast<quant::ItemId>(i), Vec(emb.row(i).begin(), emb.row(i).end())});
  }
  const auto sids = quant::assign_semantic_ids(items, bundle.rq, bundle.opq);
  const auto neighbors = quant::opq_code_similarity_topk(bundle.opq, c.quant.neighbors);

  const json prov = provenance(c, "quantize", quant_digest(c));
  save_quantizer(paths.quantizer(), bundle, prov);
  write_json(paths.semantic_ids(), {{"provenance", prov}, {"semantic_ids", quant::semantic_ids_to_json(sids)}});
  write_json(paths.neighbors(), {{"provenance", prov}, {"neighbors", neighbors.to_json()}});

  double mse[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < emb.rows; ++i) {
    const auto& sid = sids.at(static_cast<quant::ItemId>(i));
    const auto codes = sid.rq();
    for (std::size_t l = 1; l <= 3; ++l) {
      mse[l - 1] += squared_distance(emb.row(i), quant::reconstruct_rq(std::span(codes).first(l), bundle.rq));
    }
    mse[3] += squared_distance(emb.row(i), quant::reconstruct(sid, bundle.rq, bundle.opq));
  }
  out << "quantize: " << sids.size() << " semantic ids; reconstruction MSE rq1 " << mse[0] / emb.rows << ", rq2 "
      << mse[1] / emb.rows << ", rq3 " << mse[2] / emb.rows << ", rq3+opq " << mse[3] / emb.rows
      << "; excluded code pairs " << neighbors.excluded().size() << "\n";
  return kOk;
}

namespace {

json epoch_eval(const model::SmileModel& m, const Workspace& w, const RunConfig& c) {
  const auto r = eval::evaluate(m, w.test, w.items, w.labels, c.eval.gauc_group);
  return eval::to_json(r)["slices"];
}

}  // namespace

int cmd_train(const RunConfig& c, const Paths& paths, std::ostream& out) {
  const Workspace w = load_workspace(c, paths);
  const auto cfg = train_config(c, c.variant, c.seed);
  model::SmileModel m(w.dims, c.hyper, c.variant, c.seed);
  const auto result = model::train(m, w.train, w.items, w.neighbors, cfg,
                                   [&](const model::SmileModel& mm, std::size_t epoch) {
                                     json e = epoch_eval(mm, w, c);
                                     out << "epoch " << epoch << ": test auc all " << e["all"]["auc"] << ", cold "
                                         << e["cold"]["auc"] << "\n";
                                     return e;
                                   });
  const std::string digest = train_digest(c, c.variant);
  const json prov = provenance(c, "train", digest);
  m.params().save(paths.checkpoint(c.variant), prov);
  json curve = json::array();
  for (const auto& r : result.curve) curve.push_back(model::to_json(r));
  write_json(paths.curve(c.variant), {{"provenance", prov},
                                      {"variant", std::string(model::to_string(c.variant))},
                                      {"positive_free_batches", result.positive_free_batches},
                                      {"curve", curve}});
  out << "train: " << model::to_string(c.variant) << " checkpoint " << paths.checkpoint(c.variant).string()
      << ".manifest.json\n";
  return kOk;
}

int cmd_eval(const RunConfig& c, const Paths& paths, std::ostream& out) {
  const Workspace w = load_workspace(c, paths);
  const std::string digest = train_digest(c, c.variant);
  check_provenance(read_manifest(paths.checkpoint(c.variant)).value("provenance", json()), "train", digest,
                   "checkpoint");
  model::SmileModel m(w.dims, c.hyper, c.variant, c.seed);
  try {
    m.params().load(paths.checkpoint(c.variant));
  } catch (const InvalidArgument& e) {
    throw ArtifactError(std::string("checkpoint does not match the model shape: ") + e.what());
  }
  auto report = eval::evaluate(m, w.test, w.items, w.labels, c.eval.gauc_group);
  report.seed = c.seed;
  report.config_digest = digest;
  write_json(paths.metrics(c.variant),
             {{"provenance", provenance(c, "eval", digest)}, {"metrics", eval::to_json(report)}});
  const std::vector<eval::MetricsReport> one = {report};
  eval::Report table;
  table.rows.push_back(eval::summarize(report.variant, one));
  table.baseline = report.variant;
  out << eval::report_text(table);
  return kOk;
}

int cmd_ablate(const RunConfig& c, const Paths& paths, std::ostream& out) {
  const Workspace w = load_workspace(c, paths);
  eval::AblationSetup setup;
  setup.train = w.train;
  setup.test = w.test;
  setup.items = &w.items;
  setup.neighbors = &w.neighbors;
  setup.item_labels = w.labels;
  setup.dims = w.dims;
  setup.base = train_config(c, c.variant, c.seed);
  setup.group_by = c.eval.gauc_group;
  setup.grad_check_tolerance = c.gradcheck.tolerance;

  eval::Report report = eval::run_ablation(setup, c.eval.variants, c.eval.seeds, c.eval.baseline,
                                           [&](const eval::MetricsReport& r) {
                                             out << "ablate: " << r.variant << " seed " << r.seed << " cold auc "
                                                 << r.slices.at("cold").auc << "\n";
                                           });
  std::size_t cold_test = 0;
  for (const auto& s : w.test) cold_test += w.labels[s.item] == data::ItemLabel::kCold;
  report.meta = {{"provenance", provenance(c, "ablate", quant_digest(c))},
                 {"train_samples", w.train.size()},
                 {"test_samples", w.test.size()},
                 {"cold_test_samples", cold_test}};

  std::string text = eval::report_text(report);
  bool all_passed = true;
  if (c.eval.check_directional) {
    std::ostringstream checks;
    checks << "\n";
    json jc = json::array();
    for (const auto& chk : eval::directional_checks(report, c.eval.min_margin)) {
      checks << (chk.passed ? "PASS " : "FAIL ") << chk.name << " (" << chk.detail << ")\n";
      jc.push_back({{"name", chk.name}, {"passed", chk.passed}, {"detail", chk.detail}});
      all_passed = all_passed && chk.passed;
    }
    text += checks.str();
    report.meta["checks"] = jc;
  }
  write_json(paths.report_json(), eval::report_json(report));
  write_file_atomic(paths.report_text(), text);
  out << text;
  return all_passed ? kOk : kAcceptanceFailure;
}

MiniInstance make_mini_instance(const RunConfig& c) {
  data::CatalogConfig cc = c.catalog;
  cc.n_items = 120;
  data::LogConfig lc = c.log;
  lc.n_users = 30;
  lc.n_queries = 20;
  lc.n_events = 3000;
  lc.min_cold_test_share = 0.0;
  data::Catalog cat = data::generate_catalog(cc);
  const auto log = data::generate_log(cat, lc);
  const std::size_t k = 6;
  const auto rq = quant::train_rq(cat.content, k, quant_seed(c));
  Matrix residuals(cat.size(), cc.d);
  std::vector<quant::ItemEmbedding> items;
  for (std::size_t i = 0; i < cat.size(); ++i) {
    std::ranges::copy(quant::encode_rq(rq, cat.content.row(i)).residual, residuals.row(i).begin());
    items.push_back({static_cast<quant::ItemId>(i), Vec(cat.content.row(i).begin(), cat.content.row(i).end())});
  }
  quant::OPQOptions oo;
  oo.k = k;
  oo.seed = quant_seed(c) + 100;
  const auto opq = quant::train_opq(residuals, oo);
  const auto sids = quant::assign_semantic_ids(items, rq, opq);

  MiniInstance mini;
  mini.neighbors = quant::opq_code_similarity_topk(opq, std::min<std::size_t>(c.quant.neighbors, k * k - 1));
  mini.items = model::make_item_side_info(sids, cat);
  model::add_daily_counters(mini.items, log.events, lc.n_days, lc.counter_window_days);
  const auto samples = model::make_samples(log.events, c.hyper.history_len);
  const std::size_t b = c.gradcheck.batch_size;
  mini.samples.assign(samples.end() - static_cast<std::ptrdiff_t>(b), samples.end());
  for (std::size_t i = 0; i < b * c.hyper.extra_negatives; ++i) {
    mini.extra_negatives.push_back(samples[(i * 37) % samples.size()].item);
  }
  mini.dims.n_items = cat.size();
  mini.dims.n_users = lc.n_users;
  mini.dims.n_queries = lc.n_queries;
  mini.dims.codebook_size = k;
  mini.dims.d = cc.d;
  return mini;
}

double gradcheck_max_error(const RunConfig& c, std::span<const model::Variant> variants, std::ostream* out) {
  // A miniature instance keeps the finite-difference sweep fast.
  const MiniInstance mini = make_mini_instance(c);
  double worst = 0.0;
  for (auto v : variants) {
    model::SmileModel m(mini.dims, c.hyper, v, c.seed);
    m.perturb(kCheckJitter, c.seed);
    const auto r = m.grad_check(mini.batch(), mini.items, mini.neighbors);
    if (out) {
      *out << "gradcheck: " << model::to_string(v) << " max relative error " << r.max_rel_error << " over "
           << r.coords_checked << " coordinates, " << r.retried << " re-measured (worst " << r.worst_tensor << "["
           << r.worst_index << "])\n";
    }
    worst = std::max(worst, r.max_rel_error);
  }
  return worst;
}

int cmd_gradcheck(const RunConfig& c, const Paths& paths, std::ostream& out, bool all_variants) {
  std::vector<model::Variant> variants;
  if (all_variants) {
    variants.assign(model::kAllVariants.begin(), model::kAllVariants.end());
  } else {
    variants.push_back(c.variant);
  }
  const double worst = gradcheck_max_error(c, variants, &out);
  out << worst << "\n";
  if (!paths.dir.empty()) {
    std::filesystem::create_directories(paths.dir);
    std::vector<std::string> names;
    for (auto v : variants) names.emplace_back(model::to_string(v));
    write_json(paths.dir / "gradcheck.json", {{"provenance", provenance(c, "gradcheck", digest_of(to_json(c)))},
                                              {"variants", names},
                                              {"max_rel_error", worst},
                                              {"tolerance", c.gradcheck.tolerance}});
  }
  return worst < c.gradcheck.tolerance ? kOk : kAcceptanceFailure;
}

}  // namespace smile::pipeline
