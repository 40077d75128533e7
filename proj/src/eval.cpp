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


#include "smile/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

namespace smile::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::json num(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double num_from(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

}  // namespace

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (auto l : labels) {
    if (l > 1) throw InvalidArgument("auc: labels must be 0 or 1");
    n_pos += l;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetric("auc: both classes are required");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum keeps midranks integral.
  std::uint64_t rank_sum_x2 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    std::size_t pos_in_run = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) pos_in_run += labels[order[j++]];
    rank_sum_x2 += pos_in_run * (i + 1 + j);  // midrank of ranks i+1..j is (i+1+j)/2
    i = j;
  }
  const double u_x2 = static_cast<double>(rank_sum_x2) - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u_x2 / 2.0 / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double gauc(std::span<const double> scores, std::span<const std::uint8_t> labels,
            std::span<const std::uint32_t> groups, const std::map<std::uint32_t, double>& weights) {
  if (scores.size() != labels.size() || groups.size() != labels.size()) {
    throw InvalidArgument("gauc: input lengths differ");
  }
  std::map<std::uint32_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) members[groups[i]].push_back(i);
  double num_sum = 0.0, den = 0.0;
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (const auto& [g, idx] : members) {
    s.clear();
    l.clear();
    std::size_t pos = 0;
    for (auto i : idx) {
      s.push_back(scores[i]);
      l.push_back(labels[i]);
      pos += labels[i];
    }
    if (pos == 0 || pos == idx.size()) continue;
    double w = static_cast<double>(idx.size());
    if (!weights.empty()) {
      auto it = weights.find(g);
      if (it == weights.end()) throw InvalidArgument("gauc: missing weight for group " + std::to_string(g));
      w = it->second;
    }
    num_sum += w * auc(s, l);
    den += w;
  }
  if (den <= 0.0) throw UndefinedMetric("gauc: no group contains both classes");
  return num_sum / den;
}

GroupBy parse_group_by(const std::string& name) {
  if (name == "user") return GroupBy::kUser;
  if (name == "query") return GroupBy::kQuery;
  throw InvalidArgument("unknown gauc grouping '" + name + "' (expected user or query)");
}

std::string to_string(GroupBy g) { return g == GroupBy::kUser ? "user" : "query"; }

std::map<std::string, SliceMetrics> slice_metrics(std::span<const double> scores,
                                                  std::span<const model::TrainingSample> samples,
                                                  std::span<const data::ItemLabel> item_labels, GroupBy group_by) {
  if (scores.size() != samples.size()) throw InvalidArgument("slice_metrics: one score per sample is required");
  std::map<std::string, SliceMetrics> out;
  for (const auto& name : kSlices) {
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    std::vector<std::uint32_t> g;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& smp = samples[i];
      if (smp.item >= item_labels.size()) throw InvalidArgument("slice_metrics: item without a label");
      const auto label = item_labels[smp.item];
      if ((name == "warm" && label != data::ItemLabel::kWarm) || (name == "cold" && label != data::ItemLabel::kCold)) {
        continue;
      }
      s.push_back(scores[i]);
      l.push_back(smp.label);
      g.push_back(group_by == GroupBy::kUser ? smp.user : smp.query);
    }
    SliceMetrics m;
    m.n_samples = s.size();
    try {
      m.auc = auc(s, l);
    } catch (const UndefinedMetric&) {
      m.auc = kNaN;
    }
    try {
      m.gauc = gauc(s, l, g);
    } catch (const UndefinedMetric&) {
      m.gauc = kNaN;
    }
    out[name] = m;
  }
  return out;
}

MetricsReport evaluate(const model::SmileModel& m, std::span<const model::TrainingSample> test,
                       const model::ItemSideInfo& items, std::span<const data::ItemLabel> item_labels,
                       GroupBy group_by) {
  MetricsReport r;
  r.variant = std::string(model::to_string(m.variant()));
  const auto scores = m.predict(test, items);
  r.slices = slice_metrics(scores, test, item_labels, group_by);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json slices = nlohmann::json::object();
  for (const auto& [name, m] : r.slices) {
    slices[name] = {{"auc", num(m.auc)}, {"gauc", num(m.gauc)}, {"n_samples", m.n_samples}};
  }
  return {{"variant", r.variant}, {"seed", r.seed}, {"config_digest", r.config_digest}, {"slices", slices}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.variant = j.at("variant").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  for (const auto& [name, m] : j.at("slices").items()) {
    r.slices[name] = {num_from(m.at("auc")), num_from(m.at("gauc")), m.at("n_samples").get<std::size_t>()};
  }
  return r;
}

// --- aggregation and reporting -------------------------------------------------

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {kNaN, kNaN};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace

VariantSummary summarize(const std::string& name, std::span<const MetricsReport> runs) {
  if (runs.empty()) throw InvalidArgument("summarize: no runs for " + name);
  VariantSummary s;
  s.name = name;
  for (const auto& r : runs) {
    s.seeds.push_back(r.seed);
    s.config_digests.push_back(r.config_digest);
  }
  for (const auto& slice : kSlices) {
    std::vector<double> a, g;
    std::size_t n = 0;
    for (const auto& r : runs) {
      auto it = r.slices.find(slice);
      if (it == r.slices.end()) continue;
      a.push_back(it->second.auc);
      g.push_back(it->second.gauc);
      n = it->second.n_samples;
    }
    SliceSummary ss;
    std::tie(ss.auc_mean, ss.auc_std) = mean_std(a);
    std::tie(ss.gauc_mean, ss.gauc_std) = mean_std(g);
    ss.n_samples = n;
    s.slices[slice] = ss;
  }
  return s;
}

namespace {

const VariantSummary* find_row(const Report& report, const std::string& name) {
  for (const auto& r : report.rows) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string fmt(double v, int prec = 4, bool sign = false) {
  if (!std::isfinite(v)) return "n/a";
  std::ostringstream os;
  if (sign) os << std::showpos;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

std::string report_text(const Report& report) {
  if (report.rows.empty()) throw InvalidArgument("report: no rows");
  std::size_t name_w = 8;
  for (const auto& r : report.rows) name_w = std::max(name_w, r.name.size() + 2);
  std::ostringstream os;
  auto header = [&](const std::string& title) {
    os << std::left << std::setw(static_cast<int>(name_w)) << title;
    for (const auto& s : kSlices) {
      os << std::right << std::setw(18) << (s + " AUC") << std::setw(18) << (s + " GAUC");
    }
    os << '\n';
  };
  header("variant");
  for (const auto& r : report.rows) {
    os << std::left << std::setw(static_cast<int>(name_w)) << r.name << std::right;
    for (const auto& s : kSlices) {
      const auto& m = r.slices.at(s);
      os << std::setw(18) << (fmt(m.auc_mean) + " +- " + fmt(m.auc_std)) << std::setw(18)
         << (fmt(m.gauc_mean) + " +- " + fmt(m.gauc_std));
    }
    os << '\n';
  }
  if (const auto* base = find_row(report, report.baseline)) {
    os << '\n';
    header("vs " + report.baseline);
    for (const auto& r : report.rows) {
      os << std::left << std::setw(static_cast<int>(name_w)) << r.name << std::right;
      for (const auto& s : kSlices) {
        os << std::setw(18) << fmt(r.slices.at(s).auc_mean - base->slices.at(s).auc_mean, 4, true) << std::setw(18)
           << fmt(r.slices.at(s).gauc_mean - base->slices.at(s).gauc_mean, 4, true);
      }
      os << '\n';
    }
  }
  return os.str();
}

nlohmann::json report_json(const Report& report) {
  if (report.rows.empty()) throw InvalidArgument("report: no rows");
  const auto* base = find_row(report, report.baseline);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json slices = nlohmann::json::object();
    for (const auto& [name, m] : r.slices) {
      nlohmann::json sj = {{"auc_mean", num(m.auc_mean)},   {"auc_std", num(m.auc_std)},
                           {"gauc_mean", num(m.gauc_mean)}, {"gauc_std", num(m.gauc_std)},
                           {"n_samples", m.n_samples}};
      if (base) {
        const auto& b = base->slices.at(name);
        sj["delta_auc"] = num(m.auc_mean - b.auc_mean);
        sj["delta_gauc"] = num(m.gauc_mean - b.gauc_mean);
      }
      slices[name] = sj;
    }
    rows.push_back({{"variant", r.name}, {"seeds", r.seeds}, {"config_digests", r.config_digests}, {"slices", slices}});
  }
  return {{"format", "smile.report"}, {"baseline", report.baseline}, {"rows", rows}, {"meta", report.meta}};
}

Report report_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "smile.report") throw ArtifactError("not a report document");
  Report rep;
  rep.baseline = j.at("baseline").get<std::string>();
  rep.meta = j.value("meta", nlohmann::json::object());
  for (const auto& rj : j.at("rows")) {
    VariantSummary s;
    s.name = rj.at("variant").get<std::string>();
    s.seeds = rj.at("seeds").get<std::vector<std::uint64_t>>();
    s.config_digests = rj.at("config_digests").get<std::vector<std::string>>();
    for (const auto& [name, m] : rj.at("slices").items()) {
      s.slices[name] = {num_from(m.at("auc_mean")), num_from(m.at("auc_std")), num_from(m.at("gauc_mean")),
                        num_from(m.at("gauc_std")), m.at("n_samples").get<std::size_t>()};
    }
    rep.rows.push_back(std::move(s));
  }
  return rep;
}

std::vector<Check> directional_checks(const Report& report, double min_margin) {
  auto cold = [&](const char* name) {
    const auto* r = find_row(report, name);
    return r ? r->slices.at("cold").auc_mean : kNaN;
  };
  const double smile = cold("smile"), rq = cold("iid_rq"), sid = cold("iid_sid"), only = cold("only_sid"),
               opq = cold("iid_opq");
  auto gt = [](const std::string& name, double a, double b) {
    return Check{name, a > b, fmt(a, 5) + " vs " + fmt(b, 5)};
  };
  std::vector<Check> out = {gt("cold AUC smile > iid_rq", smile, rq), gt("cold AUC iid_rq > iid_sid", rq, sid),
                            gt("cold AUC iid_sid > only_sid", sid, only), gt("cold AUC smile > iid_opq", smile, opq)};
  out.push_back(Check{"cold AUC smile - only_sid >= " + fmt(min_margin, 3), smile - only >= min_margin,
                      "margin " + fmt(smile - only, 5, true)});
  return out;
}

// --- ablation ----------------------------------------------------------------

nlohmann::json run_config(const model::TrainConfig& base, model::Variant v, std::uint64_t seed) {
  return {{"variant", std::string(model::to_string(v))},
          {"seed", seed},
          {"epochs", base.epochs},
          {"hyper", model::to_json(base.hp)},
          {"adam", {{"beta1", base.adam.beta1}, {"beta2", base.adam.beta2}, {"eps", base.adam.eps}}}};
}

Report run_ablation(const AblationSetup& setup, std::span<const model::Variant> variants,
                    std::span<const std::uint64_t> seeds, const std::string& baseline, const ProgressFn& progress) {
  if (setup.items == nullptr || setup.neighbors == nullptr) throw InvalidArgument("run_ablation: missing side data");
  if (variants.empty() || seeds.empty()) throw InvalidArgument("run_ablation: need variants and seeds");

  // A tiny fixed batch exercises every branch of each variant's objective.
  const std::size_t n_check = std::min<std::size_t>(6, setup.train.size());
  model::Batch check_batch{setup.train.subspan(0, n_check), {}};
  check_batch.extra_negatives.resize(n_check * setup.base.hp.extra_negatives);
  for (std::size_t i = 0; i < check_batch.extra_negatives.size(); ++i) {
    check_batch.extra_negatives[i] = setup.train[(n_check + i) % setup.train.size()].item;
  }
  for (auto v : variants) {
    model::SmileModel probe(setup.dims, setup.base.hp, v, 1);
    const auto rep = probe.grad_check(check_batch, *setup.items, *setup.neighbors);
    if (!(rep.max_rel_error < setup.grad_check_tolerance)) {
      throw NumericFault("grad_check failed for variant " + std::string(model::to_string(v)) + ": max rel error " +
                         std::to_string(rep.max_rel_error) + " in " + rep.worst_tensor);
    }
  }

  Report report;
  report.baseline = baseline;
  for (auto v : variants) {
    std::vector<MetricsReport> runs;
    for (auto seed : seeds) {
      model::TrainConfig cfg = setup.base;
      cfg.variant = v;
      cfg.seed = seed;
      model::SmileModel m(setup.dims, cfg.hp, v, seed);
      model::train(m, setup.train, *setup.items, *setup.neighbors, cfg);
      MetricsReport r = evaluate(m, setup.test, *setup.items, setup.item_labels, setup.group_by);
      r.seed = seed;
      r.config_digest = fnv1a_hex(run_config(cfg, v, seed).dump());
      if (progress) progress(r);
      runs.push_back(std::move(r));
    }
    report.rows.push_back(summarize(std::string(model::to_string(v)), runs));
  }
  return report;
}

}  // namespace smile::eval
