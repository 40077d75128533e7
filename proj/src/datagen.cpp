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


#include "smile/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

namespace smile::data {
namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t sample_cdf(std::span<const double> cdf, std::mt19937_64& rng) {
  const double u = uniform01(rng) * cdf.back();
  auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
}

double expected_top_share(std::span<const double> rank, std::span<const std::uint8_t> late, double late_window,
                          double s) {
  const std::size_t n = rank.size();
  std::vector<double> w(n);
  double w_early = 0.0, w_all = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::pow(rank[i], -s);
    w_all += w[i];
    if (!late[i]) w_early += w[i];
  }
  std::vector<double> expected(n);
  for (std::size_t i = 0; i < n; ++i) {
    expected[i] = late_window * w[i] / w_all + (late[i] ? 0.0 : (1.0 - late_window) * w[i] / w_early);
  }
  std::ranges::sort(expected, std::greater<>());
  const auto top = static_cast<std::size_t>(std::ceil(0.2 * static_cast<double>(n)));
  const double total = std::accumulate(expected.begin(), expected.end(), 0.0);
  return std::accumulate(expected.begin(), expected.begin() + static_cast<std::ptrdiff_t>(top), 0.0) / total;
}

}  // namespace

Catalog generate_catalog(const CatalogConfig& config) {
  if (config.n_items == 0) throw InvalidArgument("generate_catalog: n_items must be >= 1");
  if (config.n_categories == 0 || config.d_true == 0 || config.d == 0) {
    throw InvalidArgument("generate_catalog: dimensions and category count must be positive");
  }
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Catalog cat;
  cat.config = config;
  const std::size_t n = config.n_items;

  Matrix centers(config.n_categories, config.d_true);
  for (double& v : centers.data) v = normal(rng);

  const std::size_t width = config.d_true + config.d_fine;
  cat.projection = Matrix(config.d, width);
  const double pscale = 1.0 / std::sqrt(static_cast<double>(config.d_true));
  const double fscale = config.d_fine ? config.fine_scale / std::sqrt(static_cast<double>(config.d_fine)) : 0.0;
  for (std::size_t r = 0; r < config.d; ++r) {
    for (std::size_t j = 0; j < width; ++j) cat.projection(r, j) = normal(rng) * (j < config.d_true ? pscale : fscale);
  }

  cat.latent = Matrix(n, width);
  cat.content = Matrix(n, config.d);
  cat.category.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::uint32_t>(rng() % config.n_categories);
    cat.category[i] = c;
    for (std::size_t j = 0; j < config.d_true; ++j) {
      cat.latent(i, j) = centers(c, j) + config.category_spread * normal(rng);
    }
    for (std::size_t j = config.d_true; j < width; ++j) cat.latent(i, j) = normal(rng);
    for (std::size_t r = 0; r < config.d; ++r) {
      const double noise = config.noise_sigma > 0.0 ? config.noise_sigma * normal(rng) : 0.0;
      cat.content(i, r) = dot(cat.projection.row(r), cat.latent.row(i)) + noise;
    }
  }

  cat.collab_bias.resize(n);
  for (double& b : cat.collab_bias) b = config.bias_sigma * normal(rng);

  cat.late_arrival.assign(n, 0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_late = static_cast<std::size_t>(std::round(config.late_fraction * static_cast<double>(n)));
  for (std::size_t i = 0; i < std::min(n_late, n); ++i) cat.late_arrival[order[i]] = 1;

  cat.impressions_7d.assign(n, 0);
  cat.clicks_7d.assign(n, 0);
  cat.orders_7d.assign(n, 0);
  return cat;
}

Catalog generate_catalog(std::size_t n_items, std::size_t d_true, std::size_t d, double noise_sigma,
                         std::uint64_t seed) {
  return generate_catalog(
      CatalogConfig{.n_items = n_items, .d_true = d_true, .d = d, .noise_sigma = noise_sigma, .seed = seed});
}

double calibrate_zipf(std::span<const double> rank_of_item, std::span<const std::uint8_t> late, double late_window,
                      double share) {
  double lo = 0.0, hi = 8.0;
  const double s_lo = expected_top_share(rank_of_item, late, late_window, lo);
  const double s_hi = expected_top_share(rank_of_item, late, late_window, hi);
  if (share < s_lo || share > s_hi) {
    std::ostringstream msg;
    msg << "calibrate_zipf: target top-20% share " << share << " outside achievable range [" << s_lo << ", " << s_hi
        << "] for " << rank_of_item.size() << " items";
    throw NumericFault(msg.str());
  }
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (expected_top_share(rank_of_item, late, late_window, mid) < share) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double top_share(std::span<const std::uint32_t> impressions, double fraction) {
  std::vector<std::uint32_t> sorted(impressions.begin(), impressions.end());
  std::ranges::sort(sorted, std::greater<>());
  const auto top = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sorted.size())));
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  if (total == 0.0) return 0.0;
  return std::accumulate(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(top), 0.0) / total;
}

GeneratedLog generate_log(Catalog& catalog, const LogConfig& config) {
  if (!(config.pareto_share > 0.5 && config.pareto_share < 1.0)) {
    throw InvalidArgument("generate_log: pareto_share must lie in (0.5, 1)");
  }
  if (config.n_users == 0 || config.n_queries == 0 || config.n_events == 0) {
    throw InvalidArgument("generate_log: users, queries and events must be positive");
  }
  if (config.test_days == 0 || config.test_days >= config.n_days) {
    throw InvalidArgument("generate_log: need 0 < test_days < n_days");
  }
  const std::size_t n_items = catalog.size();
  const std::size_t d_true = catalog.config.d_true;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Users and queries live in the same latent space as items.
  Matrix users(config.n_users, d_true);
  for (double& v : users.data) v = normal(rng);
  Matrix queries(config.n_queries, d_true);
  for (std::size_t q = 0; q < config.n_queries; ++q) {
    const std::size_t anchor = rng() % n_items;
    for (std::size_t j = 0; j < d_true; ++j) queries(q, j) = catalog.latent(anchor, j) + 0.3 * normal(rng);
  }

  // Exposure: Zipf over a random popularity ranking.
  std::vector<std::size_t> perm(n_items);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> rank(n_items);
  for (std::size_t r = 0; r < n_items; ++r) rank[perm[r]] = static_cast<double>(r + 1);

  GeneratedLog out;
  out.zipf_exponent = calibrate_zipf(rank, catalog.late_arrival, config.late_window, config.pareto_share);
  std::vector<double> cdf_early(n_items), cdf_all(n_items);
  double acc_e = 0.0, acc_a = 0.0;
  for (std::size_t i = 0; i < n_items; ++i) {
    const double w = std::pow(rank[i], -out.zipf_exponent);
    acc_a += w;
    if (!catalog.late_arrival[i]) acc_e += w;
    cdf_early[i] = acc_e;
    cdf_all[i] = acc_a;
  }
  if (acc_e == 0.0) throw NumericFault("generate_log: every item is late-arriving");

  const auto late_start = static_cast<std::uint64_t>(
      std::floor((1.0 - config.late_window) * static_cast<double>(config.n_events)));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_true));
  const auto& cm = config.click;
  // Unit-variance quality score carried by the fine attributes.
  const std::size_t d_fine = catalog.latent.cols - d_true;
  std::vector<double> quality(n_items, 0.0);
  for (std::size_t i = 0; i < n_items && d_fine > 0; ++i) {
    const auto f = catalog.latent.row(i).subspan(d_true);
    quality[i] = std::accumulate(f.begin(), f.end(), 0.0) / std::sqrt(static_cast<double>(d_fine));
  }

  out.events.resize(config.n_events);
  std::vector<double> score(config.n_events);
  for (std::size_t e = 0; e < config.n_events; ++e) {
    Event& ev = out.events[e];
    ev.ts = e;
    ev.day = static_cast<std::uint32_t>(e * config.n_days / config.n_events);
    ev.user = static_cast<std::uint32_t>(rng() % config.n_users);
    ev.query = static_cast<std::uint32_t>(rng() % config.n_queries);
    ev.item = static_cast<std::uint32_t>(sample_cdf(e >= late_start ? cdf_all : cdf_early, rng));
    const double position = static_cast<double>(rng() % 10) / 9.0;
    const double hour = static_cast<double>(rng() % 24);
    const double device = static_cast<double>(rng() % 2);
    ev.context = {position, std::sin(2.0 * std::numbers::pi * hour / 24.0),
                  std::cos(2.0 * std::numbers::pi * hour / 24.0), device};
    const auto item_lat = catalog.latent.row(ev.item).first(d_true);
    score[e] = cm.w_user * dot(users.row(ev.user), item_lat) * inv_sqrt +
               cm.w_query * dot(queries.row(ev.query), item_lat) * inv_sqrt + cm.w_bias * catalog.collab_bias[ev.item] +
               cm.w_fine * quality[ev.item] - cm.w_position * position + cm.w_device * (device - 0.5);
  }

  // Offset so the expected CTR equals the configured base rate.
  auto mean_ctr = [&](double offset) {
    double s = 0.0;
    for (double v : score) s += 1.0 / (1.0 + std::exp(-(v + offset)));
    return s / static_cast<double>(score.size());
  };
  double lo = -30.0, hi = 30.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_ctr(mid) < cm.base_ctr ? lo : hi) = mid;
  }
  out.logit_offset = 0.5 * (lo + hi);

  std::size_t clicks = 0;
  for (std::size_t e = 0; e < config.n_events; ++e) {
    Event& ev = out.events[e];
    const double p = 1.0 / (1.0 + std::exp(-(score[e] + out.logit_offset)));
    ev.label = uniform01(rng) < p ? 1 : 0;
    ev.order = ev.label && uniform01(rng) < cm.order_rate ? 1 : 0;
    clicks += ev.label;
  }
  out.ctr = static_cast<double>(clicks) / static_cast<double>(config.n_events);

  // 7-day counters over the window that closes at the start of the test period.
  const std::uint32_t train_days = config.n_days - config.test_days;
  const std::uint32_t window_start = train_days > config.counter_window_days ? train_days - config.counter_window_days : 0;
  std::ranges::fill(catalog.impressions_7d, 0);
  std::ranges::fill(catalog.clicks_7d, 0);
  std::ranges::fill(catalog.orders_7d, 0);
  std::vector<std::uint32_t> all_impressions(n_items, 0);
  std::vector<std::uint32_t> train_clicks(n_items, 0);
  for (const Event& ev : out.events) {
    ++all_impressions[ev.item];
    if (ev.day < train_days) train_clicks[ev.item] += ev.label;
    if (ev.day >= window_start && ev.day < train_days) {
      ++catalog.impressions_7d[ev.item];
      catalog.clicks_7d[ev.item] += ev.label;
      catalog.orders_7d[ev.item] += ev.order;
    }
  }
  out.top20_share = top_share(all_impressions);

  std::size_t test_events = 0, test_new = 0;
  for (const Event& ev : out.events) {
    if (ev.day < train_days) continue;
    ++test_events;
    test_new += train_clicks[ev.item] == 0 ? 1 : 0;
  }
  out.new_item_test_share = test_events ? static_cast<double>(test_new) / static_cast<double>(test_events) : 0.0;
  if (out.new_item_test_share < config.min_cold_test_share) {
    std::ostringstream msg;
    msg << "generate_log: only " << out.new_item_test_share << " of " << test_events
        << " test events involve items without training clicks (need >= " << config.min_cold_test_share
        << "); raise late_fraction or late_window";
    throw NumericFault(msg.str());
  }
  return out;
}

const char* to_string(ItemLabel label) {
  switch (label) {
    case ItemLabel::kWarm:
      return "warm";
    case ItemLabel::kCold:
      return "cold";
    case ItemLabel::kMid:
      return "mid";
  }
  return "?";
}

double default_scale_factor(std::size_t n_events) {
  return std::max(static_cast<double>(n_events) / kReferenceEvents, 5.0 / kColdImpressions);
}

std::vector<ItemLabel> label_cold_warm(const Catalog& catalog, double scale_factor) {
  const double threshold = kColdImpressions * scale_factor;
  std::vector<ItemLabel> labels(catalog.size());
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    if (catalog.clicks_7d[i] > kWarmClicks || catalog.orders_7d[i] > 0) {
      labels[i] = ItemLabel::kWarm;
    } else if (static_cast<double>(catalog.impressions_7d[i]) < threshold) {
      labels[i] = ItemLabel::kCold;
    } else {
      labels[i] = ItemLabel::kMid;
    }
  }
  return labels;
}

std::pair<std::vector<Event>, std::vector<Event>> split_train_test(std::span<const Event> log, std::uint32_t train_days,
                                                                   std::uint32_t test_days) {
  std::pair<std::vector<Event>, std::vector<Event>> out;
  for (const Event& ev : log) {
    if (ev.day < train_days) {
      out.first.push_back(ev);
    } else if (ev.day < train_days + test_days) {
      out.second.push_back(ev);
    }
  }
  if (out.first.empty() || out.second.empty()) {
    throw InvalidArgument("split_train_test: empty " + std::string(out.first.empty() ? "train" : "test") + " split");
  }
  return out;
}

// --- persistence ----------------------------------------------------------

nlohmann::json to_json(const CatalogConfig& c) {
  return {{"n_items", c.n_items},         {"d_true", c.d_true},
          {"d", c.d},                     {"noise_sigma", c.noise_sigma},
          {"n_categories", c.n_categories}, {"category_spread", c.category_spread},
          {"late_fraction", c.late_fraction}, {"bias_sigma", c.bias_sigma},
          {"d_fine", c.d_fine},               {"fine_scale", c.fine_scale},
          {"seed", c.seed}};
}

nlohmann::json to_json(const LogConfig& c) {
  return {{"n_users", c.n_users},
          {"n_queries", c.n_queries},
          {"n_events", c.n_events},
          {"n_days", c.n_days},
          {"test_days", c.test_days},
          {"pareto_share", c.pareto_share},
          {"late_window", c.late_window},
          {"counter_window_days", c.counter_window_days},
          {"min_cold_test_share", c.min_cold_test_share},
          {"click",
           {{"base_ctr", c.click.base_ctr},
            {"w_user", c.click.w_user},
            {"w_query", c.click.w_query},
            {"w_bias", c.click.w_bias},
            {"w_fine", c.click.w_fine},
            {"w_position", c.click.w_position},
            {"w_device", c.click.w_device},
            {"order_rate", c.click.order_rate}}},
          {"seed", c.seed}};
}

void save_catalog(const std::filesystem::path& stem, const Catalog& catalog, const nlohmann::json& provenance) {
  std::vector<char> blob;
  nlohmann::json layout = nlohmann::json::array();
  auto add = [&](const std::string& name, std::span<const double> values, std::size_t rows, std::size_t cols) {
    layout.push_back({{"name", name}, {"offset", blob.size() / sizeof(float)}, {"shape", {rows, cols}}});
    append_f32(blob, values);
  };
  add("latent", catalog.latent.data, catalog.latent.rows, catalog.latent.cols);
  add("content", catalog.content.data, catalog.content.rows, catalog.content.cols);
  add("projection", catalog.projection.data, catalog.projection.rows, catalog.projection.cols);
  add("collab_bias", catalog.collab_bias, catalog.size(), 1);

  const nlohmann::json manifest = {{"format", "smile.catalog"},
                                   {"version", kFormatVersion},
                                   {"tool_version", kToolVersion},
                                   {"dtype", "float32-le"},
                                   {"config", to_json(catalog.config)},
                                   {"layout", std::move(layout)},
                                   {"category", catalog.category},
                                   {"late_arrival", catalog.late_arrival},
                                   {"impressions_7d", catalog.impressions_7d},
                                   {"clicks_7d", catalog.clicks_7d},
                                   {"orders_7d", catalog.orders_7d},
                                   {"provenance", provenance}};
  auto bin = stem;
  bin += ".bin";
  auto man = stem;
  man += ".manifest.json";
  write_file_atomic(bin, std::string_view(blob.data(), blob.size()));
  write_file_atomic(man, manifest.dump());
}

Catalog load_catalog(const std::filesystem::path& stem) {
  auto man = stem;
  man += ".manifest.json";
  auto bin = stem;
  bin += ".bin";
  const auto text = read_file(man);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError("catalog manifest: " + std::string(e.what()));
  }
  if (j.value("format", "") != "smile.catalog" || j.value("version", -1) != kFormatVersion) {
    throw ArtifactError("catalog manifest: unexpected format or version in " + man.string());
  }
  const auto blob = read_file(bin);
  auto read_matrix = [&](const std::string& name) {
    for (const auto& entry : j.at("layout")) {
      if (entry.at("name") != name) continue;
      Matrix m(entry.at("shape")[0].get<std::size_t>(), entry.at("shape")[1].get<std::size_t>());
      m.data = read_f32(blob, entry.at("offset").get<std::size_t>(), m.rows * m.cols);
      return m;
    }
    throw ArtifactError("catalog manifest: missing array " + name);
  };
  Catalog c;
  const auto& cfg = j.at("config");
  c.config.n_items = cfg.at("n_items");
  c.config.d_true = cfg.at("d_true");
  c.config.d = cfg.at("d");
  c.config.noise_sigma = cfg.at("noise_sigma");
  c.config.n_categories = cfg.at("n_categories");
  c.config.category_spread = cfg.at("category_spread");
  c.config.late_fraction = cfg.at("late_fraction");
  c.config.bias_sigma = cfg.at("bias_sigma");
  c.config.d_fine = cfg.at("d_fine");
  c.config.fine_scale = cfg.at("fine_scale");
  c.config.seed = cfg.at("seed");
  c.latent = read_matrix("latent");
  c.content = read_matrix("content");
  c.projection = read_matrix("projection");
  c.collab_bias = read_matrix("collab_bias").data;
  c.category = j.at("category").get<std::vector<std::uint32_t>>();
  c.late_arrival = j.at("late_arrival").get<std::vector<std::uint8_t>>();
  c.impressions_7d = j.at("impressions_7d").get<std::vector<std::uint32_t>>();
  c.clicks_7d = j.at("clicks_7d").get<std::vector<std::uint32_t>>();
  c.orders_7d = j.at("orders_7d").get<std::vector<std::uint32_t>>();
  return c;
}

void write_log(const std::filesystem::path& path, std::span<const Event> events, const nlohmann::json& meta) {
  std::string out;
  out.reserve(events.size() * 160);
  out += nlohmann::json{{"meta", meta}}.dump();
  out += '\n';
  for (const Event& ev : events) {
    nlohmann::json rec = {{"user_id", ev.user},
                          {"query_id", ev.query},
                          {"item_id", ev.item},
                          {"day", ev.day},
                          {"ts", ev.ts},
                          {"context", ev.context},
                          {"label", ev.label},
                          {"order_flag", ev.order}};
    out += rec.dump();
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<Event> read_log(const std::filesystem::path& path, nlohmann::json* meta) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open log " + path.string());
  std::vector<Event> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("meta")) {
        if (meta) *meta = j.at("meta");
        continue;
      }
      Event ev;
      ev.user = j.at("user_id");
      ev.query = j.at("query_id");
      ev.item = j.at("item_id");
      ev.day = j.at("day");
      ev.ts = j.at("ts");
      ev.context = j.at("context").get<std::array<double, kContextDim>>();
      ev.label = j.at("label");
      ev.order = j.at("order_flag");
      events.push_back(ev);
    } catch (const nlohmann::json::exception& e) {
      throw ArtifactError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return events;
}

}  // namespace smile::data
