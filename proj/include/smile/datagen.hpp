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
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "smile/common.hpp"

/// Synthetic e-commerce search log with a known click model, Pareto-skewed
/// exposure, late-arriving items, and warm/cold item labels.
namespace smile::data {

inline constexpr std::size_t kContextDim = 4;
/// Warm/cold thresholds at full production scale.
inline constexpr std::uint32_t kWarmClicks = 3;
inline constexpr double kColdImpressions = 200.0;
inline constexpr double kReferenceEvents = 5e8;

struct CatalogConfig {
  std::size_t n_items = 2000;
  std::size_t d_true = 8;
  std::size_t d = 16;
  double noise_sigma = 0.5;
  std::size_t n_categories = 16;
  double category_spread = 0.6;
  double late_fraction = 0.3;  // share of items that only arrive at the end of the timeline
  double bias_sigma = 1.0;     // item popularity bias the content cannot explain
  /// Fine-grained attributes: a small slice of content variance with a real
  /// effect on clicks, left over for the residual codes to pick up.
  std::size_t d_fine = 0;
  double fine_scale = 0.15;
  std::uint64_t seed = 1;
};

struct Catalog {
  CatalogConfig config;
  Matrix latent;      // n_items x (d_true + d_fine); coarse dims first, then fine attributes
  Matrix content;     // n_items x d
  Matrix projection;  // d x (d_true + d_fine)
  std::vector<std::uint32_t> category;
  std::vector<double> collab_bias;
  std::vector<std::uint8_t> late_arrival;
  std::vector<std::uint32_t> impressions_7d;
  std::vector<std::uint32_t> clicks_7d;
  std::vector<std::uint32_t> orders_7d;

  std::size_t size() const { return latent.rows; }
};

Catalog generate_catalog(const CatalogConfig& config);
Catalog generate_catalog(std::size_t n_items, std::size_t d_true, std::size_t d, double noise_sigma,
                         std::uint64_t seed);

struct ClickModel {
  double base_ctr = 0.1;
  double w_user = 1.5;
  double w_query = 1.0;
  double w_bias = 0.8;
  double w_fine = 1.0;  // item quality read off the fine attributes
  double w_position = 0.6;
  double w_device = 0.1;
  double order_rate = 0.1;
};

struct LogConfig {
  std::size_t n_users = 500;
  std::size_t n_queries = 200;
  std::size_t n_events = 200000;
  std::uint32_t n_days = 20;
  std::uint32_t test_days = 1;
  double pareto_share = 0.8;
  double late_window = 0.1;  // final fraction of the timeline in which late items exist
  std::uint32_t counter_window_days = 7;
  double min_cold_test_share = 0.05;
  ClickModel click;
  std::uint64_t seed = 2;
};

struct Event {
  std::uint64_t ts = 0;
  std::uint32_t day = 0;
  std::uint32_t user = 0;
  std::uint32_t query = 0;
  std::uint32_t item = 0;
  std::array<double, kContextDim> context{};  // position, hour sin, hour cos, device
  std::uint8_t label = 0;
  std::uint8_t order = 0;

  bool operator==(const Event&) const = default;
};

struct GeneratedLog {
  std::vector<Event> events;
  double zipf_exponent = 0.0;
  double logit_offset = 0.0;
  double top20_share = 0.0;  // measured on impressions
  double ctr = 0.0;
  double new_item_test_share = 0.0;  // test events on items with zero training clicks
};

/// Samples the log and fills the catalog's 7-day counters, taken over the
/// window that ends where the test period starts.
GeneratedLog generate_log(Catalog& catalog, const LogConfig& config);

/// Zipf exponent whose expected top-20% impression share equals `share`,
/// accounting for late items' shorter availability.
double calibrate_zipf(std::span<const double> rank_of_item, std::span<const std::uint8_t> late, double late_window,
                      double share);

double top_share(std::span<const std::uint32_t> impressions, double fraction = 0.2);

enum class ItemLabel : std::uint8_t { kWarm, kCold, kMid };
const char* to_string(ItemLabel label);

/// 200 * n_events / 5e8, floored so the impression threshold never drops below 5.
double default_scale_factor(std::size_t n_events);

/// warm iff clicks > 3 or orders > 0; otherwise cold iff impressions < 200 * scale_factor; otherwise mid.
std::vector<ItemLabel> label_cold_warm(const Catalog& catalog, double scale_factor);

/// Days [0, train_days) train, [train_days, train_days + test_days) test.
std::pair<std::vector<Event>, std::vector<Event>> split_train_test(std::span<const Event> log, std::uint32_t train_days,
                                                                   std::uint32_t test_days);

// Files: catalog as <stem>.manifest.json + <stem>.bin; log as NDJSON with a leading meta record.
void save_catalog(const std::filesystem::path& stem, const Catalog& catalog, const nlohmann::json& provenance);
Catalog load_catalog(const std::filesystem::path& stem);
void write_log(const std::filesystem::path& path, std::span<const Event> events, const nlohmann::json& meta);
std::vector<Event> read_log(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

nlohmann::json to_json(const CatalogConfig& c);
nlohmann::json to_json(const LogConfig& c);

}  // namespace smile::data
