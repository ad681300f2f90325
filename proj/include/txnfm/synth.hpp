#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "txnfm/core.hpp"

namespace txnfm::synth {

// Seeded generator of transaction datasets with planted structure. Every
// random draw comes from a named substream keyed by (seed, purpose, index),
// so raising n_users or adding rows never perturbs data that already existed.
//
// Planted signal map (what a model can recover, and from where):
//   - merchant-group preference: readable only from source-A description text
//   - investment-vs-arrears operation style: readable only from source-B text
//   - bureau score: tabular only, orthogonal to the transaction stream
//   - spend trend: slow multiplicative drift, needs a long history window
//   - cyclic feature: label depends periodically on one numerical feature
//   - product pair: label depends on the product of two numerical features
//   - interaction: label term = city-cluster (history) x alt_signal (tabular),
//     scaled by interaction_strength; neither factor has a main effect
//   - source C: label-free high-frequency chatter that competes for context
struct GeneratorConfig {
  uint64_t seed = 1;
  int n_users = 20000;
  core::Timestamp start = core::timestamp_from_civil(2022, 1, 1);
  core::Timestamp end = core::timestamp_from_civil(2024, 12, 1);  // exclusive
  std::vector<core::Source> sources = {core::Source::A, core::Source::B, core::Source::C};
  int persona_dim = 8;
  int label_horizon_months = 6;
  double interaction_strength = 1.0;
  double seasonality_amplitude = 0.25;
  double positive_rate = 0.15;
  double label_noise = 0.25;
  int n_train_rows = 50000;
  int n_test_rows = 10000;
  int train_months = 12;  // monthly score-date grid immediately before test
  int test_months = 4;    // out-of-time monthly windows at the end
  double drift_rate = 0.0;  // description drift per month past the train period

  void validate() const;
};

struct Dataset {
  std::vector<core::UserHistory> histories;
  std::vector<core::LabeledRow> train_rows;  // ascending score_date
  std::vector<core::LabeledRow> test_rows;   // ascending score_date
  core::TabularSchema schema;
  double intercept = 0.0;  // calibrated so train positive rate hits the target
};

Dataset generate(const GeneratorConfig& cfg);

// AUC of the generator's true label probabilities against the drawn labels:
// the ceiling no model evaluated on these rows should beat beyond noise.
double bayes_reference_auc(std::span<const core::LabeledRow> rows);

// Share of total spend (outflow magnitude) per calendar month 1..12.
std::array<double, 12> monthly_spend_shares(std::span<const core::UserHistory> histories);

// History restricted to the given sources; transaction order preserved.
core::UserHistory filter_sources(const core::UserHistory& h,
                                 std::span<const core::Source> keep);

// First day of the month `months_after_start` months after the config start.
core::Timestamp month_start_after(const GeneratorConfig& cfg, int months_after_start);

}  // namespace txnfm::synth
