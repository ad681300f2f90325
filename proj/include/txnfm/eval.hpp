#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "txnfm/core.hpp"

namespace txnfm::eval {

// Rank-based AUC (Mann-Whitney, average ranks for ties). The pairwise
// numerator is accumulated in exact integer arithmetic (doubled ranks), so
// the result is bit-identical to the O(n^2) oracle below.
double auc(std::span<const double> scores, std::span<const int> labels);

// Brute-force pairwise P(pos > neg) + 0.5 P(equal); the testing oracle.
double auc_bruteforce(std::span<const double> scores, std::span<const int> labels);

struct SplitResult {
  std::vector<core::LabeledRow> train;
  std::vector<core::LabeledRow> test;
  std::vector<std::string> diagnostics;  // degenerate but non-fatal conditions
};

// Partition by score_date: train gets rows strictly before train_end, test
// gets rows at or after test_start. Requires train_end <= test_start; a row
// between the two bounds would belong to neither set and is an error.
SplitResult temporal_split(std::span<const core::LabeledRow> rows,
                           core::Timestamp train_end, core::Timestamp test_start);

// Throws if any transaction in h is at or after the score date.
void assert_history_predates(const core::UserHistory& h, core::Timestamp score_date,
                             const std::string& row_id);

struct WindowAuc {
  std::string label;  // calendar month, "YYYY-MM"
  double auc = 0.0;
  int n_pos = 0;
  int n_neg = 0;
};

struct EvalReport {
  double auc = 0.0;
  int n_pos = 0;
  int n_neg = 0;
  std::vector<WindowAuc> windows;  // chronologically ordered
  uint64_t seed = 0;
  std::string config_fingerprint;
  std::vector<std::string> diagnostics;
};

// Overall and per-calendar-month AUC; single-class months are skipped with a
// diagnostic instead of failing the whole report.
EvalReport evaluate(std::span<const double> scores, std::span<const core::LabeledRow> rows,
                    uint64_t seed, const std::string& config_fingerprint);

void write_report_json(const std::filesystem::path& path, const EvalReport& r);
EvalReport read_report_json(const std::filesystem::path& path);

struct SweepRow {
  std::string axis;
  std::string level;
  uint64_t seed = 0;
  double auc = 0.0;
  double seconds = 0.0;
};

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

double median(std::vector<double> xs);

}  // namespace txnfm::eval
