#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "txnfm/common.hpp"

namespace txnfm::core {

// UTC timestamp, second resolution. Stored as unix seconds; calendar
// conversions go through std::chrono civil-date arithmetic.
struct Timestamp {
  int64_t unix_seconds = 0;

  auto operator<=>(const Timestamp&) const = default;
};

struct CivilDate {
  int year = 1970;
  int month = 1;   // 1..12
  int day = 1;     // 1..31
  int weekday = 4; // ISO: 1=Mon .. 7=Sun
};

CivilDate civil_from_timestamp(Timestamp ts);
Timestamp timestamp_from_civil(int year, int month, int day,
                               int hour = 0, int minute = 0, int second = 0);
bool is_valid_civil(int year, int month, int day);
// Accepts "YYYY-MM-DD" and "YYYY-MM-DDTHH:MM:SS" (optional trailing 'Z').
std::optional<Timestamp> parse_timestamp(const std::string& iso);
std::string format_timestamp(Timestamp ts);  // ISO-8601, seconds resolution
std::string format_date(Timestamp ts);       // date part only

enum class Source : uint8_t { A = 0, B = 1, C = 2 };

const char* source_name(Source s);
std::optional<Source> parse_source(const std::string& s);

// One financial event. Amounts are fixed-point with two fractional digits
// (cents), negative = outflow.
struct Transaction {
  int64_t amount_cents = 0;
  Timestamp date;
  std::string description;
  Source source = Source::A;

  std::string amount_string() const;  // decimal, two fractional digits
};

int64_t parse_amount_cents(const std::string& decimal);  // throws Error(kData)

struct UserHistory {
  std::string user_id;
  std::vector<Transaction> transactions;  // ascending by date, stable on ties
};

struct Diagnostic {
  std::string user_id;
  std::string reason;
  std::string detail;
};

struct ValidationResult {
  UserHistory history;
  std::vector<Diagnostic> dropped;
};

// Sorts by date (stable; ties keep insertion order) and drops invalid
// records, one diagnostic per dropped transaction. Idempotent.
ValidationResult validate_history(const UserHistory& h);

bool history_is_valid(const UserHistory& h);

// Fixed-order tabular schema, registered once per dataset.
struct TabularSchema {
  std::vector<std::string> numerical_names;
  std::vector<std::string> categorical_names;
  std::vector<int> categorical_cardinalities;  // parallel to categorical_names

  size_t n_num() const { return numerical_names.size(); }
  size_t n_cat() const { return categorical_names.size(); }
};

struct NumericalValue {
  double value = 0.0;
  bool missing = false;
};

struct TabularVector {
  std::vector<NumericalValue> numericals;  // order matches schema
  std::vector<int> categoricals;           // category ids, order matches schema
};

struct LabeledRow {
  std::string row_id;
  std::string user_id;
  Timestamp score_date;
  int label = 0;  // {0,1}
  TabularVector features;
  double p_true = -1.0;  // generator's retained label probability, <0 if unknown
};

// --- line-delimited record files -------------------------------------------
//
// Transactions: one JSON object per line with fields
//   user_id, ts (ISO-8601), amount (decimal string), description, source.
// Labeled rows: one JSON object per line with fields
//   row_id, user_id, score_date (ISO-8601), label, features (flat map,
//   numericals as numbers or null when missing, categoricals as integers),
//   and optionally p_true.

struct TransactionFile {
  std::vector<UserHistory> histories;      // grouped by user, validated
  std::vector<Diagnostic> diagnostics;
};

void write_transactions_jsonl(const std::filesystem::path& path,
                              const std::vector<UserHistory>& histories);
TransactionFile read_transactions_jsonl(const std::filesystem::path& path);

void write_rows_jsonl(const std::filesystem::path& path,
                      const std::vector<LabeledRow>& rows,
                      const TabularSchema& schema);
std::vector<LabeledRow> read_rows_jsonl(const std::filesystem::path& path,
                                        const TabularSchema& schema);

void write_schema_json(const std::filesystem::path& path, const TabularSchema& schema);
TabularSchema read_schema_json(const std::filesystem::path& path);
std::string schema_to_json(const TabularSchema& schema);
TabularSchema schema_from_json(const std::string& text);

}  // namespace txnfm::core
