#include "txnfm/core.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"

using json = nlohmann::ordered_json;

namespace txnfm {

uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::kMissingArtifact, "cannot open " + path.string());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a64(std::string_view(buf, size_t(in.gcount())), h);
  }
  return h;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCategory::kMissingArtifact, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void atomic_write_file(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCategory::kInternal, "cannot write " + tmp.string());
    out.write(content.data(), std::streamsize(content.size()));
    if (!out) throw Error(ErrorCategory::kInternal, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return std::string(buf);
}

}  // namespace txnfm

namespace txnfm::core {

namespace chr = std::chrono;

CivilDate civil_from_timestamp(Timestamp ts) {
  int64_t days = ts.unix_seconds / 86400;
  if (ts.unix_seconds % 86400 < 0) --days;
  chr::sys_days sd{chr::days{days}};
  chr::year_month_day ymd{sd};
  chr::weekday wd{sd};
  CivilDate out;
  out.year = int(ymd.year());
  out.month = int(unsigned(ymd.month()));
  out.day = int(unsigned(ymd.day()));
  out.weekday = int(wd.iso_encoding());
  return out;
}

Timestamp timestamp_from_civil(int year, int month, int day, int hour, int minute, int second) {
  chr::year_month_day ymd{chr::year{year}, chr::month{unsigned(month)}, chr::day{unsigned(day)}};
  chr::sys_days sd{ymd};
  int64_t secs = int64_t(sd.time_since_epoch().count()) * 86400 + hour * 3600 + minute * 60 + second;
  return Timestamp{secs};
}

bool is_valid_civil(int year, int month, int day) {
  if (month < 1 || month > 12 || day < 1 || day > 31) return false;
  chr::year_month_day ymd{chr::year{year}, chr::month{unsigned(month)}, chr::day{unsigned(day)}};
  return ymd.ok();
}

std::optional<Timestamp> parse_timestamp(const std::string& iso) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0, z = 0;
  int n = std::sscanf(iso.c_str(), "%d-%d-%d%c%d:%d:%d%c", &y, &mo, &d, &sep, &h, &mi, &s, &z);
  if (n == 3) {
    // date only
  } else if (n >= 7 && (sep == 'T' || sep == ' ')) {
    if (h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60) return std::nullopt;
    if (n == 8 && z != 'Z') return std::nullopt;
  } else {
    return std::nullopt;
  }
  if (!is_valid_civil(y, mo, d)) return std::nullopt;
  return timestamp_from_civil(y, mo, d, n >= 7 ? h : 0, n >= 7 ? mi : 0, n >= 7 ? s : 0);
}

std::string format_timestamp(Timestamp ts) {
  CivilDate c = civil_from_timestamp(ts);
  int64_t rem = ts.unix_seconds % 86400;
  if (rem < 0) rem += 86400;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", c.year, c.month, c.day,
                int(rem / 3600), int(rem / 60 % 60), int(rem % 60));
  return std::string(buf);
}

std::string format_date(Timestamp ts) {
  CivilDate c = civil_from_timestamp(ts);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", c.year, c.month, c.day);
  return std::string(buf);
}

const char* source_name(Source s) {
  switch (s) {
    case Source::A: return "A";
    case Source::B: return "B";
    case Source::C: return "C";
  }
  return "?";
}

std::optional<Source> parse_source(const std::string& s) {
  if (s == "A") return Source::A;
  if (s == "B") return Source::B;
  if (s == "C") return Source::C;
  return std::nullopt;
}

std::string Transaction::amount_string() const {
  int64_t a = amount_cents;
  const char* sign = a < 0 ? "-" : "";
  uint64_t mag = a < 0 ? uint64_t(-(a + 1)) + 1 : uint64_t(a);
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%s%" PRIu64 ".%02u", sign, mag / 100, unsigned(mag % 100));
  return std::string(buf);
}

int64_t parse_amount_cents(const std::string& decimal) {
  const char* p = decimal.c_str();
  const char* end = p + decimal.size();
  bool neg = false;
  if (p < end && (*p == '-' || *p == '+')) neg = (*p == '-'), ++p;
  int64_t whole = 0;
  auto [ptr, ec] = std::from_chars(p, end, whole);
  if (ec != std::errc() || ptr == p) throw Error(ErrorCategory::kData, "bad amount: " + decimal);
  int64_t cents = whole * 100;
  if (ptr < end) {
    if (*ptr != '.') throw Error(ErrorCategory::kData, "bad amount: " + decimal);
    ++ptr;
    int digits = 0;
    int64_t frac = 0;
    while (ptr < end && digits < 2 && *ptr >= '0' && *ptr <= '9') {
      frac = frac * 10 + (*ptr - '0');
      ++ptr, ++digits;
    }
    if (digits == 1) frac *= 10;
    if (ptr != end || digits == 0) throw Error(ErrorCategory::kData, "bad amount: " + decimal);
    cents += frac;
  }
  return neg ? -cents : cents;
}

static bool description_ok(const std::string& d) {
  for (char c : d) {
    if (c != ' ' && c != '\t' && c != '\n' && c != '\r') return true;
  }
  return false;
}

ValidationResult validate_history(const UserHistory& h) {
  ValidationResult out;
  out.history.user_id = h.user_id;
  out.history.transactions.reserve(h.transactions.size());
  for (const Transaction& t : h.transactions) {
    if (!description_ok(t.description)) {
      out.dropped.push_back({h.user_id, "empty-description", format_date(t.date)});
      continue;
    }
    CivilDate c = civil_from_timestamp(t.date);
    if (!is_valid_civil(c.year, c.month, c.day)) {
      out.dropped.push_back({h.user_id, "invalid-date", t.description});
      continue;
    }
    out.history.transactions.push_back(t);
  }
  std::stable_sort(out.history.transactions.begin(), out.history.transactions.end(),
                   [](const Transaction& a, const Transaction& b) { return a.date < b.date; });
  return out;
}

bool history_is_valid(const UserHistory& h) {
  for (size_t i = 0; i < h.transactions.size(); ++i) {
    if (!description_ok(h.transactions[i].description)) return false;
    if (i > 0 && h.transactions[i].date < h.transactions[i - 1].date) return false;
  }
  return true;
}

// --- record file IO ---------------------------------------------------------

void write_transactions_jsonl(const std::filesystem::path& path,
                              const std::vector<UserHistory>& histories) {
  std::string out;
  for (const UserHistory& h : histories) {
    for (const Transaction& t : h.transactions) {
      json j;
      j["user_id"] = h.user_id;
      j["ts"] = format_timestamp(t.date);
      j["amount"] = t.amount_string();
      j["description"] = t.description;
      j["source"] = source_name(t.source);
      out += j.dump();
      out += '\n';
    }
  }
  atomic_write_file(path, out);
}

TransactionFile read_transactions_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::kMissingArtifact, "cannot open " + path.string());
  TransactionFile out;
  std::map<std::string, size_t> index;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    auto bad = [&](const std::string& why) {
      out.diagnostics.push_back({"", why, "line " + std::to_string(lineno)});
    };
    if (j.is_discarded() || !j.is_object()) {
      bad("unparsable-record");
      continue;
    }
    if (!j.contains("user_id") || !j.contains("ts") || !j.contains("amount") ||
        !j.contains("description") || !j.contains("source")) {
      bad("missing-field");
      continue;
    }
    // Single-currency contract: an explicit non-BRL currency tag is rejected.
    if (j.contains("currency") && j["currency"] != "BRL") {
      bad("unsupported-currency");
      continue;
    }
    auto ts = parse_timestamp(j["ts"].get<std::string>());
    if (!ts) {
      bad("unparsable-date");
      continue;
    }
    auto src = parse_source(j["source"].get<std::string>());
    if (!src) {
      bad("unknown-source");
      continue;
    }
    Transaction t;
    try {
      t.amount_cents = parse_amount_cents(j["amount"].get<std::string>());
    } catch (const Error&) {
      bad("bad-amount");
      continue;
    }
    t.date = *ts;
    t.description = j["description"].get<std::string>();
    t.source = *src;
    std::string uid = j["user_id"].get<std::string>();
    auto it = index.find(uid);
    if (it == index.end()) {
      index.emplace(uid, out.histories.size());
      out.histories.push_back({uid, {}});
      it = index.find(uid);
    }
    out.histories[it->second].transactions.push_back(std::move(t));
  }
  for (UserHistory& h : out.histories) {
    ValidationResult v = validate_history(h);
    h = std::move(v.history);
    out.diagnostics.insert(out.diagnostics.end(), v.dropped.begin(), v.dropped.end());
  }
  return out;
}

void write_rows_jsonl(const std::filesystem::path& path, const std::vector<LabeledRow>& rows,
                      const TabularSchema& schema) {
  std::string out;
  for (const LabeledRow& r : rows) {
    json j;
    j["row_id"] = r.row_id;
    j["user_id"] = r.user_id;
    j["score_date"] = format_timestamp(r.score_date);
    j["label"] = r.label;
    json f = json::object();
    for (size_t i = 0; i < schema.n_num(); ++i) {
      const NumericalValue& v = r.features.numericals.at(i);
      if (v.missing) {
        f[schema.numerical_names[i]] = nullptr;
      } else {
        f[schema.numerical_names[i]] = v.value;
      }
    }
    for (size_t i = 0; i < schema.n_cat(); ++i) {
      f[schema.categorical_names[i]] = r.features.categoricals.at(i);
    }
    j["features"] = std::move(f);
    if (r.p_true >= 0.0) j["p_true"] = r.p_true;
    out += j.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

std::vector<LabeledRow> read_rows_jsonl(const std::filesystem::path& path,
                                        const TabularSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::kMissingArtifact, "cannot open " + path.string());
  std::vector<LabeledRow> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw Error(ErrorCategory::kData, path.string() + ": unparsable row at line " + std::to_string(lineno));
    }
    LabeledRow r;
    r.row_id = j.at("row_id").get<std::string>();
    r.user_id = j.at("user_id").get<std::string>();
    auto ts = parse_timestamp(j.at("score_date").get<std::string>());
    if (!ts) throw Error(ErrorCategory::kData, "bad score_date at line " + std::to_string(lineno));
    r.score_date = *ts;
    r.label = j.at("label").get<int>();
    if (r.label != 0 && r.label != 1) {
      throw Error(ErrorCategory::kData, "label must be 0/1 at line " + std::to_string(lineno));
    }
    const json& f = j.at("features");
    r.features.numericals.resize(schema.n_num());
    r.features.categoricals.resize(schema.n_cat());
    for (size_t i = 0; i < schema.n_num(); ++i) {
      const json& v = f.at(schema.numerical_names[i]);
      if (v.is_null()) {
        r.features.numericals[i] = {0.0, true};
      } else {
        r.features.numericals[i] = {v.get<double>(), false};
      }
    }
    for (size_t i = 0; i < schema.n_cat(); ++i) {
      r.features.categoricals[i] = f.at(schema.categorical_names[i]).get<int>();
    }
    if (j.contains("p_true")) r.p_true = j["p_true"].get<double>();
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string schema_to_json(const TabularSchema& schema) {
  json j;
  j["numericals"] = schema.numerical_names;
  json cats = json::array();
  for (size_t i = 0; i < schema.n_cat(); ++i) {
    cats.push_back({{"name", schema.categorical_names[i]},
                    {"cardinality", schema.categorical_cardinalities[i]}});
  }
  j["categoricals"] = std::move(cats);
  return j.dump(2) + "\n";
}

TabularSchema schema_from_json(const std::string& text) {
  json j = json::parse(text);
  TabularSchema s;
  for (const auto& n : j.at("numericals")) s.numerical_names.push_back(n.get<std::string>());
  for (const auto& c : j.at("categoricals")) {
    s.categorical_names.push_back(c.at("name").get<std::string>());
    s.categorical_cardinalities.push_back(c.at("cardinality").get<int>());
  }
  return s;
}

void write_schema_json(const std::filesystem::path& path, const TabularSchema& schema) {
  atomic_write_file(path, schema_to_json(schema));
}

TabularSchema read_schema_json(const std::filesystem::path& path) {
  return schema_from_json(read_text_file(path));
}

}  // namespace txnfm::core
