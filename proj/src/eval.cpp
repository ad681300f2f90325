#include "txnfm/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

namespace txnfm::eval {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels,
                  int64_t& n_pos, int64_t& n_neg) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCategory::kInternal, "scores and labels differ in length");
  }
  n_pos = n_neg = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      ++n_pos;
    } else if (labels[i] == 0) {
      ++n_neg;
    } else {
      throw Error(ErrorCategory::kData, "labels must be 0 or 1");
    }
    if (!std::isfinite(scores[i])) {
      throw Error(ErrorCategory::kData, "scores must be finite");
    }
  }
  if (n_pos == 0 || n_neg == 0) {
    throw Error(ErrorCategory::kData, "AUC needs at least one positive and one negative");
  }
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  int64_t n_pos, n_neg;
  check_binary(scores, labels, n_pos, n_neg);
  size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Doubled average ranks stay integral under ties: a run occupying 1-based
  // positions a..b gets doubled rank a+b for every member.
  int64_t sum2 = 0;  // doubled rank sum over positives
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    int64_t rank2 = int64_t(i + 1) + int64_t(j);
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) sum2 += rank2;
    }
    i = j;
  }
  int64_t u2 = sum2 - n_pos * (n_pos + 1);  // doubled Mann-Whitney U
  return double(u2) / double(2 * n_pos * n_neg);
}

double auc_bruteforce(std::span<const double> scores, std::span<const int> labels) {
  int64_t n_pos, n_neg;
  check_binary(scores, labels, n_pos, n_neg);
  int64_t sum2 = 0;
  for (size_t p = 0; p < scores.size(); ++p) {
    if (labels[p] != 1) continue;
    for (size_t q = 0; q < scores.size(); ++q) {
      if (labels[q] != 0) continue;
      if (scores[p] > scores[q]) {
        sum2 += 2;
      } else if (scores[p] == scores[q]) {
        sum2 += 1;
      }
    }
  }
  return double(sum2) / double(2 * n_pos * n_neg);
}

SplitResult temporal_split(std::span<const core::LabeledRow> rows,
                           core::Timestamp train_end, core::Timestamp test_start) {
  if (test_start < train_end) {
    throw Error(ErrorCategory::kConfig, "temporal split bounds overlap: train_end after test_start");
  }
  SplitResult out;
  for (const core::LabeledRow& r : rows) {
    if (r.score_date < train_end) {
      out.train.push_back(r);
    } else if (!(r.score_date < test_start)) {
      out.test.push_back(r);
    } else {
      throw Error(ErrorCategory::kData,
                  "row " + r.row_id + " falls in the gap between train_end and test_start");
    }
  }
  if (out.test.empty()) out.diagnostics.push_back("empty test set");
  if (out.train.empty()) out.diagnostics.push_back("empty train set");
  return out;
}

void assert_history_predates(const core::UserHistory& h, core::Timestamp score_date,
                             const std::string& row_id) {
  for (const core::Transaction& t : h.transactions) {
    if (!(t.date < score_date)) {
      throw Error(ErrorCategory::kInternal,
                  "leakage: row " + row_id + " history contains a transaction at " +
                      core::format_date(t.date) + " not before its score date " +
                      core::format_date(score_date));
    }
  }
}

EvalReport evaluate(std::span<const double> scores, std::span<const core::LabeledRow> rows,
                    uint64_t seed, const std::string& config_fingerprint) {
  if (scores.size() != rows.size()) {
    throw Error(ErrorCategory::kInternal, "scores and rows differ in length");
  }
  std::vector<int> labels(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) labels[i] = rows[i].label;
  EvalReport rep;
  rep.seed = seed;
  rep.config_fingerprint = config_fingerprint;
  rep.auc = auc(scores, labels);
  for (int l : labels) (l == 1 ? rep.n_pos : rep.n_neg)++;

  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by_month;
  for (size_t i = 0; i < rows.size(); ++i) {
    std::string label = core::format_date(rows[i].score_date).substr(0, 7);
    auto& slot = by_month[label];
    slot.first.push_back(scores[i]);
    slot.second.push_back(rows[i].label);
  }
  for (const auto& [label, slot] : by_month) {
    WindowAuc w;
    w.label = label;
    for (int l : slot.second) (l == 1 ? w.n_pos : w.n_neg)++;
    if (w.n_pos == 0 || w.n_neg == 0) {
      rep.diagnostics.push_back("window " + label + " skipped: single-class");
      continue;
    }
    w.auc = auc(slot.first, slot.second);
    rep.windows.push_back(std::move(w));
  }
  return rep;
}

void write_report_json(const std::filesystem::path& path, const EvalReport& r) {
  nlohmann::ordered_json j;
  j["auc"] = r.auc;
  j["n_pos"] = r.n_pos;
  j["n_neg"] = r.n_neg;
  j["seed"] = r.seed;
  j["config_fingerprint"] = r.config_fingerprint;
  j["windows"] = nlohmann::ordered_json::array();
  for (const WindowAuc& w : r.windows) {
    j["windows"].push_back({{"label", w.label},
                            {"auc", w.auc},
                            {"n_pos", w.n_pos},
                            {"n_neg", w.n_neg}});
  }
  j["diagnostics"] = r.diagnostics;
  atomic_write_file(path, j.dump(2) + "\n");
}

EvalReport read_report_json(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCategory::kData, path.string() + ": " + e.what());
  }
  EvalReport r;
  r.auc = j.at("auc").get<double>();
  r.n_pos = j.at("n_pos").get<int>();
  r.n_neg = j.at("n_neg").get<int>();
  r.seed = j.at("seed").get<uint64_t>();
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  for (const auto& w : j.at("windows")) {
    r.windows.push_back({w.at("label").get<std::string>(), w.at("auc").get<double>(),
                         w.at("n_pos").get<int>(), w.at("n_neg").get<int>()});
  }
  if (j.contains("diagnostics")) {
    r.diagnostics = j.at("diagnostics").get<std::vector<std::string>>();
  }
  return r;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::string out = "axis,level,seed,auc,seconds\n";
  char buf[160];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.6f,%.2f\n", r.axis.c_str(),
                  r.level.c_str(), static_cast<unsigned long long>(r.seed), r.auc,
                  r.seconds);
    out += buf;
  }
  atomic_write_file(path, out);
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw Error(ErrorCategory::kInternal, "median of empty list");
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace txnfm::eval
