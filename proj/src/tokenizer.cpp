#include "txnfm/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace txnfm::tok {

TokenKind token_kind(int id) {
  if (id < 0) throw Error(ErrorCategory::kInternal, "negative token id");
  if (id < kSignBase) return TokenKind::kReserved;
  if (id < kAmountBase) return TokenKind::kSign;
  if (id < kMonthBase) return TokenKind::kAmount;
  if (id < kDayBase) return TokenKind::kMonth;
  if (id < kWeekdayBase) return TokenKind::kDay;
  if (id < kTextBase) return TokenKind::kWeekday;
  return TokenKind::kText;
}

std::string token_name(int id) {
  static const char* kWeekdays[7] = {"MON", "TUE", "WED", "THU", "FRI", "SAT", "SUN"};
  char buf[24];
  switch (token_kind(id)) {
    case TokenKind::kReserved:
      return id == kPad ? "PAD" : id == kBos ? "BOS" : "SEP";
    case TokenKind::kSign:
      return id == kSignBase ? "SIGN_IN" : "SIGN_OUT";
    case TokenKind::kAmount:
      std::snprintf(buf, sizeof(buf), "AMT_%02d", id - kAmountBase);
      return buf;
    case TokenKind::kMonth:
      std::snprintf(buf, sizeof(buf), "MONTH_%02d", id - kMonthBase + 1);
      return buf;
    case TokenKind::kDay:
      std::snprintf(buf, sizeof(buf), "DAY_%02d", id - kDayBase + 1);
      return buf;
    case TokenKind::kWeekday:
      return std::string("WEEKDAY_") + kWeekdays[id - kWeekdayBase];
    case TokenKind::kText:
      std::snprintf(buf, sizeof(buf), "TEXT_%d", id - kTextBase);
      return buf;
  }
  return "?";
}

int Vocabulary::amount_bin(double abs_amount) const {
  if (!fitted()) throw Error(ErrorCategory::kInternal, "vocabulary bins not fitted");
  auto it = std::upper_bound(amount_bin_edges.begin(), amount_bin_edges.end(), abs_amount);
  return int(it - amount_bin_edges.begin());
}

static uint64_t pack_pair(int a, int b) { return (uint64_t(uint32_t(a)) << 32) | uint32_t(b); }

void Vocabulary::rebuild_tables() {
  text_bytes_.clear();
  text_bytes_.reserve(256 + merges.size());
  for (int b = 0; b < 256; ++b) text_bytes_.push_back(std::string(1, char(b)));
  merge_rank_.clear();
  for (size_t i = 0; i < merges.size(); ++i) {
    auto [l, r] = merges[i];
    int merged = kTextBase + 256 + int(i);
    if (l < kTextBase || r < kTextBase || l >= merged || r >= merged) {
      throw Error(ErrorCategory::kData, "merge operands out of range");
    }
    merge_rank_[pack_pair(l, r)] = merged;
    text_bytes_.push_back(text_bytes_[l - kTextBase] + text_bytes_[r - kTextBase]);
  }
}

const std::string& Vocabulary::token_bytes(int text_id) const {
  return text_bytes_.at(size_t(text_id - kTextBase));
}

std::vector<int> Vocabulary::encode_text(const std::string& s) const {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (unsigned char c : s) ids.push_back(kTextBase + c);
  if (merge_rank_.empty() && !merges.empty()) {
    throw Error(ErrorCategory::kInternal, "vocabulary tables not rebuilt");
  }
  while (ids.size() >= 2) {
    // lowest-id merge wins; merge ids increase with training order
    int best_merged = -1;
    for (size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = merge_rank_.find(pack_pair(ids[i], ids[i + 1]));
      if (it != merge_rank_.end() && (best_merged < 0 || it->second < best_merged)) {
        best_merged = it->second;
      }
    }
    if (best_merged < 0) break;
    auto [l, r] = merges[size_t(best_merged - kTextBase - 256)];
    std::vector<int> next;
    next.reserve(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && ids[i] == l && ids[i + 1] == r) {
        next.push_back(best_merged);
        ++i;
      } else {
        next.push_back(ids[i]);
      }
    }
    ids.swap(next);
  }
  return ids;
}

void train_text_tokenizer(Vocabulary& v, std::span<const std::string> corpus,
                          int target_text_vocab) {
  if (corpus.empty()) throw Error(ErrorCategory::kConfig, "BPE corpus is empty");
  if (target_text_vocab < 256) {
    throw Error(ErrorCategory::kConfig, "target_text_vocab below base alphabet size");
  }
  v.merges.clear();
  v.rebuild_tables();

  // Dedupe corpus strings; merges act on each unique string weighted by count.
  std::map<std::string, int64_t> uniq;
  for (const std::string& s : corpus) ++uniq[s];
  std::vector<std::pair<std::vector<int>, int64_t>> seqs;
  seqs.reserve(uniq.size());
  for (const auto& [s, n] : uniq) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (unsigned char c : s) ids.push_back(kTextBase + c);
    seqs.emplace_back(std::move(ids), n);
  }

  const int budget = target_text_vocab - 256;
  std::vector<std::string> bytes_of;  // token id - kTextBase -> byte string
  for (int b = 0; b < 256; ++b) bytes_of.push_back(std::string(1, char(b)));

  for (int m = 0; m < budget; ++m) {
    std::unordered_map<uint64_t, int64_t> counts;
    for (const auto& [ids, n] : seqs) {
      for (size_t i = 0; i + 1 < ids.size(); ++i) counts[pack_pair(ids[i], ids[i + 1])] += n;
    }
    uint64_t best = 0;
    int64_t best_count = 0;
    for (const auto& [pair, n] : counts) {
      if (n < best_count) continue;
      if (n > best_count) {
        best = pair;
        best_count = n;
        continue;
      }
      const std::string& bl = bytes_of[int(best >> 32) - kTextBase];
      const std::string& br = bytes_of[int(uint32_t(best)) - kTextBase];
      const std::string& cl = bytes_of[int(pair >> 32) - kTextBase];
      const std::string& cr = bytes_of[int(uint32_t(pair)) - kTextBase];
      if (std::tie(cl, cr) < std::tie(bl, br)) best = pair;
    }
    if (best_count < 2) break;
    int l = int(best >> 32), r = int(uint32_t(best));
    int merged = kTextBase + 256 + int(v.merges.size());
    v.merges.emplace_back(l, r);
    bytes_of.push_back(bytes_of[l - kTextBase] + bytes_of[r - kTextBase]);
    for (auto& [ids, n] : seqs) {
      for (size_t i = 0; i + 1 < ids.size();) {
        if (ids[i] == l && ids[i + 1] == r) {
          ids[i] = merged;
          ids.erase(ids.begin() + long(i) + 1);
        } else {
          ++i;
        }
      }
    }
  }
  v.rebuild_tables();
}

void fit_amount_bins(Vocabulary& v, std::span<const double> abs_amounts) {
  std::vector<double> xs(abs_amounts.begin(), abs_amounts.end());
  for (double& x : xs) x = std::fabs(x);
  std::sort(xs.begin(), xs.end());
  size_t distinct = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (i == 0 || xs[i] != xs[i - 1]) ++distinct;
  }
  if (distinct < kNumAmountBins) {
    throw Error(ErrorCategory::kConfig,
                "need at least 21 distinct |amount| values to fit bins, got " +
                    std::to_string(distinct));
  }
  const size_t n = xs.size();
  v.amount_bin_edges.resize(20);
  for (int k = 1; k <= 20; ++k) {
    double pos = double(k) / 21.0 * double(n - 1);
    size_t lo = size_t(pos);
    double frac = pos - double(lo);
    double e = xs[lo];
    if (frac > 0.0 && lo + 1 < n) e += frac * (xs[lo + 1] - xs[lo]);
    v.amount_bin_edges[size_t(k - 1)] = e;
  }
  for (size_t k = 1; k < 20; ++k) {
    if (v.amount_bin_edges[k] <= v.amount_bin_edges[k - 1]) {
      v.amount_bin_edges[k] =
          std::nextafter(v.amount_bin_edges[k - 1], std::numeric_limits<double>::infinity());
    }
  }
}

std::vector<int> tokenize_transaction(const core::Transaction& t, const Vocabulary& v) {
  if (!v.fitted()) throw Error(ErrorCategory::kInternal, "vocabulary not fitted");
  core::CivilDate c = core::civil_from_timestamp(t.date);
  std::vector<int> out;
  out.push_back(kSignBase + (t.amount_cents < 0 ? 1 : 0));  // zero counts as inflow
  out.push_back(kAmountBase + v.amount_bin(std::fabs(double(t.amount_cents) / 100.0)));
  out.push_back(kMonthBase + c.month - 1);
  out.push_back(kDayBase + c.day - 1);
  out.push_back(kWeekdayBase + c.weekday - 1);
  std::vector<int> desc = v.encode_text(t.description);
  out.insert(out.end(), desc.begin(), desc.end());
  return out;
}

TokenSequence encode_user(const core::UserHistory& h, const Vocabulary& v, int max_len,
                          EncodeDiagnostics* diag) {
  if (max_len < 7) throw Error(ErrorCategory::kConfig, "max_len must be at least 7");
  std::vector<std::vector<int>> blocks;
  blocks.reserve(h.transactions.size());
  for (const core::Transaction& t : h.transactions) {
    std::vector<int> b = tokenize_transaction(t, v);
    if (int(b.size()) > max_len - 1) {
      b.resize(size_t(std::max(6, max_len - 1)));  // keep 5 specials + >= 1 desc token
      if (diag) ++diag->truncated_descriptions;
    }
    blocks.push_back(std::move(b));
  }

  // Keep the most recent whole transactions that fit in max_len - 1 (BOS).
  int budget = max_len - 1;
  size_t first_kept = blocks.size();
  int used = 0;
  for (size_t i = blocks.size(); i-- > 0;) {
    int cost = int(blocks[i].size()) + (first_kept < blocks.size() ? 1 : 0);
    if (used + cost > budget) break;
    used += cost;
    first_kept = i;
  }
  if (diag) diag->dropped_transactions += int(first_kept);

  TokenSequence seq;
  seq.tokens.push_back(kBos);
  for (size_t i = first_kept; i < blocks.size(); ++i) {
    if (i > first_kept) seq.tokens.push_back(kSep);
    int start = int(seq.tokens.size());
    seq.tokens.insert(seq.tokens.end(), blocks[i].begin(), blocks[i].end());
    seq.boundaries.emplace_back(start, int(seq.tokens.size()));
  }
  return seq;
}

double tokens_per_transaction(std::span<const core::UserHistory> histories,
                              const Vocabulary& v) {
  int64_t total = 0, count = 0;
  for (const core::UserHistory& h : histories) {
    for (const core::Transaction& t : h.transactions) {
      total += int64_t(tokenize_transaction(t, v).size());
      ++count;
    }
  }
  if (count == 0) throw Error(ErrorCategory::kData, "no transactions in dataset");
  return double(total) / double(count) + 1.0;  // +1 amortized separator
}

SpecialPrefix decode_special_prefix(std::span<const int> block) {
  if (block.size() < 5) throw Error(ErrorCategory::kData, "block shorter than special prefix");
  auto expect = [&](int idx, TokenKind kind, int base) {
    if (token_kind(block[size_t(idx)]) != kind) {
      throw Error(ErrorCategory::kData, "unexpected token kind at prefix position " +
                                            std::to_string(idx));
    }
    return block[size_t(idx)] - base;
  };
  SpecialPrefix p;
  p.sign = expect(0, TokenKind::kSign, kSignBase);
  p.bin = expect(1, TokenKind::kAmount, kAmountBase);
  p.month = expect(2, TokenKind::kMonth, kMonthBase) + 1;
  p.day = expect(3, TokenKind::kDay, kDayBase) + 1;
  p.weekday = expect(4, TokenKind::kWeekday, kWeekdayBase) + 1;
  return p;
}

// --- serialization ----------------------------------------------------------

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  out << "txnfm-vocab 1\n";
  out << "reserved PAD=" << kPad << " BOS=" << kBos << " SEP=" << kSep << "\n";
  out << "amount_bin_edges " << amount_bin_edges.size() << "\n";
  char buf[40];
  for (double e : amount_bin_edges) {
    std::snprintf(buf, sizeof(buf), "%.17g", e);
    out << buf << "\n";
  }
  out << "special_tokens " << kNumSpecial << "\n";
  for (int id = kSignBase; id < kTextBase; ++id) {
    out << token_name(id) << " " << id << "\n";
  }
  out << "text_base 256\n";
  out << "merges " << merges.size() << "\n";
  for (auto [l, r] : merges) out << l << " " << r << "\n";
  return out.str();
}

Vocabulary Vocabulary::deserialize(const std::string& content) {
  std::istringstream in(content);
  std::string word;
  int version = 0;
  in >> word >> version;
  if (word != "txnfm-vocab" || version != 1) {
    throw Error(ErrorCategory::kData, "not a txnfm vocabulary file");
  }
  std::string line;
  std::getline(in, line);  // rest of header
  std::getline(in, line);  // reserved line
  Vocabulary v;
  size_t n_edges = 0;
  in >> word >> n_edges;
  if (word != "amount_bin_edges") throw Error(ErrorCategory::kData, "bad vocabulary file");
  v.amount_bin_edges.resize(n_edges);
  for (double& e : v.amount_bin_edges) in >> e;
  int n_special = 0;
  in >> word >> n_special;
  if (word != "special_tokens" || n_special != kNumSpecial) {
    throw Error(ErrorCategory::kData, "bad special token table");
  }
  for (int i = 0; i < n_special; ++i) {
    std::string name;
    int id;
    in >> name >> id;
    if (id != kSignBase + i || name != token_name(id)) {
      throw Error(ErrorCategory::kData, "special token table mismatch at " + name);
    }
  }
  int text_base = 0;
  in >> word >> text_base;
  if (word != "text_base" || text_base != 256) throw Error(ErrorCategory::kData, "bad text base");
  size_t n_merges = 0;
  in >> word >> n_merges;
  if (word != "merges") throw Error(ErrorCategory::kData, "bad merges section");
  v.merges.resize(n_merges);
  for (auto& [l, r] : v.merges) in >> l >> r;
  if (!in) throw Error(ErrorCategory::kData, "truncated vocabulary file");
  v.rebuild_tables();
  return v;
}

uint64_t Vocabulary::hash() const { return fnv1a64(serialize()); }

void Vocabulary::save(const std::filesystem::path& path) const {
  atomic_write_file(path, serialize());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  return deserialize(read_text_file(path));
}

}  // namespace txnfm::tok
