#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "txnfm/core.hpp"

namespace txnfm::tok {

// Token id layout. Reserved ids first, then the 73 feature tokens, then the
// text partition (256 byte tokens followed by one id per BPE merge).
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kSep = 2;
inline constexpr int kSignBase = 3;     // 2 ids: inflow, outflow
inline constexpr int kAmountBase = 5;   // 21 bin ids
inline constexpr int kMonthBase = 26;   // 12 ids
inline constexpr int kDayBase = 38;     // 31 ids
inline constexpr int kWeekdayBase = 69; // 7 ids, ISO Mon..Sun
inline constexpr int kTextBase = 76;    // 256 byte ids, then merges
inline constexpr int kNumAmountBins = 21;
inline constexpr int kNumSpecial = 2 + 21 + 12 + 31 + 7;  // 73

enum class TokenKind { kReserved, kSign, kAmount, kMonth, kDay, kWeekday, kText };

TokenKind token_kind(int id);
std::string token_name(int id);  // stable display name for special/reserved ids

struct Vocabulary {
  std::vector<double> amount_bin_edges;           // 20, strictly increasing
  std::vector<std::pair<int, int>> merges;        // ordered; operands are earlier ids

  int size() const { return kTextBase + 256 + int(merges.size()); }
  bool fitted() const { return amount_bin_edges.size() == 20; }

  // Index of the bin for |amount|: the number of edges <= |amount|, in 0..20.
  int amount_bin(double abs_amount) const;

  std::vector<int> encode_text(const std::string& s) const;
  const std::string& token_bytes(int text_id) const;  // byte string of a text token

  uint64_t hash() const;
  std::string serialize() const;
  static Vocabulary deserialize(const std::string& content);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  void rebuild_tables();  // recompute derived lookup tables after edits

 private:
  std::unordered_map<uint64_t, int> merge_rank_;  // (left,right) -> merged id
  std::vector<std::string> text_bytes_;           // per text token
};

struct TokenSequence {
  std::vector<int> tokens;
  std::vector<std::pair<int, int>> boundaries;  // [start, end) per transaction
};

struct EncodeDiagnostics {
  int truncated_descriptions = 0;  // transactions whose description was cut to fit
  int dropped_transactions = 0;    // whole oldest transactions dropped for budget
};

// BPE over raw bytes of each corpus string. Merges are learned by repeatedly
// fusing the most frequent adjacent pair; ties go to the lexicographically
// smallest (left bytes, right bytes) pair. Training stops early when no pair
// occurs at least twice.
void train_text_tokenizer(Vocabulary& v, std::span<const std::string> corpus,
                          int target_text_vocab);

// Edges at the k/21 empirical quantiles (k = 1..20, linear interpolation) of
// |amount|. Requires at least 21 distinct values. Collided edges are nudged
// up to the next representable double.
void fit_amount_bins(Vocabulary& v, std::span<const double> abs_amounts);

std::vector<int> tokenize_transaction(const core::Transaction& t, const Vocabulary& v);

TokenSequence encode_user(const core::UserHistory& h, const Vocabulary& v, int max_len,
                          EncodeDiagnostics* diag = nullptr);

// Corpus mean tokens per transaction: mean block length plus one amortized
// separator. Errors on an empty dataset.
double tokens_per_transaction(std::span<const core::UserHistory> histories,
                              const Vocabulary& v);

struct SpecialPrefix {
  int sign = 0;  // 0 inflow, 1 outflow
  int bin = 0;
  int month = 0;
  int day = 0;
  int weekday = 0;
};

// Recovers the five structured attributes from the head of a transaction block.
SpecialPrefix decode_special_prefix(std::span<const int> block);

}  // namespace txnfm::tok
