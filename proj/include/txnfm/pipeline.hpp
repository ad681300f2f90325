#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "txnfm/config.hpp"
#include "txnfm/core.hpp"
#include "txnfm/eval.hpp"
#include "txnfm/finetune.hpp"
#include "txnfm/fusion.hpp"
#include "txnfm/model.hpp"
#include "txnfm/synth.hpp"
#include "txnfm/tokenizer.hpp"

namespace txnfm::pipe {

using HistoryIndex = std::unordered_map<std::string, const core::UserHistory*>;

HistoryIndex index_histories(std::span<const core::UserHistory> histories);

// Transactions strictly before the cutoff; the leakage boundary for both
// pretraining (cutoff = first test month) and per-row encodings (cutoff =
// the row's own score date).
core::UserHistory history_before(const core::UserHistory& h, core::Timestamp cutoff);

// Amount bins from the quantiles of all |amounts|, BPE merges from all
// descriptions, both over the full history set.
tok::Vocabulary fit_vocabulary(std::span<const core::UserHistory> histories, int text_tokens);

std::vector<tok::TokenSequence> pretrain_corpus(std::span<const core::UserHistory> histories,
                                                const tok::Vocabulary& vocab, int max_context,
                                                core::Timestamp cutoff,
                                                std::span<const core::Source> sources = {});

std::vector<int> encode_history_row(const core::UserHistory& h, core::Timestamp score_date,
                                    const tok::Vocabulary& vocab, int max_context,
                                    std::span<const core::Source> sources = {});

std::vector<ft::Example> make_examples(const HistoryIndex& index,
                                       std::span<const core::LabeledRow> rows,
                                       const tok::Vocabulary& vocab, int max_context,
                                       std::span<const core::Source> sources = {});

std::vector<fuse::JointExample> make_joint_examples(const HistoryIndex& index,
                                                    std::span<const core::LabeledRow> rows,
                                                    const tok::Vocabulary& vocab, int max_context,
                                                    std::span<const core::Source> sources = {});

// Final-hidden-state embeddings, optionally through adapters.
std::vector<tensor::DenseF> embed_examples(const model::TransformerParams<float>& base,
                                           const ft::LoraParams* lora,
                                           std::span<const ft::Example> examples);

// Deterministic subsample of n rows, chronological order preserved.
std::vector<core::LabeledRow> subsample_rows(std::span<const core::LabeledRow> rows, int n,
                                             uint64_t seed);

struct EncoderOpts {
  model::ModelConfig model;
  uint64_t seed = 1;
  int steps = 600;
  int batch_size = 8;
  float lr = 3e-4f;
  float weight_decay = 0.01f;
  int warmup_steps = 20;
  double stop_below_loss = -1;
};

// Pretrains on the histories truncated at `cutoff` (and filtered to
// `sources` when given). Returns the trained weights plus the loss curve.
model::PretrainResult pretrain_encoder(std::span<const core::UserHistory> histories,
                                       const tok::Vocabulary& vocab, const EncoderOpts& opts,
                                       core::Timestamp cutoff,
                                       std::span<const core::Source> sources = {});

struct StageScores {
  double auc = 0.0;
  std::vector<double> scores;  // aligned with the dataset's test rows
};

StageScores run_tabular(const synth::Dataset& data, fuse::TabularArch arch,
                        const fuse::FusionConfig& fc, const fuse::TrainConfig& tc);

StageScores run_early(const synth::Dataset& data, const tok::Vocabulary& vocab,
                      const model::TransformerParams<float>& base, fuse::TabularArch arch,
                      const fuse::FusionConfig& fc, const fuse::TrainConfig& tc,
                      std::span<const core::Source> sources = {});

struct LateOpts {
  ft::FinetuneConfig finetune;
  double stage1_fraction = 0.2;
};

StageScores run_late(const synth::Dataset& data, const tok::Vocabulary& vocab,
                     const model::TransformerParams<float>& base, const LateOpts& lo,
                     fuse::TabularArch arch, const fuse::FusionConfig& fc,
                     const fuse::TrainConfig& tc);

StageScores run_joint(const synth::Dataset& data, const tok::Vocabulary& vocab,
                      const model::TransformerParams<float>& base, const fuse::JointConfig& jc);

// One source-ablation cell: pretrain on the subset under a fixed context
// budget, embed, and train the early-fusion classifier.
double ablation_cell_auc(const synth::Dataset& data, const tok::Vocabulary& vocab,
                         std::span<const core::Source> subset, int context_budget,
                         EncoderOpts enc, fuse::TabularArch arch, const fuse::FusionConfig& fc,
                         const fuse::TrainConfig& tc);

struct StabilityRow {
  std::string window;
  double challenger = 0.0;
  double baseline = 0.0;
  double delta = 0.0;
};

// Monthly-window AUC comparison on the test rows; windows where either side
// lacks both classes are skipped.
std::vector<StabilityRow> window_deltas(std::span<const core::LabeledRow> test_rows,
                                        std::span<const double> challenger,
                                        std::span<const double> baseline);

// --- file-based stages (the CLI surface) -----------------------------------

struct DataPaths {
  std::filesystem::path dir;
  std::filesystem::path transactions() const { return dir / "transactions.jsonl"; }
  std::filesystem::path train_rows() const { return dir / "train_rows.jsonl"; }
  std::filesystem::path test_rows() const { return dir / "test_rows.jsonl"; }
  std::filesystem::path schema() const { return dir / "schema.json"; }
  std::filesystem::path config() const { return dir / "config.json"; }
};

void stage_gen_data(const cfg::RunConfig& rc, const std::filesystem::path& out_dir);

synth::Dataset load_dataset(const DataPaths& paths);

// First day of the earliest test-row month: the pretraining history cutoff.
core::Timestamp test_cutoff(const synth::Dataset& data);

void stage_fit_vocab(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir);

void stage_pretrain(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                    const std::filesystem::path& vocab_path,
                    const std::filesystem::path& out_dir);

void stage_finetune(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                    const std::filesystem::path& vocab_path,
                    const std::filesystem::path& base_ckpt,
                    const std::filesystem::path& out_dir);

// Runs the configured fusion mode and writes test scores + a report.
void stage_fuse(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                const std::filesystem::path& vocab_path,
                const std::filesystem::path& base_ckpt, const std::filesystem::path& out_dir);

eval::EvalReport stage_eval(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                            const std::filesystem::path& scores_csv,
                            const std::filesystem::path& out_path);

// Sweep cells are independent; `jobs` > 1 runs them on a thread pool.
void stage_sweep(const cfg::RunConfig& rc, const std::filesystem::path& out_dir, int jobs = 1);

void stage_stability(const cfg::RunConfig& rc, const std::filesystem::path& out_dir);

void write_scores_csv(const std::filesystem::path& path,
                      std::span<const core::LabeledRow> rows, std::span<const double> scores);
std::vector<double> read_scores_csv(const std::filesystem::path& path,
                                    std::span<const core::LabeledRow> rows);

}  // namespace txnfm::pipe
