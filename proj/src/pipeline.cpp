#include "txnfm/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "txnfm/rng.hpp"

namespace txnfm::pipe {

using tensor::DenseF;

HistoryIndex index_histories(std::span<const core::UserHistory> histories) {
  HistoryIndex idx;
  idx.reserve(histories.size());
  for (const auto& h : histories) idx[h.user_id] = &h;
  return idx;
}

core::UserHistory history_before(const core::UserHistory& h, core::Timestamp cutoff) {
  core::UserHistory out;
  out.user_id = h.user_id;
  for (const auto& t : h.transactions) {
    if (t.date < cutoff) out.transactions.push_back(t);
  }
  return out;
}

tok::Vocabulary fit_vocabulary(std::span<const core::UserHistory> histories, int text_tokens) {
  std::vector<double> amounts;
  std::vector<std::string> texts;
  for (const auto& h : histories) {
    for (const auto& t : h.transactions) {
      amounts.push_back(std::abs(double(t.amount_cents)) / 100.0);
      texts.push_back(t.description);
    }
  }
  tok::Vocabulary v;
  tok::fit_amount_bins(v, amounts);
  tok::train_text_tokenizer(v, texts, text_tokens);
  return v;
}

std::vector<tok::TokenSequence> pretrain_corpus(std::span<const core::UserHistory> histories,
                                                const tok::Vocabulary& vocab, int max_context,
                                                core::Timestamp cutoff,
                                                std::span<const core::Source> sources) {
  std::vector<tok::TokenSequence> corpus;
  corpus.reserve(histories.size());
  for (const auto& h : histories) {
    core::UserHistory trunc = history_before(h, cutoff);
    if (!sources.empty()) trunc = synth::filter_sources(trunc, sources);
    if (trunc.transactions.empty()) continue;
    corpus.push_back(tok::encode_user(trunc, vocab, max_context));
  }
  if (corpus.empty()) {
    throw Error(ErrorCategory::kData, "no user has any history before the cutoff");
  }
  return corpus;
}

std::vector<int> encode_history_row(const core::UserHistory& h, core::Timestamp score_date,
                                    const tok::Vocabulary& vocab, int max_context,
                                    std::span<const core::Source> sources) {
  core::UserHistory trunc = history_before(h, score_date);
  if (!sources.empty()) trunc = synth::filter_sources(trunc, sources);
  eval::assert_history_predates(trunc, score_date, h.user_id);
  return tok::encode_user(trunc, vocab, max_context).tokens;
}

std::vector<ft::Example> make_examples(const HistoryIndex& index,
                                       std::span<const core::LabeledRow> rows,
                                       const tok::Vocabulary& vocab, int max_context,
                                       std::span<const core::Source> sources) {
  std::vector<ft::Example> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    auto it = index.find(r.user_id);
    if (it == index.end()) {
      throw Error(ErrorCategory::kData, "row " + r.row_id + " references unknown user " +
                                            r.user_id);
    }
    ft::Example ex;
    ex.tokens = encode_history_row(*it->second, r.score_date, vocab, max_context, sources);
    ex.label = r.label;
    ex.row_id = r.row_id;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<fuse::JointExample> make_joint_examples(const HistoryIndex& index,
                                                    std::span<const core::LabeledRow> rows,
                                                    const tok::Vocabulary& vocab,
                                                    int max_context,
                                                    std::span<const core::Source> sources) {
  std::vector<fuse::JointExample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    auto it = index.find(r.user_id);
    if (it == index.end()) {
      throw Error(ErrorCategory::kData, "row " + r.row_id + " references unknown user " +
                                            r.user_id);
    }
    fuse::JointExample ex;
    ex.tokens = encode_history_row(*it->second, r.score_date, vocab, max_context, sources);
    ex.features = r.features;
    ex.label = r.label;
    ex.row_id = r.row_id;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<DenseF> embed_examples(const model::TransformerParams<float>& base,
                                   const ft::LoraParams* lora,
                                   std::span<const ft::Example> examples) {
  std::vector<model::LayerDeltas<float>> dl;
  if (lora != nullptr) dl = lora->deltas();
  std::vector<DenseF> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    tensor::TapeF tp;
    model::ForwardOptions opt;
    opt.train = false;
    opt.train_base = false;
    model::ForwardResult<float> fr = model::forward(tp, base, ex.tokens, opt, dl);
    const DenseF& h = tp.value(fr.last_hidden);
    int d = h.shape[1];
    DenseF e({d});
    std::copy_n(&h.v[size_t(fr.effective_len - 1) * size_t(d)], d, e.v.data());
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<core::LabeledRow> subsample_rows(std::span<const core::LabeledRow> rows, int n,
                                             uint64_t seed) {
  if (n <= 0) throw Error(ErrorCategory::kConfig, "subsample size must be positive");
  if (size_t(n) >= rows.size()) return {rows.begin(), rows.end()};
  std::vector<size_t> idx(rows.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng::Stream st(seed, "subsample");
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[size_t(st.below(i))]);
  idx.resize(size_t(n));
  std::sort(idx.begin(), idx.end());
  std::vector<core::LabeledRow> out;
  out.reserve(size_t(n));
  for (size_t i : idx) out.push_back(rows[i]);
  return out;
}

model::PretrainResult pretrain_encoder(std::span<const core::UserHistory> histories,
                                       const tok::Vocabulary& vocab, const EncoderOpts& opts,
                                       core::Timestamp cutoff,
                                       std::span<const core::Source> sources) {
  std::vector<tok::TokenSequence> corpus =
      pretrain_corpus(histories, vocab, opts.model.max_context, cutoff, sources);
  model::PretrainConfig pc;
  pc.model = opts.model;
  pc.model.vocab_size = vocab.size();
  pc.seed = opts.seed;
  pc.steps = opts.steps;
  pc.batch_size = opts.batch_size;
  pc.lr = opts.lr;
  pc.weight_decay = opts.weight_decay;
  pc.warmup_steps = opts.warmup_steps;
  pc.stop_below_loss = opts.stop_below_loss;
  return model::pretrain(corpus, pc, vocab.hash());
}

StageScores run_tabular(const synth::Dataset& data, fuse::TabularArch arch,
                        const fuse::FusionConfig& fc, const fuse::TrainConfig& tc) {
  fuse::FitResult r =
      fuse::train_tabular_only(data.train_rows, data.test_rows, data.schema, arch, fc, tc);
  return {r.test_auc, std::move(r.test_scores)};
}

StageScores run_early(const synth::Dataset& data, const tok::Vocabulary& vocab,
                      const model::TransformerParams<float>& base, fuse::TabularArch arch,
                      const fuse::FusionConfig& fc, const fuse::TrainConfig& tc,
                      std::span<const core::Source> sources) {
  HistoryIndex idx = index_histories(data.histories);
  int ctx = base.cfg.max_context;
  std::vector<ft::Example> train_ex = make_examples(idx, data.train_rows, vocab, ctx, sources);
  std::vector<ft::Example> test_ex = make_examples(idx, data.test_rows, vocab, ctx, sources);
  std::vector<DenseF> train_emb = embed_examples(base, nullptr, train_ex);
  std::vector<DenseF> test_emb = embed_examples(base, nullptr, test_ex);
  fuse::FitResult r = fuse::train_fused_frozen(data.train_rows, train_emb, data.test_rows,
                                               test_emb, data.schema, arch, fc, tc, nullptr);
  return {r.test_auc, std::move(r.test_scores)};
}

StageScores run_late(const synth::Dataset& data, const tok::Vocabulary& vocab,
                     const model::TransformerParams<float>& base, const LateOpts& lo,
                     fuse::TabularArch arch, const fuse::FusionConfig& fc,
                     const fuse::TrainConfig& tc) {
  if (data.train_rows.size() < 2) {
    throw Error(ErrorCategory::kData, "late fusion needs at least two training rows");
  }
  if (lo.stage1_fraction <= 0 || lo.stage1_fraction >= 1) {
    throw Error(ErrorCategory::kConfig, "stage1_fraction must be in (0, 1)");
  }
  std::vector<size_t> idx(data.train_rows.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng::Stream st(lo.finetune.seed, "stage1");
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[size_t(st.below(i))]);
  size_t n1 = std::max<size_t>(1, size_t(std::llround(lo.stage1_fraction * double(idx.size()))));
  n1 = std::min(n1, idx.size() - 1);

  std::set<std::string> stage1_ids;
  std::vector<core::LabeledRow> stage1_rows, stage2_rows;
  for (size_t i = 0; i < idx.size(); ++i) {
    const core::LabeledRow& r = data.train_rows[idx[i]];
    if (i < n1) {
      stage1_rows.push_back(r);
      stage1_ids.insert(r.row_id);
    } else {
      stage2_rows.push_back(r);
    }
  }
  std::sort(stage2_rows.begin(), stage2_rows.end(),
            [](const auto& a, const auto& b) { return a.score_date < b.score_date; });

  HistoryIndex hidx = index_histories(data.histories);
  int ctx = base.cfg.max_context;
  std::vector<ft::Example> stage1_ex = make_examples(hidx, stage1_rows, vocab, ctx);
  uint64_t vh = vocab.hash();
  ft::FinetuneResult fres = ft::finetune(base, stage1_ex, lo.finetune, vh, vh);
  const ft::LoraParams* lp = fres.used_lora ? &fres.lora : nullptr;

  std::vector<ft::Example> stage2_ex = make_examples(hidx, stage2_rows, vocab, ctx);
  std::vector<ft::Example> test_ex = make_examples(hidx, data.test_rows, vocab, ctx);
  std::vector<DenseF> stage2_emb = embed_examples(fres.base, lp, stage2_ex);
  std::vector<DenseF> test_emb = embed_examples(fres.base, lp, test_ex);
  fuse::FitResult r = fuse::train_fused_frozen(stage2_rows, stage2_emb, data.test_rows,
                                               test_emb, data.schema, arch, fc, tc, &stage1_ids);
  return {r.test_auc, std::move(r.test_scores)};
}

StageScores run_joint(const synth::Dataset& data, const tok::Vocabulary& vocab,
                      const model::TransformerParams<float>& base,
                      const fuse::JointConfig& jc) {
  HistoryIndex idx = index_histories(data.histories);
  int ctx = base.cfg.max_context;
  std::vector<fuse::JointExample> train_ex =
      make_joint_examples(idx, data.train_rows, vocab, ctx);
  std::vector<fuse::JointExample> test_ex = make_joint_examples(idx, data.test_rows, vocab, ctx);
  fuse::JointResult r = fuse::joint_fusion(base, train_ex, test_ex, data.schema, jc);
  return {r.test_auc, std::move(r.test_scores)};
}

double ablation_cell_auc(const synth::Dataset& data, const tok::Vocabulary& vocab,
                         std::span<const core::Source> subset, int context_budget,
                         EncoderOpts enc, fuse::TabularArch arch, const fuse::FusionConfig& fc,
                         const fuse::TrainConfig& tc) {
  if (subset.empty()) throw Error(ErrorCategory::kConfig, "source subset must not be empty");
  enc.model.max_context = context_budget;
  model::PretrainResult pre =
      pretrain_encoder(data.histories, vocab, enc, test_cutoff(data), subset);
  return run_early(data, vocab, pre.params, arch, fc, tc, subset).auc;
}

std::vector<StabilityRow> window_deltas(std::span<const core::LabeledRow> test_rows,
                                        std::span<const double> challenger,
                                        std::span<const double> baseline) {
  eval::EvalReport rc = eval::evaluate(challenger, test_rows, 0, "");
  eval::EvalReport rb = eval::evaluate(baseline, test_rows, 0, "");
  std::vector<StabilityRow> out;
  for (const auto& wc : rc.windows) {
    for (const auto& wb : rb.windows) {
      if (wb.label != wc.label) continue;
      out.push_back({wc.label, wc.auc, wb.auc, wc.auc - wb.auc});
      break;
    }
  }
  return out;
}

// --- file-based stages ------------------------------------------------------

void stage_gen_data(const cfg::RunConfig& rc, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  synth::GeneratorConfig gc = rc.generator;
  gc.seed = rc.seed;
  synth::Dataset data = synth::generate(gc);
  DataPaths paths{out_dir};
  core::write_transactions_jsonl(paths.transactions(), data.histories);
  core::write_rows_jsonl(paths.train_rows(), data.train_rows, data.schema);
  core::write_rows_jsonl(paths.test_rows(), data.test_rows, data.schema);
  core::write_schema_json(paths.schema(), data.schema);
  rc.save_resolved(paths.config());
}

synth::Dataset load_dataset(const DataPaths& paths) {
  synth::Dataset data;
  data.schema = core::read_schema_json(paths.schema());
  core::TransactionFile tf = core::read_transactions_jsonl(paths.transactions());
  data.histories = std::move(tf.histories);
  data.train_rows = core::read_rows_jsonl(paths.train_rows(), data.schema);
  data.test_rows = core::read_rows_jsonl(paths.test_rows(), data.schema);
  return data;
}

core::Timestamp test_cutoff(const synth::Dataset& data) {
  if (data.test_rows.empty()) throw Error(ErrorCategory::kData, "dataset has no test rows");
  core::CivilDate c = core::civil_from_timestamp(data.test_rows.front().score_date);
  return core::timestamp_from_civil(c.year, c.month, 1);
}

void stage_fit_vocab(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                     const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  synth::Dataset data = load_dataset(DataPaths{data_dir});
  tok::Vocabulary v = fit_vocabulary(data.histories, rc.vocab_text_tokens);
  v.save(out_dir / "vocab.txt");
  rc.save_resolved(out_dir / "config.json");
}

namespace {

uint64_t parse_hex64(const std::string& s, const std::string& what) {
  if (s.empty()) throw Error(ErrorCategory::kData, what + " is empty");
  char* end = nullptr;
  uint64_t v = std::strtoull(s.c_str(), &end, 16);
  if (end == nullptr || *end != '\0') {
    throw Error(ErrorCategory::kData, what + " is not a hex value: " + s);
  }
  return v;
}

void check_vocab_hash(const std::map<std::string, std::string>& meta,
                      const tok::Vocabulary& vocab, const std::string& origin) {
  auto it = meta.find("vocab_hash");
  if (it == meta.end()) {
    throw Error(ErrorCategory::kMissingArtifact, origin + ": no vocabulary hash recorded");
  }
  uint64_t stored = parse_hex64(it->second, origin + ": vocab_hash");
  if (stored != vocab.hash()) {
    throw Error(ErrorCategory::kHashMismatch,
                origin + ": checkpoint vocabulary " + it->second + " does not match " +
                    hex64(vocab.hash()));
  }
}

}  // namespace

void stage_pretrain(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                    const std::filesystem::path& vocab_path,
                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  synth::Dataset data = load_dataset(DataPaths{data_dir});
  tok::Vocabulary vocab = tok::Vocabulary::load(vocab_path);
  std::vector<tok::TokenSequence> corpus =
      pretrain_corpus(data.histories, vocab, rc.model.max_context, test_cutoff(data));
  model::PretrainConfig pc;
  pc.model = rc.model;
  pc.model.vocab_size = vocab.size();
  pc.seed = rc.seed;
  pc.steps = rc.pretrain_steps;
  pc.batch_size = rc.pretrain_batch;
  pc.lr = rc.pretrain_lr;
  pc.weight_decay = rc.pretrain_weight_decay;
  pc.warmup_steps = rc.pretrain_warmup;
  pc.log_every = rc.pretrain_log_every;
  pc.checkpoint_every = rc.pretrain_checkpoint_every;
  pc.stop_below_loss = rc.pretrain_stop_below;
  pc.out_dir = out_dir.string();
  model::pretrain(corpus, pc, vocab.hash());
  rc.save_resolved(out_dir / "config.json");
}

void stage_finetune(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                    const std::filesystem::path& vocab_path,
                    const std::filesystem::path& base_ckpt,
                    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  synth::Dataset data = load_dataset(DataPaths{data_dir});
  tok::Vocabulary vocab = tok::Vocabulary::load(vocab_path);
  std::map<std::string, std::string> meta;
  model::TransformerParams<float> base = model::load_transformer(base_ckpt, &meta);
  check_vocab_hash(meta, vocab, base_ckpt.string());

  HistoryIndex idx = index_histories(data.histories);
  std::vector<ft::Example> train_ex =
      make_examples(idx, data.train_rows, vocab, base.cfg.max_context);
  ft::FinetuneConfig fc = rc.finetune;
  fc.seed = rc.seed;
  fc.out_dir = out_dir.string();
  ft::FinetuneResult res = ft::finetune(base, train_ex, fc, vocab.hash(), vocab.hash());

  std::vector<ft::Example> test_ex =
      make_examples(idx, data.test_rows, vocab, base.cfg.max_context);
  std::vector<double> scores =
      ft::score_batch(res.base, res.used_lora ? &res.lora : nullptr, res.head, test_ex);
  write_scores_csv(out_dir / "scores.csv", data.test_rows, scores);
  eval::EvalReport report =
      eval::evaluate(scores, data.test_rows, rc.seed, hex64(rc.fingerprint()));
  eval::write_report_json(out_dir / "report.json", report);
  rc.save_resolved(out_dir / "config.json");
}

void stage_fuse(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                const std::filesystem::path& vocab_path,
                const std::filesystem::path& base_ckpt, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  synth::Dataset data = load_dataset(DataPaths{data_dir});
  fuse::TrainConfig tc = rc.fusion_train;
  tc.seed = rc.seed;
  StageScores result;

  if (rc.fusion_mode == fuse::FusionMode::kTabular) {
    result = run_tabular(data, rc.fusion_arch, rc.fusion, tc);
  } else {
    tok::Vocabulary vocab = tok::Vocabulary::load(vocab_path);
    std::map<std::string, std::string> meta;
    model::TransformerParams<float> base = model::load_transformer(base_ckpt, &meta);
    check_vocab_hash(meta, vocab, base_ckpt.string());
    switch (rc.fusion_mode) {
      case fuse::FusionMode::kEarly:
        result = run_early(data, vocab, base, rc.fusion_arch, rc.fusion, tc);
        break;
      case fuse::FusionMode::kLate: {
        LateOpts lo;
        lo.finetune = rc.finetune;
        lo.finetune.seed = rc.seed;
        lo.stage1_fraction = rc.stage1_fraction;
        result = run_late(data, vocab, base, lo, rc.fusion_arch, rc.fusion, tc);
        break;
      }
      case fuse::FusionMode::kJoint: {
        fuse::JointConfig jc;
        jc.fusion = rc.fusion;
        jc.arch = rc.fusion_arch;
        jc.train = tc;
        jc.lora = rc.finetune.lora;
        jc.full_finetune = rc.fusion_full_finetune;
        jc.encoder_lr = rc.fusion_encoder_lr;
        result = run_joint(data, vocab, base, jc);
        break;
      }
      case fuse::FusionMode::kTabular: break;
    }
  }

  write_scores_csv(out_dir / "scores.csv", data.test_rows, result.scores);
  eval::EvalReport report =
      eval::evaluate(result.scores, data.test_rows, rc.seed, hex64(rc.fingerprint()));
  eval::write_report_json(out_dir / "report.json", report);
  rc.save_resolved(out_dir / "config.json");
}

eval::EvalReport stage_eval(const cfg::RunConfig& rc, const std::filesystem::path& data_dir,
                            const std::filesystem::path& scores_csv,
                            const std::filesystem::path& out_path) {
  synth::Dataset data = load_dataset(DataPaths{data_dir});
  std::vector<double> scores = read_scores_csv(scores_csv, data.test_rows);
  eval::EvalReport report =
      eval::evaluate(scores, data.test_rows, rc.seed, hex64(rc.fingerprint()));
  if (!out_path.empty()) {
    if (!out_path.parent_path().empty()) {
      std::filesystem::create_directories(out_path.parent_path());
    }
    eval::write_report_json(out_path, report);
  }
  return report;
}

namespace {

model::ModelConfig sized_model(const model::ModelConfig& base, int d_model, int max_context) {
  model::ModelConfig m = base;
  m.d_model = d_model;
  m.d_ff = 4 * d_model;
  m.max_context = max_context;
  if (d_model % m.n_heads != 0) {
    throw Error(ErrorCategory::kConfig,
                "d_model level " + std::to_string(d_model) + " is not divisible by " +
                    std::to_string(m.n_heads) + " heads");
  }
  return m;
}

struct JointCell {
  const synth::Dataset* data;
  const tok::Vocabulary* vocab;
  const cfg::RunConfig* rc;

  double run(uint64_t seed, int context, int d_model, int n_rows) {
    EncoderOpts enc;
    enc.model = sized_model(rc->model, d_model, context);
    enc.seed = seed;
    enc.steps = rc->pretrain_steps;
    enc.batch_size = rc->pretrain_batch;
    enc.lr = rc->pretrain_lr;
    enc.weight_decay = rc->pretrain_weight_decay;
    enc.warmup_steps = rc->pretrain_warmup;
    enc.stop_below_loss = rc->pretrain_stop_below;
    model::PretrainResult pre =
        pretrain_encoder(data->histories, *vocab, enc, test_cutoff(*data));

    synth::Dataset level = *data;
    level.train_rows = subsample_rows(data->train_rows, n_rows, seed);

    fuse::JointConfig jc;
    jc.fusion = rc->fusion;
    jc.arch = rc->fusion_arch;
    jc.train = rc->fusion_train;
    jc.train.seed = seed;
    jc.lora = rc->finetune.lora;
    jc.full_finetune = rc->fusion_full_finetune;
    jc.encoder_lr = rc->fusion_encoder_lr;
    return run_joint(level, *vocab, pre.params, jc).auc;
  }
};

}  // namespace

void stage_sweep(const cfg::RunConfig& rc, const std::filesystem::path& out_dir, int jobs) {
  if (jobs < 1) throw Error(ErrorCategory::kConfig, "jobs must be positive");
  std::filesystem::create_directories(out_dir);
  synth::GeneratorConfig gc = rc.generator;
  gc.seed = rc.seed;
  gc.n_train_rows = std::max(gc.n_train_rows,
                             *std::max_element(rc.data_levels.begin(), rc.data_levels.end()));
  synth::Dataset data = synth::generate(gc);
  tok::Vocabulary vocab = fit_vocabulary(data.histories, rc.vocab_text_tokens);

  struct Cell {
    std::string axis, level;
    uint64_t seed;
    int ctx, dm, nr;
  };
  std::vector<Cell> cells;
  int base_ctx = rc.context_levels.front();
  int base_d = rc.model.d_model;
  int small_rows = rc.data_levels.front();
  int large_rows = rc.data_levels.back();
  for (uint64_t seed : rc.eval_seeds) {
    for (int ctx : rc.context_levels) {
      cells.push_back({"context", std::to_string(ctx), seed, ctx, base_d, small_rows});
    }
    for (int nr : rc.data_levels) {
      cells.push_back({"data", std::to_string(nr), seed, base_ctx, base_d, nr});
    }
    for (int dm : rc.d_model_levels) {
      cells.push_back({"d_model", std::to_string(dm), seed, base_ctx, dm, large_rows});
    }
  }

  std::vector<eval::SweepRow> rows(cells.size());
  std::atomic<size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&]() {
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        JointCell cell{&data, &vocab, &rc};
        const Cell& c = cells[i];
        auto t0 = std::chrono::steady_clock::now();
        double auc = cell.run(c.seed, c.ctx, c.dm, c.nr);
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rows[i] = {c.axis, c.level, c.seed, auc, secs};
      } catch (...) {
        std::lock_guard<std::mutex> lk(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(cells.size());
        return;
      }
    }
  };
  int n_threads = std::min<int>(jobs, int(cells.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  eval::write_sweep_csv(out_dir / "sweep.csv", rows);

  std::ostringstream summary;
  auto medians = [&](const std::string& axis, const std::vector<std::string>& levels) {
    summary << axis << ":\n";
    for (const auto& lv : levels) {
      std::vector<double> vals;
      for (const auto& r : rows) {
        if (r.axis == axis && r.level == lv) vals.push_back(r.auc);
      }
      char buf[64];
      std::snprintf(buf, sizeof buf, "  %-8s median auc %.4f over %zu seeds\n", lv.c_str(),
                    eval::median(vals), vals.size());
      summary << buf;
    }
  };
  std::vector<std::string> ctx_levels, data_lv, dm_levels;
  for (int c : rc.context_levels) ctx_levels.push_back(std::to_string(c));
  for (int n : rc.data_levels) data_lv.push_back(std::to_string(n));
  for (int d : rc.d_model_levels) dm_levels.push_back(std::to_string(d));
  medians("context", ctx_levels);
  medians("data", data_lv);
  medians("d_model", dm_levels);
  atomic_write_file(out_dir / "summary.txt", summary.str());
  rc.save_resolved(out_dir / "config.json");
}

void stage_stability(const cfg::RunConfig& rc, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  synth::GeneratorConfig gc = rc.generator;
  gc.seed = rc.seed;
  synth::Dataset data = synth::generate(gc);
  tok::Vocabulary vocab = fit_vocabulary(data.histories, rc.vocab_text_tokens);

  std::string csv = "window,seed,challenger,baseline,delta\n";
  std::map<std::string, std::vector<double>> per_window;
  for (uint64_t seed : rc.eval_seeds) {
    EncoderOpts enc;
    enc.model = rc.model;
    enc.seed = seed;
    enc.steps = rc.pretrain_steps;
    enc.batch_size = rc.pretrain_batch;
    enc.lr = rc.pretrain_lr;
    enc.weight_decay = rc.pretrain_weight_decay;
    enc.warmup_steps = rc.pretrain_warmup;
    enc.stop_below_loss = rc.pretrain_stop_below;
    model::PretrainResult pre = pretrain_encoder(data.histories, vocab, enc, test_cutoff(data));

    fuse::JointConfig jc;
    jc.fusion = rc.fusion;
    jc.arch = rc.fusion_arch;
    jc.train = rc.fusion_train;
    jc.train.seed = seed;
    jc.lora = rc.finetune.lora;
    jc.full_finetune = rc.fusion_full_finetune;
    jc.encoder_lr = rc.fusion_encoder_lr;
    StageScores challenger = run_joint(data, vocab, pre.params, jc);

    fuse::TrainConfig tc = rc.fusion_train;
    tc.seed = seed;
    StageScores baseline = run_tabular(data, rc.fusion_arch, rc.fusion, tc);

    std::vector<StabilityRow> deltas =
        window_deltas(data.test_rows, challenger.scores, baseline.scores);
    char buf[160];
    for (const auto& d : deltas) {
      std::snprintf(buf, sizeof buf, "%s,%llu,%.6f,%.6f,%.6f\n", d.window.c_str(),
                    (unsigned long long)seed, d.challenger, d.baseline, d.delta);
      csv += buf;
      per_window[d.window].push_back(d.delta);
    }
  }
  atomic_write_file(out_dir / "stability.csv", csv);

  std::ostringstream summary;
  for (auto& [w, ds] : per_window) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s median delta %+.4f over %zu seeds\n", w.c_str(),
                  eval::median(ds), ds.size());
    summary << buf;
  }
  atomic_write_file(out_dir / "summary.txt", summary.str());
  rc.save_resolved(out_dir / "config.json");
}

void write_scores_csv(const std::filesystem::path& path,
                      std::span<const core::LabeledRow> rows, std::span<const double> scores) {
  if (rows.size() != scores.size()) {
    throw Error(ErrorCategory::kInternal, "scores do not align with rows");
  }
  std::string csv = "row_id,score\n";
  char buf[96];
  for (size_t i = 0; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s,%.17g\n", rows[i].row_id.c_str(), scores[i]);
    csv += buf;
  }
  atomic_write_file(path, csv);
}

std::vector<double> read_scores_csv(const std::filesystem::path& path,
                                    std::span<const core::LabeledRow> rows) {
  std::string text = read_text_file(path);
  std::unordered_map<std::string, double> by_id;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "row_id,score") {
    throw Error(ErrorCategory::kData, path.string() + ": missing scores header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    size_t comma = line.find(',');
    if (comma == std::string::npos) {
      throw Error(ErrorCategory::kData, path.string() + ": malformed line: " + line);
    }
    by_id[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
  }
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    auto it = by_id.find(r.row_id);
    if (it == by_id.end()) {
      throw Error(ErrorCategory::kData, path.string() + ": no score for row " + r.row_id);
    }
    out.push_back(it->second);
  }
  return out;
}

}  // namespace txnfm::pipe
