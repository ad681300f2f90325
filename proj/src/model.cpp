#include "txnfm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "txnfm/rng.hpp"

namespace txnfm::model {

using tensor::Dense;
using tensor::Tape;
using tensor::Var;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCategory::kConfig, m); };
  if (n_layers < 1) fail("n_layers must be positive");
  if (n_heads < 1) fail("n_heads must be positive");
  if (d_model < 1 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff < 1) fail("d_ff must be positive");
  if (vocab_size < tok::kNumSpecial + 3) fail("vocab_size too small for the token layout");
  if (max_context < 8) fail("max_context must be at least 8");
  if (dropout < 0 || dropout >= 1) fail("dropout must be in [0, 1)");
}

namespace {

template <typename P, typename Fn>
void walk(P& p, Fn&& fn) {
  fn("tok_emb", p.tok_emb);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    auto& L = p.layers[l];
    fn(pre + "ln1_g", L.ln1_g);
    fn(pre + "ln1_b", L.ln1_b);
    fn(pre + "wq", L.wq);
    fn(pre + "bq", L.bq);
    fn(pre + "wk", L.wk);
    fn(pre + "bk", L.bk);
    fn(pre + "wv", L.wv);
    fn(pre + "bv", L.bv);
    fn(pre + "wo", L.wo);
    fn(pre + "bo", L.bo);
    fn(pre + "ln2_g", L.ln2_g);
    fn(pre + "ln2_b", L.ln2_b);
    fn(pre + "w1", L.w1);
    fn(pre + "b1", L.b1);
    fn(pre + "w2", L.w2);
    fn(pre + "b2", L.b2);
  }
  fn("final_norm_g", p.lnf_g);
  fn("final_norm_b", p.lnf_b);
}

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

template <typename T>
TransformerParams<T> TransformerParams<T>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  TransformerParams<T> p;
  p.cfg = cfg;
  int d = cfg.d_model, ff = cfg.d_ff;
  p.tok_emb = Dense<T>({cfg.vocab_size, d});
  p.layers.resize(size_t(cfg.n_layers));
  for (auto& L : p.layers) {
    L.ln1_g = Dense<T>({d}); L.ln1_b = Dense<T>({d});
    L.wq = Dense<T>({d, d}); L.bq = Dense<T>({d});
    L.wk = Dense<T>({d, d}); L.bk = Dense<T>({d});
    L.wv = Dense<T>({d, d}); L.bv = Dense<T>({d});
    L.wo = Dense<T>({d, d}); L.bo = Dense<T>({d});
    L.ln2_g = Dense<T>({d}); L.ln2_b = Dense<T>({d});
    L.w1 = Dense<T>({d, ff}); L.b1 = Dense<T>({ff});
    L.w2 = Dense<T>({ff, d}); L.b2 = Dense<T>({d});
  }
  p.lnf_g = Dense<T>({d});
  p.lnf_b = Dense<T>({d});

  // Residual-exit projections get the usual 1/sqrt(2L) shrink so the stream
  // variance stays bounded at init.
  double resid_std = 0.02 / std::sqrt(2.0 * cfg.n_layers);
  walk(p, [&](const std::string& name, Dense<T>& t) {
    if (ends_with(name, "_g")) {
      t.fill(T(1));
    } else if (t.shape.size() == 1) {
      t.fill(T(0));
    } else {
      rng::Stream rs(seed, "init." + name);
      double std = (ends_with(name, "wo") || ends_with(name, "w2")) ? resid_std : 0.02;
      t.fill_normal(rs, std);
    }
  });
  return p;
}

template <typename T>
void TransformerParams<T>::for_each(
    const std::function<void(const std::string&, Dense<T>&)>& fn) {
  walk(*this, fn);
}

template <typename T>
void TransformerParams<T>::for_each(
    const std::function<void(const std::string&, const Dense<T>&)>& fn) const {
  walk(*this, fn);
}

template <typename T>
std::vector<std::string> TransformerParams<T>::param_names() const {
  std::vector<std::string> names;
  for_each([&](const std::string& n, const Dense<T>&) { names.push_back(n); });
  return names;
}

template <typename T>
size_t TransformerParams<T>::param_count() const {
  size_t n = 0;
  for_each([&](const std::string&, const Dense<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
ForwardResult<T> forward(Tape<T>& tp, const TransformerParams<T>& p,
                         std::span<const int> tokens, const ForwardOptions& opt,
                         std::span<const LayerDeltas<T>> deltas) {
  int n = int(tokens.size());
  int eff = n;
  while (eff > 0 && tokens[size_t(eff - 1)] == tok::kPad) --eff;
  if (eff == 0) throw Error(ErrorCategory::kData, "sequence contains only PAD");
  if (eff > p.cfg.max_context) {
    throw Error(ErrorCategory::kData,
                "sequence of length " + std::to_string(eff) + " exceeds max_context " +
                    std::to_string(p.cfg.max_context));
  }
  for (int i = 0; i < eff; ++i) {
    if (tokens[size_t(i)] == tok::kPad) {
      throw Error(ErrorCategory::kData, "interior PAD violates right-padding");
    }
    if (tokens[size_t(i)] < 0 || tokens[size_t(i)] >= p.cfg.vocab_size) {
      throw Error(ErrorCategory::kData, "token id outside the model vocabulary");
    }
  }
  if (!deltas.empty() && deltas.size() != p.layers.size()) {
    throw Error(ErrorCategory::kInternal, "adapter deltas must cover every layer");
  }
  std::span<const int> ids = tokens.subspan(0, size_t(eff));

  auto base = [&](const Dense<T>& t) {
    return opt.train_base ? tp.param(t) : tp.constant(t);
  };
  auto adapter = [&](const Dense<T>& t) {
    return opt.train_adapters ? tp.param(t) : tp.constant(t);
  };
  auto drop_seed = [&](size_t layer, int site) {
    return rng::mix64(opt.dropout_seed ^ (uint64_t(layer) * 8 + uint64_t(site) + 1));
  };

  int H = p.cfg.n_heads, dh = p.cfg.head_dim();
  T inv_sqrt_dh = T(1.0 / std::sqrt(double(dh)));

  Var emb = base(p.tok_emb);
  Var x = tp.embedding_lookup(emb, ids);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    Var h = tp.layer_norm_affine(x, base(L.ln1_g), base(L.ln1_b));
    Var q = tp.add(tp.matmul(h, base(L.wq)), base(L.bq));
    Var k = tp.add(tp.matmul(h, base(L.wk)), base(L.bk));
    Var v = tp.add(tp.matmul(h, base(L.wv)), base(L.bv));
    if (!deltas.empty()) {
      const LayerDeltas<T>& dl = deltas[l];
      if (dl.qa != nullptr) {
        Var lo = tp.matmul(h, adapter(*dl.qa), false, true);      // [n, r]
        q = tp.add(q, tp.scale(tp.matmul(lo, adapter(*dl.qb), false, true), dl.scale));
      }
      if (dl.va != nullptr) {
        Var lo = tp.matmul(h, adapter(*dl.va), false, true);
        v = tp.add(v, tp.scale(tp.matmul(lo, adapter(*dl.vb), false, true), dl.scale));
      }
    }
    std::vector<Var> heads;
    heads.reserve(size_t(H));
    for (int hd = 0; hd < H; ++hd) {
      Var qh = tp.slice_cols(q, hd * dh, (hd + 1) * dh);
      Var kh = tp.slice_cols(k, hd * dh, (hd + 1) * dh);
      Var vh = tp.slice_cols(v, hd * dh, (hd + 1) * dh);
      Var att = tp.causal_softmax(tp.scale(tp.matmul(qh, kh, false, true), inv_sqrt_dh));
      heads.push_back(tp.matmul(att, vh));
    }
    Var ctx = H == 1 ? heads[0] : tp.concat_cols(heads);
    Var att_out = tp.add(tp.matmul(ctx, base(L.wo)), base(L.bo));
    att_out = tp.dropout(att_out, p.cfg.dropout, opt.train, drop_seed(l, 0));
    x = tp.add(x, att_out);

    Var h2 = tp.layer_norm_affine(x, base(L.ln2_g), base(L.ln2_b));
    Var ffn = tp.add(tp.matmul(tp.gelu(tp.add(tp.matmul(h2, base(L.w1)), base(L.b1))),
                               base(L.w2)),
                     base(L.b2));
    ffn = tp.dropout(ffn, p.cfg.dropout, opt.train, drop_seed(l, 1));
    x = tp.add(x, ffn);
  }
  Var xf = tp.layer_norm_affine(x, base(p.lnf_g), base(p.lnf_b));
  Var logits = tp.matmul(xf, emb, false, true);
  return {logits, xf, eff};
}

template <typename T>
Var ntp_loss(Tape<T>& tp, Var logits, std::span<const int> tokens, int effective_len,
             bool* warned) {
  std::vector<int> targets(size_t(effective_len), tok::kPad);
  for (int t = 0; t + 1 < effective_len; ++t) targets[size_t(t)] = tokens[size_t(t + 1)];
  if (effective_len <= 1 && warned != nullptr) *warned = true;
  return tp.cross_entropy(logits, targets, tok::kPad, tensor::Reduction::kMean);
}

PretrainResult pretrain(std::span<const tok::TokenSequence> corpus, const PretrainConfig& cfg,
                        uint64_t vocab_hash) {
  cfg.model.validate();
  if (corpus.empty()) throw Error(ErrorCategory::kData, "pretraining corpus is empty");
  if (cfg.steps < 1 || cfg.batch_size < 1) {
    throw Error(ErrorCategory::kConfig, "steps and batch_size must be positive");
  }

  PretrainResult res;
  res.params = TransformerParams<float>::init(cfg.model, cfg.seed);
  tensor::AdamWF optim({cfg.lr, 0.9f, 0.999f, 1e-8f, cfg.weight_decay});

  std::vector<std::pair<std::string, tensor::DenseF*>> slots;
  res.params.for_each([&](const std::string& n, tensor::DenseF& t) {
    slots.emplace_back(n, &t);
  });

  auto save_ckpt = [&](const std::string& name, int step) {
    if (cfg.out_dir.empty()) return;
    std::map<std::string, std::string> meta;
    meta["vocab_hash"] = hex64(vocab_hash);
    meta["seed"] = std::to_string(cfg.seed);
    meta["steps"] = std::to_string(step);
    save_transformer(std::filesystem::path(cfg.out_dir) / name, res.params, meta);
  };

  double ema = -1;
  for (int step = 0; step < cfg.steps; ++step) {
    float lr_t = cfg.lr;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
      lr_t = cfg.lr * float(step + 1) / float(cfg.warmup_steps);
    }
    optim.set_lr(lr_t);

    rng::Stream bs(cfg.seed, "batch", uint64_t(step));
    std::vector<size_t> batch(size_t(cfg.batch_size));
    for (auto& b : batch) b = size_t(bs.below(corpus.size()));

    int64_t total_targets = 0;
    for (size_t b : batch) {
      const auto& tk = corpus[b].tokens;
      int eff = int(tk.size());
      while (eff > 0 && tk[size_t(eff - 1)] == tok::kPad) --eff;
      total_targets += std::max(0, eff - 1);
    }
    if (total_targets == 0) {
      throw Error(ErrorCategory::kData, "batch contains no prediction targets");
    }

    tensor::GradSink<float> sink;
    double loss_sum = 0;
    for (size_t bi = 0; bi < batch.size(); ++bi) {
      const auto& tk = corpus[batch[bi]].tokens;
      tensor::TapeF tp;
      ForwardOptions opt;
      opt.train = true;
      opt.train_base = true;
      opt.dropout_seed = rng::mix64(cfg.seed ^ (uint64_t(step) * 131071 + bi));
      ForwardResult<float> fr = forward(tp, res.params, tk, opt);
      std::vector<int> targets(size_t(fr.effective_len), tok::kPad);
      for (int t = 0; t + 1 < fr.effective_len; ++t) targets[size_t(t)] = tk[size_t(t + 1)];
      Var ce = tp.cross_entropy(fr.logits, targets, tok::kPad, tensor::Reduction::kSum);
      loss_sum += double(tp.value(ce).v[0]);
      tp.backward(ce, 1.0f / float(total_targets));
      std::unordered_map<const void*, tensor::DenseF> grads;
      tp.export_grads(grads);
      sink.add(grads);
    }
    double loss = loss_sum / double(total_targets);
    if (!std::isfinite(loss)) {
      save_ckpt("diverged.ckpt", step);
      throw Error(ErrorCategory::kInternal,
                  "pretraining loss became non-finite at step " + std::to_string(step) +
                      (cfg.out_dir.empty() ? "" : "; diagnostic checkpoint written"));
    }

    for (auto& [name, t] : slots) {
      const tensor::DenseF* g = sink.find(t);
      if (g == nullptr) continue;
      float wd = t->shape.size() >= 2 ? cfg.weight_decay : 0.0f;
      optim.step(*t, *g, wd);
    }

    res.steps_run = step + 1;
    if (step % std::max(1, cfg.log_every) == 0 || step == cfg.steps - 1) {
      res.loss_curve.emplace_back(step, loss);
    }
    ema = ema < 0 ? loss : 0.9 * ema + 0.1 * loss;
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      save_ckpt("step" + std::to_string(step + 1) + ".ckpt", step + 1);
    }
    if (cfg.stop_below_loss > 0 && step >= cfg.warmup_steps && ema < cfg.stop_below_loss) {
      res.early_stopped = true;
      break;
    }
  }

  if (!cfg.out_dir.empty()) {
    std::string csv = "step,loss\n";
    char buf[64];
    for (auto& [s, l] : res.loss_curve) {
      std::snprintf(buf, sizeof buf, "%d,%.6f\n", s, l);
      csv += buf;
    }
    atomic_write_file(std::filesystem::path(cfg.out_dir) / "loss.csv", csv);
    save_ckpt("model.ckpt", res.steps_run);
  }
  return res;
}

tensor::DenseF user_embedding(const TransformerParams<float>& p, std::span<const int> tokens) {
  tensor::TapeF tp;
  ForwardOptions opt;
  opt.train = false;
  opt.train_base = false;
  ForwardResult<float> fr = forward(tp, p, tokens, opt);
  const tensor::DenseF& h = tp.value(fr.last_hidden);
  int d = h.shape[1];
  tensor::DenseF out({d});
  std::copy_n(&h.v[size_t(fr.effective_len - 1) * size_t(d)], d, out.v.data());
  return out;
}

double structural_type_mass(const TransformerParams<float>& p,
                            std::span<const tok::TokenSequence> corpus, int max_sequences) {
  int V = p.cfg.vocab_size;
  auto next_range = [&](int id) -> std::pair<int, int> {
    switch (tok::token_kind(id)) {
      case tok::TokenKind::kReserved:
        if (id == tok::kBos || id == tok::kSep) return {tok::kSignBase, tok::kSignBase + 2};
        return {-1, -1};
      case tok::TokenKind::kSign: return {tok::kAmountBase, tok::kAmountBase + 21};
      case tok::TokenKind::kAmount: return {tok::kMonthBase, tok::kMonthBase + 12};
      case tok::TokenKind::kMonth: return {tok::kDayBase, tok::kDayBase + 31};
      case tok::TokenKind::kDay: return {tok::kWeekdayBase, tok::kWeekdayBase + 7};
      case tok::TokenKind::kWeekday: return {tok::kTextBase, V};
      case tok::TokenKind::kText: return {-1, -1};
    }
    return {-1, -1};
  };

  double total_mass = 0;
  int64_t n_positions = 0;
  int used = 0;
  for (const tok::TokenSequence& seq : corpus) {
    if (used >= max_sequences) break;
    ++used;
    tensor::TapeF tp;
    ForwardOptions opt;
    opt.train = false;
    opt.train_base = false;
    ForwardResult<float> fr = forward(tp, p, seq.tokens, opt);
    const tensor::DenseF& logits = tp.value(fr.logits);
    for (int t = 0; t + 1 < fr.effective_len; ++t) {
      auto [lo, hi] = next_range(seq.tokens[size_t(t)]);
      if (lo < 0) continue;
      const float* row = &logits.v[size_t(t) * size_t(V)];
      float mx = row[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      double denom = 0, num = 0;
      for (int j = 0; j < V; ++j) {
        double e = std::exp(double(row[j] - mx));
        denom += e;
        if (j >= lo && j < hi) num += e;
      }
      total_mass += num / denom;
      ++n_positions;
    }
  }
  if (n_positions == 0) {
    throw Error(ErrorCategory::kData, "no grammar-determined positions found");
  }
  return total_mass / double(n_positions);
}

double unigram_entropy(std::span<const tok::TokenSequence> corpus) {
  std::unordered_map<int, int64_t> counts;
  int64_t total = 0;
  for (const auto& seq : corpus) {
    for (int t : seq.tokens) {
      if (t == tok::kPad) continue;
      ++counts[t];
      ++total;
    }
  }
  if (total == 0) throw Error(ErrorCategory::kData, "empty corpus");
  double h = 0;
  for (const auto& [_, c] : counts) {
    double pr = double(c) / double(total);
    h -= pr * std::log(pr);
  }
  return h;
}

void save_transformer(const std::filesystem::path& path, const TransformerParams<float>& p,
                      const std::map<std::string, std::string>& metadata) {
  ckpt::Checkpoint ck;
  ck.metadata = metadata;
  ck.metadata["model.n_layers"] = std::to_string(p.cfg.n_layers);
  ck.metadata["model.n_heads"] = std::to_string(p.cfg.n_heads);
  ck.metadata["model.d_model"] = std::to_string(p.cfg.d_model);
  ck.metadata["model.d_ff"] = std::to_string(p.cfg.d_ff);
  ck.metadata["model.vocab_size"] = std::to_string(p.cfg.vocab_size);
  ck.metadata["model.max_context"] = std::to_string(p.cfg.max_context);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", p.cfg.dropout);
  ck.metadata["model.dropout"] = buf;
  p.for_each([&](const std::string& n, const tensor::DenseF& t) { ck.add(n, t); });
  ck.save(path.string());
}

TransformerParams<float> load_transformer(const std::filesystem::path& path,
                                          std::map<std::string, std::string>* metadata) {
  ckpt::Checkpoint ck = ckpt::Checkpoint::load(path.string());
  auto meta_int = [&](const std::string& key) {
    auto it = ck.metadata.find(key);
    if (it == ck.metadata.end()) {
      throw Error(ErrorCategory::kData, path.string() + ": missing metadata key " + key);
    }
    return std::stoi(it->second);
  };
  ModelConfig cfg;
  cfg.n_layers = meta_int("model.n_layers");
  cfg.n_heads = meta_int("model.n_heads");
  cfg.d_model = meta_int("model.d_model");
  cfg.d_ff = meta_int("model.d_ff");
  cfg.vocab_size = meta_int("model.vocab_size");
  cfg.max_context = meta_int("model.max_context");
  cfg.dropout = std::stod(ck.metadata.at("model.dropout"));
  TransformerParams<float> p = TransformerParams<float>::init(cfg, 0);
  p.for_each([&](const std::string& n, tensor::DenseF& t) {
    const tensor::DenseF& s = ck.require(n);
    if (s.shape != t.shape) {
      throw Error(ErrorCategory::kData,
                  path.string() + ": tensor " + n + " has shape " + tensor::shape_str(s.shape) +
                      ", expected " + tensor::shape_str(t.shape));
    }
    t = s;
  });
  if (metadata != nullptr) *metadata = ck.metadata;
  return p;
}

template struct TransformerParams<float>;
template struct TransformerParams<double>;
template ForwardResult<float> forward(Tape<float>&, const TransformerParams<float>&,
                                      std::span<const int>, const ForwardOptions&,
                                      std::span<const LayerDeltas<float>>);
template ForwardResult<double> forward(Tape<double>&, const TransformerParams<double>&,
                                       std::span<const int>, const ForwardOptions&,
                                       std::span<const LayerDeltas<double>>);
template Var ntp_loss(Tape<float>&, Var, std::span<const int>, int, bool*);
template Var ntp_loss(Tape<double>&, Var, std::span<const int>, int, bool*);

}  // namespace txnfm::model
