#include "txnfm/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "txnfm/rng.hpp"

namespace txnfm::ft {

using tensor::Dense;
using tensor::DenseF;
using tensor::TapeF;
using tensor::Var;

void LoraConfig::validate() const {
  if (rank < 1) throw Error(ErrorCategory::kConfig, "lora rank must be positive");
  if (!(alpha > 0)) throw Error(ErrorCategory::kConfig, "lora alpha must be positive");
  if (!on_query && !on_value) {
    throw Error(ErrorCategory::kConfig, "lora needs at least one target projection");
  }
}

void HeadConfig::validate() const {
  if (d_in < 2) throw Error(ErrorCategory::kConfig, "head input width must be at least 2");
  if (hidden() < 1) throw Error(ErrorCategory::kConfig, "head hidden width must be positive");
  if (dropout < 0 || dropout >= 1) {
    throw Error(ErrorCategory::kConfig, "head dropout must be in [0, 1)");
  }
}

LoraParams LoraParams::init(const LoraConfig& cfg, const model::ModelConfig& mc, uint64_t seed) {
  cfg.validate();
  mc.validate();
  LoraParams p;
  p.cfg = cfg;
  p.layers.resize(size_t(mc.n_layers));
  int d = mc.d_model, r = cfg.rank;
  for (size_t l = 0; l < p.layers.size(); ++l) {
    std::string pre = "lora.layer" + std::to_string(l) + ".";
    auto& L = p.layers[l];
    if (cfg.on_query) {
      L.qa = DenseF({r, d});
      rng::Stream rs(seed, pre + "qa");
      L.qa.fill_normal(rs, 0.02);
      L.qb = DenseF({d, r});  // zero: adapter starts as the identity
    }
    if (cfg.on_value) {
      L.va = DenseF({r, d});
      rng::Stream rs(seed, pre + "va");
      L.va.fill_normal(rs, 0.02);
      L.vb = DenseF({d, r});
    }
  }
  return p;
}

std::vector<model::LayerDeltas<float>> LoraParams::deltas() const {
  std::vector<model::LayerDeltas<float>> out(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    auto& d = out[l];
    d.scale = cfg.scale();
    if (layers[l].qa.numel() > 0) { d.qa = &layers[l].qa; d.qb = &layers[l].qb; }
    if (layers[l].va.numel() > 0) { d.va = &layers[l].va; d.vb = &layers[l].vb; }
  }
  return out;
}

namespace {

template <typename P, typename Fn>
void walk_lora(P& p, Fn&& fn) {
  for (size_t l = 0; l < p.layers.size(); ++l) {
    std::string pre = "layer" + std::to_string(l) + ".";
    auto& L = p.layers[l];
    if (L.qa.numel() > 0) { fn(pre + "lora_qa", L.qa); fn(pre + "lora_qb", L.qb); }
    if (L.va.numel() > 0) { fn(pre + "lora_va", L.va); fn(pre + "lora_vb", L.vb); }
  }
}

template <typename P, typename Fn>
void walk_head(P& p, Fn&& fn) {
  fn("head.w1", p.w1);
  fn("head.b1", p.b1);
  fn("head.w2", p.w2);
  fn("head.b2", p.b2);
}

}  // namespace

void LoraParams::for_each(const std::function<void(const std::string&, DenseF&)>& fn) {
  walk_lora(*this, fn);
}
void LoraParams::for_each(const std::function<void(const std::string&, const DenseF&)>& fn) const {
  walk_lora(*this, fn);
}

HeadParams HeadParams::init(const HeadConfig& cfg, uint64_t seed) {
  cfg.validate();
  HeadParams p;
  p.cfg = cfg;
  int h = cfg.hidden();
  p.w1 = DenseF({cfg.d_in, h});
  rng::Stream r1(seed, "head.w1");
  p.w1.fill_normal(r1, 0.02);
  p.b1 = DenseF({h});
  p.w2 = DenseF({h, 1});
  rng::Stream r2(seed, "head.w2");
  p.w2.fill_normal(r2, 0.02);
  p.b2 = DenseF({1});
  return p;
}

void HeadParams::for_each(const std::function<void(const std::string&, DenseF&)>& fn) {
  walk_head(*this, fn);
}
void HeadParams::for_each(const std::function<void(const std::string&, const DenseF&)>& fn) const {
  walk_head(*this, fn);
}

Var head_logit(TapeF& tp, const HeadParams& head, Var x, bool train, bool train_params,
               uint64_t dropout_seed) {
  auto P = [&](const DenseF& t) { return train_params ? tp.param(t) : tp.constant(t); };
  Var h = tp.relu(tp.add(tp.matmul(x, P(head.w1)), P(head.b1)));
  h = tp.dropout(h, head.cfg.dropout, train, dropout_seed);
  return tp.add(tp.matmul(h, P(head.w2)), P(head.b2));
}

FinetuneResult finetune(const model::TransformerParams<float>& base,
                        std::span<const Example> examples, const FinetuneConfig& cfg,
                        uint64_t vocab_hash, uint64_t base_vocab_hash) {
  if (vocab_hash != base_vocab_hash) {
    throw Error(ErrorCategory::kData,
                "vocabulary mismatch: dataset " + hex64(vocab_hash) + " vs checkpoint " +
                    hex64(base_vocab_hash));
  }
  if (examples.empty()) throw Error(ErrorCategory::kData, "no finetuning examples");
  if (cfg.epochs < 1 || cfg.batch_size < 1) {
    throw Error(ErrorCategory::kConfig, "epochs and batch_size must be positive");
  }

  HeadConfig hc = cfg.head;
  if (hc.d_in == 0) hc.d_in = base.cfg.d_model;
  if (hc.d_in != base.cfg.d_model) {
    throw Error(ErrorCategory::kConfig, "head input width must equal d_model");
  }

  FinetuneResult res;
  res.base = base;
  res.used_lora = !cfg.full_finetune;
  if (res.used_lora) res.lora = LoraParams::init(cfg.lora, base.cfg, cfg.seed);
  res.head = HeadParams::init(hc, cfg.seed);

  std::vector<std::pair<std::string, DenseF*>> enc_slots, head_slots;
  if (cfg.full_finetune) {
    res.base.for_each([&](const std::string& n, DenseF& t) { enc_slots.emplace_back(n, &t); });
  } else {
    res.lora.for_each([&](const std::string& n, DenseF& t) { enc_slots.emplace_back(n, &t); });
  }
  res.head.for_each([&](const std::string& n, DenseF& t) { head_slots.emplace_back(n, &t); });

  tensor::AdamWF enc_opt({cfg.lr, 0.9f, 0.999f, 1e-8f, cfg.weight_decay});
  float head_lr = cfg.head_lr > 0 ? cfg.head_lr : cfg.lr;
  tensor::AdamWF head_opt({head_lr, 0.9f, 0.999f, 1e-8f, cfg.weight_decay});

  std::vector<size_t> order(examples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng::Stream sh(cfg.seed, "shuffle", uint64_t(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[size_t(sh.below(i))]);
    }
    for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size), ++step) {
      size_t n = std::min(size_t(cfg.batch_size), order.size() - at);
      tensor::GradSink<float> sink;
      double loss_sum = 0;
      for (size_t bi = 0; bi < n; ++bi) {
        const Example& ex = examples[order[at + bi]];
        TapeF tp;
        model::ForwardOptions opt;
        opt.train = true;
        opt.train_base = cfg.full_finetune;
        opt.train_adapters = res.used_lora;
        opt.dropout_seed = rng::mix64(cfg.seed ^ (uint64_t(step) * 2654435761u + bi));
        std::vector<model::LayerDeltas<float>> dl;
        if (res.used_lora) dl = res.lora.deltas();
        model::ForwardResult<float> fr = forward(tp, res.base, ex.tokens, opt, dl);
        Var last = tp.slice_rows(fr.last_hidden, fr.effective_len - 1, fr.effective_len);
        Var logit = head_logit(tp, res.head, last, true, true,
                               rng::mix64(opt.dropout_seed ^ 0x9e3779b97f4a7c15ull));
        int label = ex.label;
        Var loss = tp.bce_with_logits(logit, std::span<const int>(&label, 1));
        loss_sum += double(tp.value(loss).v[0]);
        tp.backward(loss, 1.0f / float(n));
        std::unordered_map<const void*, DenseF> grads;
        tp.export_grads(grads);
        sink.add(grads);
      }
      double loss = loss_sum / double(n);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCategory::kInternal,
                    "finetuning loss became non-finite at step " + std::to_string(step));
      }
      for (auto& [name, t] : enc_slots) {
        const DenseF* g = sink.find(t);
        if (g != nullptr) enc_opt.step(*t, *g, t->shape.size() >= 2 ? cfg.weight_decay : 0.0f);
      }
      for (auto& [name, t] : head_slots) {
        const DenseF* g = sink.find(t);
        if (g != nullptr) head_opt.step(*t, *g, t->shape.size() >= 2 ? cfg.weight_decay : 0.0f);
      }
      if (step % std::max(1, cfg.log_every) == 0) res.loss_curve.emplace_back(step, loss);
      res.steps_run = step + 1;
    }
  }

  if (!cfg.out_dir.empty()) {
    std::string csv = "step,loss\n";
    char buf[64];
    for (auto& [s, l] : res.loss_curve) {
      std::snprintf(buf, sizeof buf, "%d,%.6f\n", s, l);
      csv += buf;
    }
    atomic_write_file(std::filesystem::path(cfg.out_dir) / "finetune_loss.csv", csv);
    std::map<std::string, std::string> meta;
    meta["vocab_hash"] = hex64(vocab_hash);
    meta["seed"] = std::to_string(cfg.seed);
    save_finetuned(std::filesystem::path(cfg.out_dir) / "adapter.ckpt", res, meta);
  }
  return res;
}

double score(const model::TransformerParams<float>& base, const LoraParams* lora,
             const HeadParams& head, std::span<const int> tokens) {
  TapeF tp;
  model::ForwardOptions opt;
  opt.train = false;
  opt.train_base = false;
  std::vector<model::LayerDeltas<float>> dl;
  if (lora != nullptr) dl = lora->deltas();
  model::ForwardResult<float> fr = forward(tp, base, tokens, opt, dl);
  Var last = tp.slice_rows(fr.last_hidden, fr.effective_len - 1, fr.effective_len);
  Var logit = head_logit(tp, head, last, false, false, 0);
  double z = double(tp.value(logit).v[0]);
  return 1.0 / (1.0 + std::exp(-z));
}

std::vector<double> score_batch(const model::TransformerParams<float>& base,
                                const LoraParams* lora, const HeadParams& head,
                                std::span<const Example> examples) {
  std::vector<double> out(examples.size());
  for (size_t i = 0; i < examples.size(); ++i) {
    out[i] = score(base, lora, head, examples[i].tokens);
  }
  return out;
}

model::TransformerParams<float> merge_adapters(const model::TransformerParams<float>& base,
                                               const LoraParams& lora) {
  if (lora.layers.size() != base.layers.size()) {
    throw Error(ErrorCategory::kInternal, "adapter layer count does not match the base model");
  }
  model::TransformerParams<float> out = base;
  int d = base.cfg.d_model;
  float s = lora.cfg.scale();
  auto fold = [&](DenseF& w, const DenseF& a, const DenseF& b) {
    int r = a.shape[0];
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) {
        double acc = 0;
        for (int k = 0; k < r; ++k) acc += double(a.v[size_t(k) * d + i]) * double(b.v[size_t(j) * r + k]);
        w.v[size_t(i) * d + j] += s * float(acc);
      }
    }
  };
  for (size_t l = 0; l < lora.layers.size(); ++l) {
    const auto& L = lora.layers[l];
    if (L.qa.numel() > 0) fold(out.layers[l].wq, L.qa, L.qb);
    if (L.va.numel() > 0) fold(out.layers[l].wv, L.va, L.vb);
  }
  return out;
}

std::vector<double> logistic_probe(const std::vector<DenseF>& train_x,
                                   std::span<const int> train_y,
                                   const std::vector<DenseF>& test_x, uint64_t seed, int steps,
                                   float lr) {
  if (train_x.empty() || train_x.size() != train_y.size()) {
    throw Error(ErrorCategory::kData, "probe needs matching embeddings and labels");
  }
  int d = train_x[0].shape[0];
  DenseF x({int(train_x.size()), d});
  for (size_t i = 0; i < train_x.size(); ++i) {
    if (train_x[i].shape[0] != d) throw Error(ErrorCategory::kData, "ragged embedding widths");
    std::copy_n(train_x[i].v.data(), size_t(d), &x.v[i * size_t(d)]);
  }
  DenseF w({d, 1});
  DenseF b({1});
  (void)seed;  // zero init is already deterministic
  tensor::AdamWF opt({lr, 0.9f, 0.999f, 1e-8f, 0.0f});
  for (int s = 0; s < steps; ++s) {
    TapeF tp;
    Var z = tp.add(tp.matmul(tp.constant(x), tp.param(w)), tp.param(b));
    Var loss = tp.bce_with_logits(z, train_y);
    tp.backward(loss);
    std::unordered_map<const void*, DenseF> grads;
    tp.export_grads(grads);
    auto gw = grads.find(&w);
    auto gb = grads.find(&b);
    if (gw != grads.end()) opt.step(w, gw->second);
    if (gb != grads.end()) opt.step(b, gb->second);
  }
  std::vector<double> out(test_x.size());
  for (size_t i = 0; i < test_x.size(); ++i) {
    double z = double(b.v[0]);
    for (int j = 0; j < d; ++j) z += double(test_x[i].v[size_t(j)]) * double(w.v[size_t(j)]);
    out[i] = 1.0 / (1.0 + std::exp(-z));
  }
  return out;
}

void save_finetuned(const std::filesystem::path& path, const FinetuneResult& r,
                    const std::map<std::string, std::string>& metadata) {
  ckpt::Checkpoint ck;
  ck.metadata = metadata;
  ck.metadata["mode"] = r.used_lora ? "lora" : "full";
  ck.metadata["lora.rank"] = std::to_string(r.lora.cfg.rank);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", double(r.lora.cfg.alpha));
  ck.metadata["lora.alpha"] = buf;
  ck.metadata["lora.on_query"] = r.lora.cfg.on_query ? "1" : "0";
  ck.metadata["lora.on_value"] = r.lora.cfg.on_value ? "1" : "0";
  ck.metadata["head.d_in"] = std::to_string(r.head.cfg.d_in);
  ck.metadata["head.d_hidden"] = std::to_string(r.head.cfg.hidden());
  std::snprintf(buf, sizeof buf, "%.17g", r.head.cfg.dropout);
  ck.metadata["head.dropout"] = buf;
  r.head.for_each([&](const std::string& n, const DenseF& t) { ck.add(n, t); });
  if (r.used_lora) {
    r.lora.for_each([&](const std::string& n, const DenseF& t) { ck.add(n, t); });
  } else {
    r.base.for_each([&](const std::string& n, const DenseF& t) { ck.add("base." + n, t); });
  }
  ck.save(path.string());
}

FinetuneResult load_finetuned(const std::filesystem::path& path,
                              const model::TransformerParams<float>& base,
                              std::map<std::string, std::string>* metadata) {
  ckpt::Checkpoint ck = ckpt::Checkpoint::load(path.string());
  auto meta = [&](const std::string& k) -> const std::string& {
    auto it = ck.metadata.find(k);
    if (it == ck.metadata.end()) {
      throw Error(ErrorCategory::kData, path.string() + ": missing metadata key " + k);
    }
    return it->second;
  };
  FinetuneResult r;
  r.base = base;
  r.used_lora = meta("mode") == "lora";
  HeadConfig hc;
  hc.d_in = std::stoi(meta("head.d_in"));
  hc.d_hidden = std::stoi(meta("head.d_hidden"));
  hc.dropout = std::stod(meta("head.dropout"));
  r.head = HeadParams::init(hc, 0);
  auto restore = [&](const std::string& n, DenseF& t) {
    const DenseF& s = ck.require(n);
    if (s.shape != t.shape) {
      throw Error(ErrorCategory::kData, path.string() + ": tensor " + n + " has shape " +
                                            tensor::shape_str(s.shape) + ", expected " +
                                            tensor::shape_str(t.shape));
    }
    t = s;
  };
  r.head.for_each(restore);
  if (r.used_lora) {
    LoraConfig lc;
    lc.rank = std::stoi(meta("lora.rank"));
    lc.alpha = std::stof(meta("lora.alpha"));
    lc.on_query = meta("lora.on_query") == "1";
    lc.on_value = meta("lora.on_value") == "1";
    r.lora = LoraParams::init(lc, base.cfg, 0);
    r.lora.for_each(restore);
  } else {
    r.base.for_each([&](const std::string& n, DenseF& t) { restore("base." + n, t); });
  }
  if (metadata != nullptr) *metadata = ck.metadata;
  return r;
}

}  // namespace txnfm::ft
