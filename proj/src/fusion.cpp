#include "txnfm/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <unordered_map>

#include "txnfm/eval.hpp"
#include "txnfm/rng.hpp"

namespace txnfm::fuse {

using tensor::DenseF;
using tensor::TapeF;
using tensor::Var;

std::string embed_norm_name(EmbedNorm n) {
  switch (n) {
    case EmbedNorm::kLayer: return "layer";
    case EmbedNorm::kL2: return "l2";
    case EmbedNorm::kNone: return "none";
  }
  return "layer";
}

EmbedNorm parse_embed_norm(const std::string& s) {
  if (s == "layer") return EmbedNorm::kLayer;
  if (s == "l2") return EmbedNorm::kL2;
  if (s == "none") return EmbedNorm::kNone;
  throw Error(ErrorCategory::kConfig, "unknown embed_norm: " + s);
}

std::string fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::kTabular: return "tabular";
    case FusionMode::kEarly: return "early";
    case FusionMode::kLate: return "late";
    case FusionMode::kJoint: return "joint";
  }
  return "tabular";
}

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "tabular") return FusionMode::kTabular;
  if (s == "early") return FusionMode::kEarly;
  if (s == "late") return FusionMode::kLate;
  if (s == "joint") return FusionMode::kJoint;
  throw Error(ErrorCategory::kConfig, "unknown fusion_mode: " + s);
}

std::string tabular_arch_name(TabularArch a) {
  switch (a) {
    case TabularArch::kMlp: return "mlp";
    case TabularArch::kMlpPlr: return "mlp_plr";
    case TabularArch::kDcn: return "dcn";
    case TabularArch::kDcnPlr: return "dcn_plr";
    case TabularArch::kDcnPlrL2: return "dcn_plr_l2";
  }
  return "dcn_plr";
}

TabularArch parse_tabular_arch(const std::string& s) {
  if (s == "mlp") return TabularArch::kMlp;
  if (s == "mlp_plr") return TabularArch::kMlpPlr;
  if (s == "dcn") return TabularArch::kDcn;
  if (s == "dcn_plr") return TabularArch::kDcnPlr;
  if (s == "dcn_plr_l2") return TabularArch::kDcnPlrL2;
  throw Error(ErrorCategory::kConfig, "unknown tabular arch: " + s);
}

void FusionConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCategory::kConfig, m); };
  if (d_num < 1 || d_cat < 1) fail("embedding widths must be positive");
  if (plr_frequencies < 1) fail("plr_frequencies must be positive");
  if (!(plr_sigma > 0)) fail("plr_sigma must be positive");
  if (cross_layers < 0) fail("cross_layers must be non-negative");
  if (d_proj < 1) fail("d_proj must be positive");
  if (head_hidden < 1) fail("head_hidden must be positive");
  if (dropout < 0 || dropout >= 1) fail("dropout must be in [0, 1)");
}

double signed_log1p(double x) { return x >= 0 ? std::log1p(x) : -std::log1p(-x); }

std::pair<double, double> preprocess_numerical(const core::NumericalValue& v) {
  if (v.missing) return {0.0, 1.0};
  return {signed_log1p(v.value), 0.0};
}

int TabularTower::input_dim() const {
  int n_num = int(schema.n_num());
  int d = n_num * (uses_plr() ? cfg.d_num : 1) + n_num;
  if (uses_cross()) {
    d += int(schema.n_cat()) * cfg.d_cat;
  } else {
    for (int c : schema.categorical_cardinalities) d += c + 1;
  }
  return d;
}

int TabularTower::output_dim() const { return uses_cross() ? cfg.d_proj : input_dim(); }

TabularTower TabularTower::init(const FusionConfig& cfg, TabularArch arch,
                                const core::TabularSchema& schema, uint64_t seed) {
  cfg.validate();
  if (schema.n_num() == 0 && schema.n_cat() == 0) {
    throw Error(ErrorCategory::kConfig, "tabular schema is empty");
  }
  if (schema.n_cat() != schema.categorical_cardinalities.size()) {
    throw Error(ErrorCategory::kConfig, "schema cardinalities out of sync");
  }
  TabularTower t;
  t.cfg = cfg;
  t.arch = arch;
  t.schema = schema;
  t.num_mean.assign(schema.n_num(), 0.0);
  t.num_std.assign(schema.n_num(), 1.0);
  int k = cfg.plr_frequencies;
  if (t.uses_plr()) {
    t.plr.resize(schema.n_num());
    for (size_t j = 0; j < t.plr.size(); ++j) {
      std::string pre = "num" + std::to_string(j) + ".";
      auto& p = t.plr[j];
      p.freq = DenseF({1, k});
      rng::Stream fs(seed, pre + "freq");
      for (auto& f : p.freq.v) {
        double v = 0;
        while (std::abs(v) < 1e-3) v = fs.normal(0.0, cfg.plr_sigma);
        f = float(v);
      }
      p.w = DenseF({2 * k, cfg.d_num});
      rng::Stream ws(seed, pre + "w");
      p.w.fill_normal(ws, 0.02);
      p.b = DenseF({cfg.d_num});
    }
  }
  if (t.uses_cross()) {
    t.cat_tables.resize(schema.n_cat());
    for (size_t j = 0; j < t.cat_tables.size(); ++j) {
      t.cat_tables[j] = DenseF({schema.categorical_cardinalities[j] + 1, cfg.d_cat});
      rng::Stream cs(seed, "cat" + std::to_string(j) + ".table");
      t.cat_tables[j].fill_normal(cs, 0.02);
    }
    int d0 = t.input_dim();
    t.cross_w.resize(size_t(cfg.cross_layers));
    t.cross_b.resize(size_t(cfg.cross_layers));
    for (int l = 0; l < cfg.cross_layers; ++l) {
      t.cross_w[size_t(l)] = DenseF({d0, d0});
      rng::Stream xs(seed, "cross" + std::to_string(l) + ".w");
      t.cross_w[size_t(l)].fill_normal(xs, 0.02);
      t.cross_b[size_t(l)] = DenseF({d0});
    }
    t.proj_w = DenseF({d0, cfg.d_proj});
    rng::Stream ps(seed, "proj.w");
    t.proj_w.fill_normal(ps, 0.02);
    t.proj_b = DenseF({cfg.d_proj});
  }
  return t;
}

void TabularTower::fit_standardization(std::span<const core::LabeledRow> rows) {
  if (arch != TabularArch::kMlp) return;
  size_t n_num = schema.n_num();
  std::vector<double> sum(n_num, 0), sq(n_num, 0);
  std::vector<int64_t> cnt(n_num, 0);
  for (const auto& r : rows) {
    if (r.features.numericals.size() != n_num) {
      throw Error(ErrorCategory::kData, "row " + r.row_id + " does not match the schema");
    }
    for (size_t j = 0; j < n_num; ++j) {
      if (r.features.numericals[j].missing) continue;
      double v = signed_log1p(r.features.numericals[j].value);
      sum[j] += v;
      sq[j] += v * v;
      ++cnt[j];
    }
  }
  for (size_t j = 0; j < n_num; ++j) {
    if (cnt[j] == 0) continue;
    double mu = sum[j] / double(cnt[j]);
    double var = std::max(0.0, sq[j] / double(cnt[j]) - mu * mu);
    num_mean[j] = mu;
    num_std[j] = std::max(1e-6, std::sqrt(var));
  }
}

Var TabularTower::forward(TapeF& tp, std::span<const core::TabularVector> batch, bool train,
                          bool train_params, uint64_t dropout_seed) const {
  (void)train;
  (void)dropout_seed;
  int n = int(batch.size());
  if (n == 0) throw Error(ErrorCategory::kInternal, "empty tabular batch");
  size_t n_num = schema.n_num(), n_cat = schema.n_cat();
  for (const auto& fv : batch) {
    if (fv.numericals.size() != n_num || fv.categoricals.size() != n_cat) {
      throw Error(ErrorCategory::kData, "feature vector does not match the schema");
    }
  }
  auto P = [&](const DenseF& t) { return train_params ? tp.param(t) : tp.constant(t); };

  DenseF nums({n, int(n_num)});
  DenseF inds({n, int(n_num)});
  for (int i = 0; i < n; ++i) {
    for (size_t j = 0; j < n_num; ++j) {
      auto [v, miss] = preprocess_numerical(batch[size_t(i)].numericals[j]);
      if (arch == TabularArch::kMlp && miss == 0.0) v = (v - num_mean[j]) / num_std[j];
      nums.v[size_t(i) * n_num + j] = float(v);
      inds.v[size_t(i) * n_num + j] = float(miss);
    }
  }

  std::vector<Var> parts;
  if (uses_plr()) {
    const float two_pi = float(2.0 * std::numbers::pi);
    for (size_t j = 0; j < n_num; ++j) {
      DenseF col({n, 1});
      for (int i = 0; i < n; ++i) col.v[size_t(i)] = nums.v[size_t(i) * n_num + j];
      Var ang = tp.scale(tp.matmul(tp.constant(col), P(plr[j].freq)), two_pi);
      std::array<Var, 2> sc = {tp.sin(ang), tp.cos(ang)};
      Var periodic = tp.concat_cols(sc);
      parts.push_back(tp.relu(tp.add(tp.matmul(periodic, P(plr[j].w)), P(plr[j].b))));
    }
  } else {
    parts.push_back(tp.constant(nums));
  }
  if (uses_cross()) {
    for (size_t j = 0; j < n_cat; ++j) {
      std::vector<int> ids(size_t(n));
      int card = schema.categorical_cardinalities[j];
      for (int i = 0; i < n; ++i) {
        int c = batch[size_t(i)].categoricals[j];
        ids[size_t(i)] = (c < 0 || c >= card) ? 0 : c + 1;
      }
      parts.push_back(tp.embedding_lookup(P(cat_tables[j]), ids));
    }
  } else if (n_cat > 0) {
    int width = 0;
    for (int c : schema.categorical_cardinalities) width += c + 1;
    DenseF oh({n, width});
    for (int i = 0; i < n; ++i) {
      int at = 0;
      for (size_t j = 0; j < n_cat; ++j) {
        int card = schema.categorical_cardinalities[j];
        int c = batch[size_t(i)].categoricals[j];
        int slot = (c < 0 || c >= card) ? 0 : c + 1;
        oh.v[size_t(i) * size_t(width) + size_t(at + slot)] = 1.0f;
        at += card + 1;
      }
    }
    parts.push_back(tp.constant(oh));
  }
  parts.push_back(tp.constant(inds));

  Var x0 = parts.size() == 1 ? parts[0] : tp.concat_cols(parts);
  if (!uses_cross()) return x0;
  Var x = x0;
  for (size_t l = 0; l < cross_w.size(); ++l) {
    x = tp.add(tp.mul(x0, tp.add(tp.matmul(x, P(cross_w[l])), P(cross_b[l]))), x);
  }
  return tp.add(tp.matmul(x, P(proj_w)), P(proj_b));
}

namespace {

template <typename P, typename Fn>
void walk_tower(P& t, Fn&& fn) {
  for (size_t j = 0; j < t.plr.size(); ++j) {
    std::string pre = "num" + std::to_string(j) + ".";
    fn(pre + "freq", t.plr[j].freq);
    fn(pre + "w", t.plr[j].w);
    fn(pre + "b", t.plr[j].b);
  }
  for (size_t j = 0; j < t.cat_tables.size(); ++j) {
    fn("cat" + std::to_string(j) + ".table", t.cat_tables[j]);
  }
  for (size_t l = 0; l < t.cross_w.size(); ++l) {
    std::string pre = "cross" + std::to_string(l) + ".";
    fn(pre + "w", t.cross_w[l]);
    fn(pre + "b", t.cross_b[l]);
  }
  if (t.proj_w.numel() > 0) {
    fn("proj.w", t.proj_w);
    fn("proj.b", t.proj_b);
  }
}

template <typename P, typename Fn>
void walk_fusion(P& m, Fn&& fn) {
  if (m.has_tabular) {
    walk_tower(m.tower, [&](const std::string& n, auto& t) { fn("tower." + n, t); });
  }
  if (m.has_embedding && m.cfg.embed_norm == EmbedNorm::kLayer) {
    fn("embed_ln.g", m.embed_ln_g);
    fn("embed_ln.b", m.embed_ln_b);
  }
  m.head.for_each(fn);
}

}  // namespace

void TabularTower::for_each(const std::function<void(const std::string&, DenseF&)>& fn) {
  walk_tower(*this, fn);
}
void TabularTower::for_each(
    const std::function<void(const std::string&, const DenseF&)>& fn) const {
  walk_tower(*this, fn);
}

FusionModel FusionModel::init(const FusionConfig& cfg, TabularArch arch,
                              const core::TabularSchema& schema, bool with_embedding,
                              int d_embed, uint64_t seed) {
  cfg.validate();
  FusionModel m;
  m.cfg = cfg;
  m.has_tabular = true;
  m.has_embedding = with_embedding;
  m.d_embed = with_embedding ? d_embed : 0;
  if (with_embedding && d_embed < 1) {
    throw Error(ErrorCategory::kConfig, "embedding width must be positive");
  }
  m.tower = TabularTower::init(cfg, arch, schema, seed);
  if (with_embedding && cfg.embed_norm == EmbedNorm::kLayer) {
    m.embed_ln_g = DenseF({d_embed});
    m.embed_ln_g.fill(1.0f);
    m.embed_ln_b = DenseF({d_embed});
  }
  ft::HeadConfig hc;
  hc.d_in = m.tower.output_dim() + m.d_embed;
  hc.d_hidden = cfg.head_hidden;
  hc.dropout = cfg.dropout;
  m.head = ft::HeadParams::init(hc, seed);
  return m;
}

Var FusionModel::normalize_embedding(TapeF& tp, Var x, bool train_params) const {
  switch (cfg.embed_norm) {
    case EmbedNorm::kLayer: {
      Var g = train_params ? tp.param(embed_ln_g) : tp.constant(embed_ln_g);
      Var b = train_params ? tp.param(embed_ln_b) : tp.constant(embed_ln_b);
      return tp.layer_norm_affine(x, g, b);
    }
    case EmbedNorm::kL2: return tp.l2_normalize_rows(x);
    case EmbedNorm::kNone: return x;
  }
  return x;
}

Var FusionModel::logits(TapeF& tp, std::span<const core::TabularVector> batch,
                        const DenseF* embeddings, bool train, bool train_params,
                        uint64_t dropout_seed) const {
  if (has_embedding != (embeddings != nullptr)) {
    throw Error(ErrorCategory::kInternal, "embedding input does not match the model shape");
  }
  Var x = tower.forward(tp, batch, train, train_params, rng::mix64(dropout_seed ^ 0x7177));
  if (has_embedding) {
    if (embeddings->shape != std::vector<int>{int(batch.size()), d_embed}) {
      throw Error(ErrorCategory::kInternal, "embedding matrix shape mismatch");
    }
    Var e = normalize_embedding(tp, tp.constant(*embeddings), train_params);
    std::array<Var, 2> both = {x, e};
    x = tp.concat_cols(both);
  }
  return ft::head_logit(tp, head, x, train, train_params, rng::mix64(dropout_seed ^ 0x4ead));
}

std::vector<double> FusionModel::score(std::span<const core::LabeledRow> rows,
                                       std::span<const DenseF> embeddings) const {
  if (has_embedding && embeddings.size() != rows.size()) {
    throw Error(ErrorCategory::kData, "one embedding per row is required");
  }
  std::vector<double> out;
  out.reserve(rows.size());
  const size_t chunk = 256;
  std::vector<core::TabularVector> feats;
  for (size_t at = 0; at < rows.size(); at += chunk) {
    size_t n = std::min(chunk, rows.size() - at);
    feats.clear();
    for (size_t i = 0; i < n; ++i) feats.push_back(rows[at + i].features);
    DenseF emb;
    if (has_embedding) {
      emb = DenseF({int(n), d_embed});
      for (size_t i = 0; i < n; ++i) {
        if (embeddings[at + i].shape != std::vector<int>{d_embed}) {
          throw Error(ErrorCategory::kData, "embedding width mismatch");
        }
        std::copy_n(embeddings[at + i].v.data(), size_t(d_embed),
                    &emb.v[i * size_t(d_embed)]);
      }
    }
    TapeF tp;
    Var z = logits(tp, feats, has_embedding ? &emb : nullptr, false, false, 0);
    const DenseF& zv = tp.value(z);
    for (size_t i = 0; i < n; ++i) {
      out.push_back(1.0 / (1.0 + std::exp(-double(zv.v[i]))));
    }
  }
  return out;
}

void FusionModel::for_each(const std::function<void(const std::string&, DenseF&)>& fn) {
  walk_fusion(*this, fn);
}
void FusionModel::for_each(
    const std::function<void(const std::string&, const DenseF&)>& fn) const {
  walk_fusion(*this, fn);
}

namespace {

struct FitLoop {
  FusionModel* model;
  std::span<const core::LabeledRow> rows;
  std::span<const DenseF> embeddings;  // empty unless the model fuses
  const TrainConfig* tcfg;
  float weight_decay;

  std::vector<std::pair<int, double>> run() {
    std::vector<std::pair<std::string, DenseF*>> slots;
    model->for_each([&](const std::string& n, DenseF& t) { slots.emplace_back(n, &t); });
    tensor::AdamWF opt({tcfg->lr, 0.9f, 0.999f, 1e-8f, weight_decay});

    std::vector<size_t> order(rows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<std::pair<int, double>> curve;
    int step = 0;
    for (int epoch = 0; epoch < tcfg->epochs; ++epoch) {
      rng::Stream sh(tcfg->seed, "shuffle", uint64_t(epoch));
      for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[size_t(sh.below(i))]);
      }
      for (size_t at = 0; at < order.size(); at += size_t(tcfg->batch_size), ++step) {
        size_t n = std::min(size_t(tcfg->batch_size), order.size() - at);
        std::vector<core::TabularVector> feats(n);
        std::vector<int> labels(n);
        DenseF emb;
        if (model->has_embedding) emb = DenseF({int(n), model->d_embed});
        for (size_t i = 0; i < n; ++i) {
          const auto& r = rows[order[at + i]];
          feats[i] = r.features;
          labels[i] = r.label;
          if (model->has_embedding) {
            std::copy_n(embeddings[order[at + i]].v.data(), size_t(model->d_embed),
                        &emb.v[i * size_t(model->d_embed)]);
          }
        }
        TapeF tp;
        uint64_t ds = rng::mix64(tcfg->seed ^ (uint64_t(step) * 0x9e3779b97f4a7c15ull));
        Var z = model->logits(tp, feats, model->has_embedding ? &emb : nullptr, true, true, ds);
        Var loss = tp.bce_with_logits(z, labels);
        double lv = double(tp.value(loss).v[0]);
        if (!std::isfinite(lv)) {
          throw Error(ErrorCategory::kInternal,
                      "fusion training diverged at step " + std::to_string(step));
        }
        tp.backward(loss);
        std::unordered_map<const void*, DenseF> grads;
        tp.export_grads(grads);
        for (auto& [name, t] : slots) {
          auto it = grads.find(t);
          if (it == grads.end()) continue;
          opt.step(*t, it->second, t->shape.size() >= 2 ? weight_decay : 0.0f);
        }
        if (step % std::max(1, tcfg->log_every) == 0) curve.emplace_back(step, lv);
      }
    }
    return curve;
  }
};

void check_rows(std::span<const core::LabeledRow> rows, const char* what) {
  if (rows.empty()) throw Error(ErrorCategory::kData, std::string(what) + " rows are empty");
}

std::vector<double> labels_of(std::span<const core::LabeledRow> rows) {
  std::vector<double> out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) out[i] = rows[i].label;
  return out;
}

double auc_of(std::span<const double> scores, std::span<const core::LabeledRow> rows) {
  std::vector<int> y(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) y[i] = rows[i].label;
  return eval::auc(scores, y);
}

}  // namespace

FitResult train_tabular_only(std::span<const core::LabeledRow> train_rows,
                             std::span<const core::LabeledRow> test_rows,
                             const core::TabularSchema& schema, TabularArch arch,
                             const FusionConfig& cfg, const TrainConfig& tcfg) {
  check_rows(train_rows, "train");
  check_rows(test_rows, "test");
  FitResult res;
  res.model = FusionModel::init(cfg, arch, schema, false, 0, tcfg.seed);
  res.model.tower.fit_standardization(train_rows);
  float wd = tcfg.weight_decay;
  if (arch == TabularArch::kDcnPlrL2 && wd <= 0) wd = 1e-4f;
  FitLoop loop{&res.model, train_rows, {}, &tcfg, wd};
  res.loss_curve = loop.run();
  res.test_scores = res.model.score(test_rows);
  res.test_auc = auc_of(res.test_scores, test_rows);
  return res;
}

FitResult train_fused_frozen(std::span<const core::LabeledRow> train_rows,
                             std::span<const DenseF> train_embeddings,
                             std::span<const core::LabeledRow> test_rows,
                             std::span<const DenseF> test_embeddings,
                             const core::TabularSchema& schema, TabularArch arch,
                             const FusionConfig& cfg, const TrainConfig& tcfg,
                             const std::set<std::string>* stage1_row_ids) {
  check_rows(train_rows, "train");
  check_rows(test_rows, "test");
  if (train_embeddings.size() != train_rows.size() ||
      test_embeddings.size() != test_rows.size()) {
    throw Error(ErrorCategory::kData, "one embedding per row is required");
  }
  if (stage1_row_ids != nullptr) {
    for (const auto& r : train_rows) {
      if (stage1_row_ids->count(r.row_id) > 0) {
        throw Error(ErrorCategory::kData,
                    "row " + r.row_id + " appears in both fusion stages");
      }
    }
  }
  int d_embed = train_embeddings.empty() ? 0 : train_embeddings[0].shape[0];
  FitResult res;
  res.model = FusionModel::init(cfg, arch, schema, true, d_embed, tcfg.seed);
  res.model.tower.fit_standardization(train_rows);
  float wd = tcfg.weight_decay;
  if (arch == TabularArch::kDcnPlrL2 && wd <= 0) wd = 1e-4f;
  FitLoop loop{&res.model, train_rows, train_embeddings, &tcfg, wd};
  res.loss_curve = loop.run();
  res.test_scores = res.model.score(test_rows, test_embeddings);
  res.test_auc = auc_of(res.test_scores, test_rows);
  return res;
}

namespace {

Var joint_logit(TapeF& tp, const model::TransformerParams<float>& base,
                const ft::LoraParams* lora, const FusionModel& fusion,
                const JointExample& ex, bool train, bool train_encoder, bool train_fusion,
                bool train_base_full, uint64_t seed) {
  model::ForwardOptions opt;
  opt.train = train;
  opt.train_base = train_base_full;
  opt.train_adapters = train_encoder && lora != nullptr;
  opt.dropout_seed = rng::mix64(seed ^ 0x1a2b);
  std::vector<model::LayerDeltas<float>> dl;
  if (lora != nullptr) dl = lora->deltas();
  model::ForwardResult<float> fr = model::forward(tp, base, ex.tokens, opt, dl);
  Var last = tp.slice_rows(fr.last_hidden, fr.effective_len - 1, fr.effective_len);
  Var emb = fusion.normalize_embedding(tp, last, train_fusion);
  std::span<const core::TabularVector> one(&ex.features, 1);
  Var tab = fusion.tower.forward(tp, one, train, train_fusion, rng::mix64(seed ^ 0x3c4d));
  std::array<Var, 2> both = {tab, emb};
  Var cat = tp.concat_cols(both);
  return ft::head_logit(tp, fusion.head, cat, train, train_fusion, rng::mix64(seed ^ 0x5e6f));
}

}  // namespace

JointResult joint_fusion(const model::TransformerParams<float>& base,
                         std::span<const JointExample> train, std::span<const JointExample> test,
                         const core::TabularSchema& schema, const JointConfig& cfg) {
  if (train.empty() || test.empty()) {
    throw Error(ErrorCategory::kData, "joint fusion needs train and test examples");
  }
  const TrainConfig& tc = cfg.train;
  JointResult res;
  res.base = base;
  res.used_lora = !cfg.full_finetune;
  if (res.used_lora) res.lora = ft::LoraParams::init(cfg.lora, base.cfg, tc.seed);
  res.fusion = FusionModel::init(cfg.fusion, cfg.arch, schema, true, base.cfg.d_model, tc.seed);

  std::vector<std::pair<std::string, DenseF*>> enc_slots, fus_slots;
  if (cfg.full_finetune) {
    res.base.for_each([&](const std::string& n, DenseF& t) { enc_slots.emplace_back(n, &t); });
  } else {
    res.lora.for_each([&](const std::string& n, DenseF& t) { enc_slots.emplace_back(n, &t); });
  }
  res.fusion.for_each([&](const std::string& n, DenseF& t) { fus_slots.emplace_back(n, &t); });

  float enc_lr = cfg.encoder_lr > 0 ? cfg.encoder_lr : tc.lr;
  tensor::AdamWF enc_opt({enc_lr, 0.9f, 0.999f, 1e-8f, tc.weight_decay});
  tensor::AdamWF fus_opt({tc.lr, 0.9f, 0.999f, 1e-8f, tc.weight_decay});

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng::Stream sh(tc.seed, "shuffle", uint64_t(epoch));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[size_t(sh.below(i))]);
    }
    for (size_t at = 0; at < order.size(); at += size_t(tc.batch_size), ++step) {
      size_t n = std::min(size_t(tc.batch_size), order.size() - at);
      tensor::GradSink<float> sink;
      double loss_sum = 0;
      for (size_t bi = 0; bi < n; ++bi) {
        const JointExample& ex = train[order[at + bi]];
        TapeF tp;
        uint64_t ds = rng::mix64(tc.seed ^ (uint64_t(step) * 1315423911u + bi));
        Var logit = joint_logit(tp, res.base, res.used_lora ? &res.lora : nullptr, res.fusion,
                                ex, true, true, true, cfg.full_finetune, ds);
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
                    "joint fusion diverged at step " + std::to_string(step) +
                        " (epoch " + std::to_string(epoch) + ")");
      }
      for (auto& [name, t] : enc_slots) {
        const DenseF* g = sink.find(t);
        if (g != nullptr) enc_opt.step(*t, *g, t->shape.size() >= 2 ? tc.weight_decay : 0.0f);
      }
      for (auto& [name, t] : fus_slots) {
        const DenseF* g = sink.find(t);
        if (g != nullptr) fus_opt.step(*t, *g, t->shape.size() >= 2 ? tc.weight_decay : 0.0f);
      }
      if (step % std::max(1, tc.log_every) == 0) res.loss_curve.emplace_back(step, loss);
    }
  }

  res.test_scores = joint_score(res, test);
  std::vector<int> y(test.size());
  for (size_t i = 0; i < test.size(); ++i) y[i] = test[i].label;
  res.test_auc = eval::auc(res.test_scores, y);
  return res;
}

std::vector<double> joint_score(const JointResult& r, std::span<const JointExample> rows) {
  std::vector<double> out(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    TapeF tp;
    Var logit = joint_logit(tp, r.base, r.used_lora ? &r.lora : nullptr, r.fusion, rows[i],
                            false, false, false, false, 0);
    out[i] = 1.0 / (1.0 + std::exp(-double(tp.value(logit).v[0])));
  }
  return out;
}

void save_fusion(const std::filesystem::path& path, const FusionModel& m,
                 const std::map<std::string, std::string>& metadata) {
  ckpt::Checkpoint ck;
  ck.metadata = metadata;
  ck.metadata["schema"] = core::schema_to_json(m.tower.schema);
  ck.metadata["arch"] = tabular_arch_name(m.tower.arch);
  ck.metadata["embed_norm"] = embed_norm_name(m.cfg.embed_norm);
  ck.metadata["has_embedding"] = m.has_embedding ? "1" : "0";
  ck.metadata["d_embed"] = std::to_string(m.d_embed);
  ck.metadata["d_num"] = std::to_string(m.cfg.d_num);
  ck.metadata["d_cat"] = std::to_string(m.cfg.d_cat);
  ck.metadata["plr_frequencies"] = std::to_string(m.cfg.plr_frequencies);
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", m.cfg.plr_sigma);
  ck.metadata["plr_sigma"] = buf;
  ck.metadata["cross_layers"] = std::to_string(m.cfg.cross_layers);
  ck.metadata["d_proj"] = std::to_string(m.cfg.d_proj);
  ck.metadata["head_hidden"] = std::to_string(m.cfg.head_hidden);
  std::snprintf(buf, sizeof buf, "%.17g", m.cfg.dropout);
  ck.metadata["dropout"] = buf;
  m.for_each([&](const std::string& n, const DenseF& t) { ck.add(n, t); });
  DenseF mean({int(m.tower.schema.n_num())});
  DenseF stdd({int(m.tower.schema.n_num())});
  for (size_t j = 0; j < m.tower.schema.n_num(); ++j) {
    mean.v[j] = float(m.tower.num_mean[j]);
    stdd.v[j] = float(m.tower.num_std[j]);
  }
  ck.add("num_mean", mean);
  ck.add("num_std", stdd);
  ck.save(path.string());
}

FusionModel load_fusion(const std::filesystem::path& path,
                        std::map<std::string, std::string>* metadata) {
  ckpt::Checkpoint ck = ckpt::Checkpoint::load(path.string());
  auto meta = [&](const std::string& k) -> const std::string& {
    auto it = ck.metadata.find(k);
    if (it == ck.metadata.end()) {
      throw Error(ErrorCategory::kData, path.string() + ": missing metadata key " + k);
    }
    return it->second;
  };
  FusionConfig cfg;
  cfg.d_num = std::stoi(meta("d_num"));
  cfg.d_cat = std::stoi(meta("d_cat"));
  cfg.plr_frequencies = std::stoi(meta("plr_frequencies"));
  cfg.plr_sigma = std::stod(meta("plr_sigma"));
  cfg.cross_layers = std::stoi(meta("cross_layers"));
  cfg.d_proj = std::stoi(meta("d_proj"));
  cfg.head_hidden = std::stoi(meta("head_hidden"));
  cfg.dropout = std::stod(meta("dropout"));
  cfg.embed_norm = parse_embed_norm(meta("embed_norm"));
  core::TabularSchema schema = core::schema_from_json(meta("schema"));
  TabularArch arch = parse_tabular_arch(meta("arch"));
  bool has_embedding = meta("has_embedding") == "1";
  int d_embed = std::stoi(meta("d_embed"));
  FusionModel m = FusionModel::init(cfg, arch, schema, has_embedding, d_embed, 0);
  m.for_each([&](const std::string& n, DenseF& t) {
    const DenseF& s = ck.require(n);
    if (s.shape != t.shape) {
      throw Error(ErrorCategory::kData, path.string() + ": tensor " + n + " has shape " +
                                            tensor::shape_str(s.shape) + ", expected " +
                                            tensor::shape_str(t.shape));
    }
    t = s;
  });
  const DenseF& mean = ck.require("num_mean");
  const DenseF& stdd = ck.require("num_std");
  if (mean.numel() != m.tower.schema.n_num() || stdd.numel() != m.tower.schema.n_num()) {
    throw Error(ErrorCategory::kData, path.string() + ": standardization size mismatch");
  }
  for (size_t j = 0; j < m.tower.schema.n_num(); ++j) {
    m.tower.num_mean[j] = double(mean.v[j]);
    m.tower.num_std[j] = double(stdd.v[j]);
  }
  if (metadata != nullptr) *metadata = ck.metadata;
  return m;
}

}  // namespace txnfm::fuse
