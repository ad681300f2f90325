#include "txnfm/config.hpp"

#include <set>

#include <nlohmann/json.hpp>

namespace txnfm::cfg {

using json = nlohmann::ordered_json;

std::string sources_string(const std::vector<core::Source>& sources) {
  std::string out;
  for (core::Source s : sources) out += source_name(s);
  return out;
}

std::vector<core::Source> parse_sources(const std::string& s) {
  if (s.empty()) throw Error(ErrorCategory::kConfig, "sources must not be empty");
  std::vector<core::Source> out;
  for (char c : s) out.push_back(core::parse_source(std::string(1, c)));
  return out;
}

namespace {

// Tracks which keys of one JSON object were consumed; anything left over is a
// config error naming the offending key.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw Error(ErrorCategory::kConfig, path_ + " must be a JSON object");
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  void get(const std::string& key, T& target) {
    if (!has(key)) return;
    try {
      target = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorCategory::kConfig, path_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (seen_.count(it.key()) == 0) {
        throw Error(ErrorCategory::kConfig, "unknown config key: " + path_ + "." + it.key());
      }
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

core::Timestamp parse_date_key(const std::string& s, const std::string& where) {
  try {
    return core::parse_timestamp(s);
  } catch (const Error& e) {
    throw Error(ErrorCategory::kConfig, where + ": " + e.what());
  }
}

}  // namespace

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "config");
  root.get("seed", c.seed);
  root.get("out_dir", c.out_dir);

  if (const json* g = root.sub("generator")) {
    Section s(*g, "generator");
    s.get("n_users", c.generator.n_users);
    if (s.has("start")) {
      c.generator.start = parse_date_key(g->at("start").get<std::string>(), "generator.start");
    }
    if (s.has("end")) {
      c.generator.end = parse_date_key(g->at("end").get<std::string>(), "generator.end");
    }
    if (s.has("sources")) c.generator.sources = parse_sources(g->at("sources").get<std::string>());
    s.get("persona_dim", c.generator.persona_dim);
    s.get("label_horizon_months", c.generator.label_horizon_months);
    s.get("interaction_strength", c.generator.interaction_strength);
    s.get("seasonality_amplitude", c.generator.seasonality_amplitude);
    s.get("positive_rate", c.generator.positive_rate);
    s.get("label_noise", c.generator.label_noise);
    s.get("n_train_rows", c.generator.n_train_rows);
    s.get("n_test_rows", c.generator.n_test_rows);
    s.get("train_months", c.generator.train_months);
    s.get("test_months", c.generator.test_months);
    s.get("drift_rate", c.generator.drift_rate);
    s.finish();
  }
  if (const json* v = root.sub("vocab")) {
    Section s(*v, "vocab");
    s.get("text_tokens", c.vocab_text_tokens);
    s.finish();
  }
  if (const json* m = root.sub("model")) {
    Section s(*m, "model");
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("d_model", c.model.d_model);
    s.get("d_ff", c.model.d_ff);
    s.get("max_context", c.model.max_context);
    s.get("dropout", c.model.dropout);
    s.finish();
  }
  if (const json* p = root.sub("pretrain")) {
    Section s(*p, "pretrain");
    s.get("steps", c.pretrain_steps);
    s.get("batch_size", c.pretrain_batch);
    s.get("lr", c.pretrain_lr);
    s.get("weight_decay", c.pretrain_weight_decay);
    s.get("warmup_steps", c.pretrain_warmup);
    s.get("log_every", c.pretrain_log_every);
    s.get("checkpoint_every", c.pretrain_checkpoint_every);
    s.get("stop_below_loss", c.pretrain_stop_below);
    s.finish();
  }
  if (const json* f = root.sub("finetune")) {
    Section s(*f, "finetune");
    s.get("rank", c.finetune.lora.rank);
    s.get("alpha", c.finetune.lora.alpha);
    s.get("on_query", c.finetune.lora.on_query);
    s.get("on_value", c.finetune.lora.on_value);
    s.get("full_finetune", c.finetune.full_finetune);
    s.get("epochs", c.finetune.epochs);
    s.get("batch_size", c.finetune.batch_size);
    s.get("lr", c.finetune.lr);
    s.get("head_lr", c.finetune.head_lr);
    s.get("weight_decay", c.finetune.weight_decay);
    s.get("head_hidden", c.finetune.head.d_hidden);
    s.get("head_dropout", c.finetune.head.dropout);
    s.get("log_every", c.finetune.log_every);
    s.finish();
  }
  if (const json* f = root.sub("fusion")) {
    Section s(*f, "fusion");
    if (s.has("mode")) c.fusion_mode = fuse::parse_fusion_mode(f->at("mode").get<std::string>());
    if (s.has("arch")) c.fusion_arch = fuse::parse_tabular_arch(f->at("arch").get<std::string>());
    if (s.has("embed_norm")) {
      c.fusion.embed_norm = fuse::parse_embed_norm(f->at("embed_norm").get<std::string>());
    }
    s.get("d_num", c.fusion.d_num);
    s.get("d_cat", c.fusion.d_cat);
    s.get("plr_frequencies", c.fusion.plr_frequencies);
    s.get("plr_sigma", c.fusion.plr_sigma);
    s.get("cross_layers", c.fusion.cross_layers);
    s.get("d_proj", c.fusion.d_proj);
    s.get("head_hidden", c.fusion.head_hidden);
    s.get("dropout", c.fusion.dropout);
    s.get("epochs", c.fusion_train.epochs);
    s.get("batch_size", c.fusion_train.batch_size);
    s.get("lr", c.fusion_train.lr);
    s.get("weight_decay", c.fusion_train.weight_decay);
    s.get("log_every", c.fusion_train.log_every);
    s.get("encoder_lr", c.fusion_encoder_lr);
    s.get("full_finetune", c.fusion_full_finetune);
    s.get("stage1_fraction", c.stage1_fraction);
    s.finish();
  }
  if (const json* e = root.sub("eval")) {
    Section s(*e, "eval");
    s.get("seeds", c.eval_seeds);
    s.get("context_levels", c.context_levels);
    s.get("data_levels", c.data_levels);
    s.get("d_model_levels", c.d_model_levels);
    s.get("stability_windows", c.stability_windows);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from_json(read_text_file(path));
}

void RunConfig::validate() const {
  generator.validate();
  fusion.validate();
  finetune.lora.validate();
  if (vocab_text_tokens < 257) {
    throw Error(ErrorCategory::kConfig, "vocab.text_tokens must be at least 257");
  }
  if (pretrain_steps < 1 || pretrain_batch < 1) {
    throw Error(ErrorCategory::kConfig, "pretrain.steps and pretrain.batch_size must be positive");
  }
  if (eval_seeds.empty()) throw Error(ErrorCategory::kConfig, "eval.seeds must not be empty");
  if (stage1_fraction <= 0 || stage1_fraction >= 1) {
    throw Error(ErrorCategory::kConfig, "fusion.stage1_fraction must be in (0, 1)");
  }
  if (stability_windows < 1) {
    throw Error(ErrorCategory::kConfig, "eval.stability_windows must be positive");
  }
  // model.vocab_size is derived; validate the rest on a stand-in.
  model::ModelConfig mc = model;
  mc.vocab_size = tok::kTextBase + 256;
  mc.validate();
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  json g;
  g["n_users"] = generator.n_users;
  g["start"] = core::format_date(generator.start);
  g["end"] = core::format_date(generator.end);
  g["sources"] = sources_string(generator.sources);
  g["persona_dim"] = generator.persona_dim;
  g["label_horizon_months"] = generator.label_horizon_months;
  g["interaction_strength"] = generator.interaction_strength;
  g["seasonality_amplitude"] = generator.seasonality_amplitude;
  g["positive_rate"] = generator.positive_rate;
  g["label_noise"] = generator.label_noise;
  g["n_train_rows"] = generator.n_train_rows;
  g["n_test_rows"] = generator.n_test_rows;
  g["train_months"] = generator.train_months;
  g["test_months"] = generator.test_months;
  g["drift_rate"] = generator.drift_rate;
  j["generator"] = std::move(g);
  j["vocab"] = json{{"text_tokens", vocab_text_tokens}};
  json m;
  m["n_layers"] = model.n_layers;
  m["n_heads"] = model.n_heads;
  m["d_model"] = model.d_model;
  m["d_ff"] = model.d_ff;
  m["max_context"] = model.max_context;
  m["dropout"] = model.dropout;
  j["model"] = std::move(m);
  json p;
  p["steps"] = pretrain_steps;
  p["batch_size"] = pretrain_batch;
  p["lr"] = pretrain_lr;
  p["weight_decay"] = pretrain_weight_decay;
  p["warmup_steps"] = pretrain_warmup;
  p["log_every"] = pretrain_log_every;
  p["checkpoint_every"] = pretrain_checkpoint_every;
  p["stop_below_loss"] = pretrain_stop_below;
  j["pretrain"] = std::move(p);
  json f;
  f["rank"] = finetune.lora.rank;
  f["alpha"] = finetune.lora.alpha;
  f["on_query"] = finetune.lora.on_query;
  f["on_value"] = finetune.lora.on_value;
  f["full_finetune"] = finetune.full_finetune;
  f["epochs"] = finetune.epochs;
  f["batch_size"] = finetune.batch_size;
  f["lr"] = finetune.lr;
  f["head_lr"] = finetune.head_lr;
  f["weight_decay"] = finetune.weight_decay;
  f["head_hidden"] = finetune.head.d_hidden;
  f["head_dropout"] = finetune.head.dropout;
  f["log_every"] = finetune.log_every;
  j["finetune"] = std::move(f);
  json fu;
  fu["mode"] = fuse::fusion_mode_name(fusion_mode);
  fu["arch"] = fuse::tabular_arch_name(fusion_arch);
  fu["embed_norm"] = fuse::embed_norm_name(fusion.embed_norm);
  fu["d_num"] = fusion.d_num;
  fu["d_cat"] = fusion.d_cat;
  fu["plr_frequencies"] = fusion.plr_frequencies;
  fu["plr_sigma"] = fusion.plr_sigma;
  fu["cross_layers"] = fusion.cross_layers;
  fu["d_proj"] = fusion.d_proj;
  fu["head_hidden"] = fusion.head_hidden;
  fu["dropout"] = fusion.dropout;
  fu["epochs"] = fusion_train.epochs;
  fu["batch_size"] = fusion_train.batch_size;
  fu["lr"] = fusion_train.lr;
  fu["weight_decay"] = fusion_train.weight_decay;
  fu["log_every"] = fusion_train.log_every;
  fu["encoder_lr"] = fusion_encoder_lr;
  fu["full_finetune"] = fusion_full_finetune;
  fu["stage1_fraction"] = stage1_fraction;
  j["fusion"] = std::move(fu);
  json e;
  e["seeds"] = eval_seeds;
  e["context_levels"] = context_levels;
  e["data_levels"] = data_levels;
  e["d_model_levels"] = d_model_levels;
  e["stability_windows"] = stability_windows;
  j["eval"] = std::move(e);
  return j.dump(2) + "\n";
}

uint64_t RunConfig::fingerprint() const { return fnv1a64(to_json()); }

void RunConfig::save_resolved(const std::filesystem::path& path) const {
  atomic_write_file(path, to_json());
}

}  // namespace txnfm::cfg
