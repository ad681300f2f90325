#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "txnfm/checkpoint.hpp"
#include "txnfm/tensor.hpp"
#include "txnfm/tokenizer.hpp"

namespace txnfm::model {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 0;
  int max_context = 256;
  double dropout = 0.0;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
};

// Decoder-only weights. No positional parameters exist anywhere in this
// struct: order information enters only through the causal mask. The output
// projection is weight-tied to the embedding table.
template <typename T>
struct TransformerParams {
  ModelConfig cfg;
  tensor::Dense<T> tok_emb;  // [V, d_model]
  struct Layer {
    tensor::Dense<T> ln1_g, ln1_b;
    tensor::Dense<T> wq, bq, wk, bk, wv, bv, wo, bo;
    tensor::Dense<T> ln2_g, ln2_b;
    tensor::Dense<T> w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  tensor::Dense<T> lnf_g, lnf_b;

  static TransformerParams init(const ModelConfig& cfg, uint64_t seed);

  // Canonical (name, tensor) enumeration; fixed order defines the checkpoint
  // layout and the optimizer walk.
  void for_each(const std::function<void(const std::string&, tensor::Dense<T>&)>& fn);
  void for_each(const std::function<void(const std::string&, const tensor::Dense<T>&)>& fn) const;
  std::vector<std::string> param_names() const;
  size_t param_count() const;

  template <typename U>
  TransformerParams<U> cast() const {
    TransformerParams<U> out;
    out.cfg = cfg;
    out.tok_emb = tok_emb.template cast<U>();
    out.layers.resize(layers.size());
    for (size_t l = 0; l < layers.size(); ++l) {
      const Layer& a = layers[l];
      auto& b = out.layers[l];
      b.ln1_g = a.ln1_g.template cast<U>(); b.ln1_b = a.ln1_b.template cast<U>();
      b.wq = a.wq.template cast<U>(); b.bq = a.bq.template cast<U>();
      b.wk = a.wk.template cast<U>(); b.bk = a.bk.template cast<U>();
      b.wv = a.wv.template cast<U>(); b.bv = a.bv.template cast<U>();
      b.wo = a.wo.template cast<U>(); b.bo = a.bo.template cast<U>();
      b.ln2_g = a.ln2_g.template cast<U>(); b.ln2_b = a.ln2_b.template cast<U>();
      b.w1 = a.w1.template cast<U>(); b.b1 = a.b1.template cast<U>();
      b.w2 = a.w2.template cast<U>(); b.b2 = a.b2.template cast<U>();
    }
    out.lnf_g = lnf_g.template cast<U>();
    out.lnf_b = lnf_b.template cast<U>();
    return out;
  }
};

// Optional low-rank additive deltas on the attention query/value projections,
// owned by the finetune module. a is [r, d_model], b is [d_model, r]; the
// effective weight delta is scale * (a^T b^T) applied alongside wq / wv.
template <typename T>
struct LayerDeltas {
  const tensor::Dense<T>* qa = nullptr;
  const tensor::Dense<T>* qb = nullptr;
  const tensor::Dense<T>* va = nullptr;
  const tensor::Dense<T>* vb = nullptr;
  T scale = T(0);
};

struct ForwardOptions {
  bool train = false;           // enables dropout
  bool train_base = true;       // base weights as trainable leaves vs constants
  bool train_adapters = false;  // delta matrices as trainable leaves
  uint64_t dropout_seed = 0;
};

template <typename T>
struct ForwardResult {
  tensor::Var logits;       // [effective_len, V]
  tensor::Var last_hidden;  // [effective_len, d_model], after the final norm
  int effective_len = 0;
};

// Builds one sequence's graph on the given tape. Trailing PAD is stripped
// before the graph is built, which makes padding invariance structural;
// interior PAD violates the right-padding precondition and is an error.
template <typename T>
ForwardResult<T> forward(tensor::Tape<T>& tp, const TransformerParams<T>& p,
                         std::span<const int> tokens, const ForwardOptions& opt,
                         std::span<const LayerDeltas<T>> deltas = {});

// Mean cross-entropy of logits[t] against tokens[t+1]. A length-1 sequence
// has zero targets; the loss is defined as 0 and `warned` is set.
template <typename T>
tensor::Var ntp_loss(tensor::Tape<T>& tp, tensor::Var logits, std::span<const int> tokens,
                     int effective_len, bool* warned = nullptr);

struct PretrainConfig {
  ModelConfig model;
  uint64_t seed = 1;
  int steps = 2000;
  int batch_size = 8;
  float lr = 3e-4f;
  float weight_decay = 0.01f;
  int warmup_steps = 20;
  int log_every = 10;
  int checkpoint_every = 0;     // 0: only the final checkpoint
  double stop_below_loss = -1;  // early stop when smoothed loss dips below
  std::string out_dir;          // loss curve + checkpoints; empty: keep in memory
};

struct PretrainResult {
  TransformerParams<float> params;
  std::vector<std::pair<int, double>> loss_curve;  // (step, batch loss)
  int steps_run = 0;
  bool early_stopped = false;
};

// Next-token pretraining over encoded user sequences. Deterministic given
// the seed; a non-finite loss aborts with a diagnostic checkpoint.
PretrainResult pretrain(std::span<const tok::TokenSequence> corpus,
                        const PretrainConfig& cfg, uint64_t vocab_hash);

// Final-layer hidden state at the last non-PAD position (eval mode).
tensor::DenseF user_embedding(const TransformerParams<float>& p, std::span<const int> tokens);

// Mean probability mass the model puts on the correct successor token type at
// grammar-determined positions (sequence start and separators are followed by
// a sign token; then amount, month, day, weekday, and description text).
double structural_type_mass(const TransformerParams<float>& p,
                            std::span<const tok::TokenSequence> corpus, int max_sequences);

// Entropy (nats) of the corpus token unigram distribution, PAD excluded.
double unigram_entropy(std::span<const tok::TokenSequence> corpus);

void save_transformer(const std::filesystem::path& path, const TransformerParams<float>& p,
                      const std::map<std::string, std::string>& metadata);
TransformerParams<float> load_transformer(const std::filesystem::path& path,
                                          std::map<std::string, std::string>* metadata = nullptr);

extern template struct TransformerParams<float>;
extern template struct TransformerParams<double>;
extern template ForwardResult<float> forward(tensor::Tape<float>&, const TransformerParams<float>&,
                                             std::span<const int>, const ForwardOptions&,
                                             std::span<const LayerDeltas<float>>);
extern template ForwardResult<double> forward(tensor::Tape<double>&, const TransformerParams<double>&,
                                              std::span<const int>, const ForwardOptions&,
                                              std::span<const LayerDeltas<double>>);
extern template tensor::Var ntp_loss(tensor::Tape<float>&, tensor::Var, std::span<const int>, int, bool*);
extern template tensor::Var ntp_loss(tensor::Tape<double>&, tensor::Var, std::span<const int>, int, bool*);

}  // namespace txnfm::model
