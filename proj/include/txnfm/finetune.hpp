#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "txnfm/model.hpp"
#include "txnfm/tensor.hpp"

namespace txnfm::ft {

struct LoraConfig {
  int rank = 8;
  float alpha = 16.0f;
  bool on_query = true;
  bool on_value = true;

  void validate() const;
  float scale() const { return alpha / float(rank); }
};

// Low-rank adapters on the attention query/value projections. a is [r, d],
// b is [d, r]; b starts at zero so the adapted model is exactly the base
// model until training moves it.
struct LoraParams {
  LoraConfig cfg;
  struct Layer {
    tensor::DenseF qa, qb, va, vb;
  };
  std::vector<Layer> layers;

  static LoraParams init(const LoraConfig& cfg, const model::ModelConfig& mc, uint64_t seed);
  std::vector<model::LayerDeltas<float>> deltas() const;
  void for_each(const std::function<void(const std::string&, tensor::DenseF&)>& fn);
  void for_each(const std::function<void(const std::string&, const tensor::DenseF&)>& fn) const;
};

struct HeadConfig {
  int d_in = 0;
  int d_hidden = 0;  // 0: d_in / 2
  double dropout = 0.1;

  void validate() const;
  int hidden() const { return d_hidden > 0 ? d_hidden : d_in / 2; }
};

// Two-layer scoring head producing a single logit from an embedding row.
struct HeadParams {
  HeadConfig cfg;
  tensor::DenseF w1, b1, w2, b2;

  static HeadParams init(const HeadConfig& cfg, uint64_t seed);
  void for_each(const std::function<void(const std::string&, tensor::DenseF&)>& fn);
  void for_each(const std::function<void(const std::string&, const tensor::DenseF&)>& fn) const;
};

// Appends the head MLP to the graph: x [n, d_in] -> logits [n, 1].
tensor::Var head_logit(tensor::TapeF& tp, const HeadParams& head, tensor::Var x,
                       bool train, bool train_params, uint64_t dropout_seed);

struct Example {
  std::vector<int> tokens;
  int label = 0;
  std::string row_id;
};

struct FinetuneConfig {
  LoraConfig lora;
  HeadConfig head;  // d_in filled from the model if left 0
  bool full_finetune = false;
  uint64_t seed = 1;
  int epochs = 3;
  int batch_size = 16;
  float lr = 1e-3f;
  float head_lr = 0.0f;  // 0: same as lr
  float weight_decay = 0.01f;
  int log_every = 50;
  std::string out_dir;
};

struct FinetuneResult {
  model::TransformerParams<float> base;  // updated only in full mode
  LoraParams lora;
  HeadParams head;
  bool used_lora = true;
  std::vector<std::pair<int, double>> loss_curve;  // (step, batch loss)
  int steps_run = 0;
};

// Supervised binary finetuning on encoded sequences. The base weights passed
// in are never mutated; in adapter mode the returned base is a byte-identical
// copy, in full mode it carries the updated weights. `vocab_hash` is the
// dataset's vocabulary fingerprint and `base_vocab_hash` the one stored with
// the pretrained checkpoint; a mismatch aborts.
FinetuneResult finetune(const model::TransformerParams<float>& base,
                        std::span<const Example> examples, const FinetuneConfig& cfg,
                        uint64_t vocab_hash, uint64_t base_vocab_hash);

// Probability for one sequence in eval mode. Pass lora = nullptr to score
// with the bare base weights.
double score(const model::TransformerParams<float>& base, const LoraParams* lora,
             const HeadParams& head, std::span<const int> tokens);

std::vector<double> score_batch(const model::TransformerParams<float>& base,
                                const LoraParams* lora, const HeadParams& head,
                                std::span<const Example> examples);

// Folds the adapter deltas into the base projections: wq += scale * a^T b^T
// (likewise wv). The result's forward pass matches the adapted model.
model::TransformerParams<float> merge_adapters(const model::TransformerParams<float>& base,
                                               const LoraParams& lora);

// Logistic-regression probe on fixed embeddings, used as the frozen-encoder
// baseline. Returns test-set probabilities.
std::vector<double> logistic_probe(const std::vector<tensor::DenseF>& train_x,
                                   std::span<const int> train_y,
                                   const std::vector<tensor::DenseF>& test_x,
                                   uint64_t seed = 1, int steps = 400, float lr = 0.05f);

void save_finetuned(const std::filesystem::path& path, const FinetuneResult& r,
                    const std::map<std::string, std::string>& metadata);
FinetuneResult load_finetuned(const std::filesystem::path& path,
                              const model::TransformerParams<float>& base,
                              std::map<std::string, std::string>* metadata = nullptr);

}  // namespace txnfm::ft
