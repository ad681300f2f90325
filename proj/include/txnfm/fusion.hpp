#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "txnfm/core.hpp"
#include "txnfm/finetune.hpp"
#include "txnfm/model.hpp"
#include "txnfm/tensor.hpp"

namespace txnfm::fuse {

enum class EmbedNorm { kLayer, kL2, kNone };
enum class FusionMode { kTabular, kEarly, kLate, kJoint };
enum class TabularArch { kMlp, kMlpPlr, kDcn, kDcnPlr, kDcnPlrL2 };

std::string embed_norm_name(EmbedNorm n);
EmbedNorm parse_embed_norm(const std::string& s);
std::string fusion_mode_name(FusionMode m);
FusionMode parse_fusion_mode(const std::string& s);
std::string tabular_arch_name(TabularArch a);
TabularArch parse_tabular_arch(const std::string& s);

struct FusionConfig {
  int d_num = 8;            // per-feature numerical embedding width
  int d_cat = 8;            // per-feature categorical embedding width
  int plr_frequencies = 16;
  double plr_sigma = 1.0;
  int cross_layers = 2;
  int d_proj = 64;
  int head_hidden = 64;
  double dropout = 0.1;
  EmbedNorm embed_norm = EmbedNorm::kLayer;

  void validate() const;
};

// sign(x) * ln(1 + |x|); a missing value maps to 0 and raises its companion
// indicator instead.
double signed_log1p(double x);
std::pair<double, double> preprocess_numerical(const core::NumericalValue& v);

// Tabular tower. MLP variants flatten (standardized numericals or PLR blocks)
// plus one-hot categoricals and let the head do the work; cross variants embed
// every feature, run the cross recurrence x_{l+1} = x0 ⊙ (x_l W_l + b_l) + x_l,
// and project to d_proj. Missing indicators ride along in both.
struct TabularTower {
  FusionConfig cfg;
  TabularArch arch = TabularArch::kDcnPlr;
  core::TabularSchema schema;
  std::vector<double> num_mean, num_std;  // standardization (MLP variants)

  struct Plr {
    tensor::DenseF freq;  // [1, k]
    tensor::DenseF w;     // [2k, d_num]
    tensor::DenseF b;     // [d_num]
  };
  std::vector<Plr> plr;                     // per numerical feature (PLR variants)
  std::vector<tensor::DenseF> cat_tables;   // [cardinality + 1, d_cat], row 0 = unseen
  std::vector<tensor::DenseF> cross_w;      // [d0, d0]
  std::vector<tensor::DenseF> cross_b;      // [d0]
  tensor::DenseF proj_w, proj_b;            // [d0, d_proj]

  static TabularTower init(const FusionConfig& cfg, TabularArch arch,
                           const core::TabularSchema& schema, uint64_t seed);
  void fit_standardization(std::span<const core::LabeledRow> rows);
  bool uses_plr() const { return arch != TabularArch::kMlp && arch != TabularArch::kDcn; }
  bool uses_cross() const { return arch != TabularArch::kMlp && arch != TabularArch::kMlpPlr; }
  int input_dim() const;   // d0 (cross variants) or the flattened MLP width
  int output_dim() const;  // d_proj (cross variants) or input_dim()

  // Builds the tower graph for a batch of feature vectors: [n, output_dim()].
  tensor::Var forward(tensor::TapeF& tp, std::span<const core::TabularVector> batch,
                      bool train, bool train_params, uint64_t dropout_seed) const;

  void for_each(const std::function<void(const std::string&, tensor::DenseF&)>& fn);
  void for_each(const std::function<void(const std::string&, const tensor::DenseF&)>& fn) const;
};

// Complete fusion classifier: optional tabular tower, optional transaction
// embedding branch (normalized before concatenation), shared scoring head.
struct FusionModel {
  FusionConfig cfg;
  bool has_tabular = true;
  bool has_embedding = false;
  int d_embed = 0;
  TabularTower tower;
  tensor::DenseF embed_ln_g, embed_ln_b;  // layer-norm branch parameters
  ft::HeadParams head;

  static FusionModel init(const FusionConfig& cfg, TabularArch arch,
                          const core::TabularSchema& schema, bool with_embedding, int d_embed,
                          uint64_t seed);

  // Normalizes the embedding branch per cfg.embed_norm. x is [n, d_embed].
  tensor::Var normalize_embedding(tensor::TapeF& tp, tensor::Var x, bool train_params) const;

  // Full graph for a batch: logits [n, 1]. `embeddings` must be given iff
  // has_embedding; tabular features are read only by the tower and the
  // embedding only by its branch, meeting at this concatenation.
  tensor::Var logits(tensor::TapeF& tp, std::span<const core::TabularVector> batch,
                     const tensor::DenseF* embeddings, bool train, bool train_params,
                     uint64_t dropout_seed) const;

  std::vector<double> score(std::span<const core::LabeledRow> rows,
                            std::span<const tensor::DenseF> embeddings = {}) const;

  void for_each(const std::function<void(const std::string&, tensor::DenseF&)>& fn);
  void for_each(const std::function<void(const std::string&, const tensor::DenseF&)>& fn) const;
};

struct TrainConfig {
  uint64_t seed = 1;
  int epochs = 6;
  int batch_size = 64;
  float lr = 1e-3f;
  float weight_decay = 0.0f;  // the explicit-regularization rung raises this
  int log_every = 50;
  std::string out_dir;
};

struct FitResult {
  FusionModel model;
  double test_auc = 0.0;
  std::vector<double> test_scores;
  std::vector<std::pair<int, double>> loss_curve;
};

// Trains one tabular-only ladder rung and reports its test AUC.
FitResult train_tabular_only(std::span<const core::LabeledRow> train_rows,
                             std::span<const core::LabeledRow> test_rows,
                             const core::TabularSchema& schema, TabularArch arch,
                             const FusionConfig& cfg, const TrainConfig& tcfg);

// Stage-2 (or early-mode) fused training on frozen per-row embeddings.
// `stage1_row_ids`, when given, must be disjoint from the training rows.
FitResult train_fused_frozen(std::span<const core::LabeledRow> train_rows,
                             std::span<const tensor::DenseF> train_embeddings,
                             std::span<const core::LabeledRow> test_rows,
                             std::span<const tensor::DenseF> test_embeddings,
                             const core::TabularSchema& schema, TabularArch arch,
                             const FusionConfig& cfg, const TrainConfig& tcfg,
                             const std::set<std::string>* stage1_row_ids = nullptr);

struct JointExample {
  std::vector<int> tokens;
  core::TabularVector features;
  int label = 0;
  std::string row_id;
};

struct JointConfig {
  FusionConfig fusion;
  TabularArch arch = TabularArch::kDcnPlr;
  TrainConfig train;
  ft::LoraConfig lora;
  bool full_finetune = false;
  float encoder_lr = 0.0f;  // 0: train.lr
};

struct JointResult {
  model::TransformerParams<float> base;  // updated only in full mode
  ft::LoraParams lora;
  FusionModel fusion;
  bool used_lora = true;
  double test_auc = 0.0;
  std::vector<double> test_scores;
  std::vector<std::pair<int, double>> loss_curve;
};

// End-to-end fused training: one BCE loss reaching the head, cross stack,
// embedders, and the transformer (through adapters unless full_finetune).
JointResult joint_fusion(const model::TransformerParams<float>& base,
                         std::span<const JointExample> train, std::span<const JointExample> test,
                         const core::TabularSchema& schema, const JointConfig& cfg);

std::vector<double> joint_score(const JointResult& r, std::span<const JointExample> rows);

void save_fusion(const std::filesystem::path& path, const FusionModel& m,
                 const std::map<std::string, std::string>& metadata);
FusionModel load_fusion(const std::filesystem::path& path,
                        std::map<std::string, std::string>* metadata = nullptr);

}  // namespace txnfm::fuse
