#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "txnfm/finetune.hpp"
#include "txnfm/fusion.hpp"
#include "txnfm/model.hpp"
#include "txnfm/synth.hpp"

namespace txnfm::cfg {

// One document drives a whole run. Unknown keys anywhere are rejected, and
// every consumer writes the fully-resolved document (defaults filled in) next
// to its artifacts so any result can be traced to the exact settings.
struct RunConfig {
  uint64_t seed = 1;
  std::string out_dir = "runs/out";

  synth::GeneratorConfig generator;

  int vocab_text_tokens = 512;  // total text ids: 256 bytes + learned merges

  model::ModelConfig model;    // vocab_size is always derived, never configured

  // pretraining loop
  int pretrain_steps = 2000;
  int pretrain_batch = 8;
  float pretrain_lr = 3e-4f;
  float pretrain_weight_decay = 0.01f;
  int pretrain_warmup = 20;
  int pretrain_log_every = 10;
  int pretrain_checkpoint_every = 0;
  double pretrain_stop_below = -1;

  ft::FinetuneConfig finetune;

  fuse::FusionConfig fusion;
  fuse::FusionMode fusion_mode = fuse::FusionMode::kJoint;
  fuse::TabularArch fusion_arch = fuse::TabularArch::kDcnPlr;
  fuse::TrainConfig fusion_train;
  float fusion_encoder_lr = 0.0f;
  bool fusion_full_finetune = false;
  double stage1_fraction = 0.2;

  std::vector<uint64_t> eval_seeds = {1, 2, 3, 4, 5};
  std::vector<int> context_levels = {64, 128, 256};
  std::vector<int> data_levels = {5000, 20000, 50000};
  std::vector<int> d_model_levels = {32, 64};
  int stability_windows = 4;

  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  std::string to_json() const;  // canonical, fully resolved
  uint64_t fingerprint() const;
  void save_resolved(const std::filesystem::path& path) const;
  void validate() const;
};

std::string sources_string(const std::vector<core::Source>& sources);
std::vector<core::Source> parse_sources(const std::string& s);

}  // namespace txnfm::cfg
