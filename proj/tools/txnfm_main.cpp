#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "txnfm/config.hpp"
#include "txnfm/pipeline.hpp"

namespace {

using txnfm::Error;
using txnfm::ErrorCategory;

struct Common {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "Run configuration JSON")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Override the config seed")
      ->each([&c](const std::string&) { c.seed_set = true; });
}

txnfm::cfg::RunConfig resolve(const Common& c) {
  txnfm::cfg::RunConfig rc;
  if (!c.config_path.empty()) rc = txnfm::cfg::RunConfig::load(c.config_path);
  if (c.seed_set) rc.seed = c.seed;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transaction-sequence representation learning pipeline"};
  app.require_subcommand(1);

  Common cm;
  std::string data_dir, vocab_dir, base_ckpt, out, scores, mode;
  int jobs = 1;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  add_common(gen, cm);
  gen->add_option("--out", out, "Output directory")->required();

  CLI::App* fitv = app.add_subcommand("fit-vocab", "Fit amount bins and text merges");
  add_common(fitv, cm);
  fitv->add_option("--data", data_dir, "Dataset directory")->required();
  fitv->add_option("--out", out, "Output directory")->required();

  CLI::App* pre = app.add_subcommand("pretrain", "Next-token pretraining");
  add_common(pre, cm);
  pre->add_option("--data", data_dir, "Dataset directory")->required();
  pre->add_option("--vocab", vocab_dir, "Vocabulary file")->required();
  pre->add_option("--out", out, "Output directory")->required();

  CLI::App* fin = app.add_subcommand("finetune", "Supervised head + adapter finetuning");
  add_common(fin, cm);
  fin->add_option("--data", data_dir, "Dataset directory")->required();
  fin->add_option("--vocab", vocab_dir, "Vocabulary file")->required();
  fin->add_option("--base-checkpoint", base_ckpt, "Pretrained checkpoint")->required();
  fin->add_option("--out", out, "Output directory")->required();

  CLI::App* fus = app.add_subcommand("fuse", "Train a fusion classifier");
  add_common(fus, cm);
  fus->add_option("--data", data_dir, "Dataset directory")->required();
  fus->add_option("--vocab", vocab_dir, "Vocabulary file (all modes except tabular)");
  fus->add_option("--base-checkpoint", base_ckpt, "Pretrained checkpoint (non-tabular modes)");
  fus->add_option("--mode", mode, "tabular | early | late | joint (overrides config)");
  fus->add_option("--out", out, "Output directory")->required();

  CLI::App* ev = app.add_subcommand("eval", "Evaluate stored scores against a dataset");
  add_common(ev, cm);
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--scores", scores, "scores.csv produced by fuse/finetune")->required();
  ev->add_option("--out", out, "Report output path (JSON)");

  CLI::App* sw = app.add_subcommand("sweep", "Scaling sweeps: context, data volume, width");
  add_common(sw, cm);
  sw->add_option("--out", out, "Output directory")->required();
  sw->add_option("--jobs", jobs, "Parallel sweep cells")->check(CLI::PositiveNumber);

  CLI::App* st = app.add_subcommand("stability", "Out-of-time window comparison");
  add_common(st, cm);
  st->add_option("--out", out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    txnfm::cfg::RunConfig rc = resolve(cm);
    if (gen->parsed()) {
      txnfm::pipe::stage_gen_data(rc, out);
    } else if (fitv->parsed()) {
      txnfm::pipe::stage_fit_vocab(rc, data_dir, out);
    } else if (pre->parsed()) {
      txnfm::pipe::stage_pretrain(rc, data_dir, vocab_dir, out);
    } else if (fin->parsed()) {
      txnfm::pipe::stage_finetune(rc, data_dir, vocab_dir, base_ckpt, out);
    } else if (fus->parsed()) {
      if (!mode.empty()) rc.fusion_mode = txnfm::fuse::parse_fusion_mode(mode);
      if (rc.fusion_mode != txnfm::fuse::FusionMode::kTabular) {
        if (vocab_dir.empty() || base_ckpt.empty()) {
          throw Error(ErrorCategory::kConfig,
                      "--vocab and --base-checkpoint are required for mode " +
                          txnfm::fuse::fusion_mode_name(rc.fusion_mode));
        }
      }
      txnfm::pipe::stage_fuse(rc, data_dir, vocab_dir, base_ckpt, out);
    } else if (ev->parsed()) {
      txnfm::eval::EvalReport r = txnfm::pipe::stage_eval(rc, data_dir, scores, out);
      std::printf("auc %.6f over %d positives / %d negatives, %zu windows\n", r.auc, r.n_pos,
                  r.n_neg, r.windows.size());
    } else if (sw->parsed()) {
      txnfm::pipe::stage_sweep(rc, out, jobs);
    } else if (st->parsed()) {
      txnfm::pipe::stage_stability(rc, out);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", txnfm::category_name(e.category()), e.what());
    return int(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error [internal]: %s\n", e.what());
    return int(ErrorCategory::kInternal);
  }
  return 0;
}
