#pragma once

// Pipeline commands behind the mtl-coreg CLI. Every command reads its inputs
// from and writes its artifacts under an output directory:
//
//   data/{train,val,test,noisy}.mtld     synth
//   [group<G>/]train/checkpoints/*.ckpt  train (plus metrics.csv, model.mtlm)
//   [group<G>/]filter/filtered.mtld      filter (dataset-C)
//   [group<G>/]select/selection.json     select
//   [group<G>/]ensemble/...              ensemble
//   [group<G>/]eval/report.csv           eval
//   ablate/ablation.csv                  ablate
//   manifest_<command>.json              every command

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mtl/config.hpp"
#include "mtl/selection.hpp"
#include "mtl/trainloop.hpp"

namespace mtl {

inline constexpr const char* kToolVersion = "0.1.0";

struct CommandOptions {
  std::filesystem::path config_path;
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::filesystem::path out_dir = "out";
  std::optional<std::size_t> group;
  std::optional<std::filesystem::path> pretrain_on;  // train: dataset-C for pretrain/finetune
  std::string eval_set;  // eval: "val" or "test"; empty means test if present
};

// Runs one command; returns the process exit code (see ExitCode). Errors are
// reported on stderr.
int run_command(const std::string& command, const CommandOptions& options);

// In-memory building blocks shared by the commands, the ablation harness
// and the tests.
struct SynthBundle {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
  LabeledDataset noisy;
};

SynthBundle synthesize(const PipelineConfig& cfg);
TwoViewModel initial_model(std::size_t input_dim, std::size_t tasks,
                           const std::vector<std::size_t>& hidden_dims, std::size_t feature_dim,
                           std::uint64_t seed);

// Model at the epoch with the best mean validation score ("baseline").
const Checkpoint& baseline_checkpoint(const CheckpointHistory& history);

struct StrategyRow {
  std::string strategy;
  EvalReport report;
};

enum class AblationVariant { kNoMultiview, kNoCoreg, kNoBalancing, kBaseline };
const char* ablation_name(AblationVariant v);

struct AblationRun {
  AblationVariant variant;
  std::uint64_t seed;
  EvalReport report;
};

struct AblationSummary {
  AblationVariant variant;
  double mean_final = 0.0;
  double std_final = 0.0;
  double mean_f1 = 0.0;
  double mean_acc = 0.0;
};

struct AblationReport {
  std::vector<AblationRun> runs;         // variant-major, seeds in config order
  std::vector<AblationSummary> summary;  // w/o L_mv, w/o L_cr, w/o balancing, baseline
};

// For each seed: synthesize data, train all four variants, evaluate the
// baseline checkpoint of each on the test split (val if there is none).
AblationReport run_ablation(const PipelineConfig& cfg, int threads);

}  // namespace mtl
