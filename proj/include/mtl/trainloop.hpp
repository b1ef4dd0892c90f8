#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtl/model.hpp"
#include "mtl/selection.hpp"
#include "mtl/synthdata.hpp"

namespace mtl {

enum class Optimizer { kGradientDescent, kMomentum };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  Optimizer optimizer = Optimizer::kGradientDescent;
  double momentum = 0.9;
  double lr_decay = 1.0;  // learning rate is multiplied by this after every epoch
  LossWeights loss;
  double alpha = 0.2;
  bool balancing = true;
  std::uint64_t seed = 0;
  bool keep_val_probs = false;
  double degenerate_f1 = kDefaultDegenerateF1;
  Backend backend = Backend::kParallel;

  void validate(std::size_t train_size) const;
};

struct Checkpoint {
  std::size_t epoch = 0;
  TwoViewModel model;
  std::vector<TaskMetrics> metrics;     // validation metrics at threshold 0.5
  std::optional<RealMatrix> val_probs;  // fused validation probabilities

  double mean_score() const;
};

struct CheckpointHistory {
  std::vector<Checkpoint> checkpoints;
  std::size_t task_count = 0;

  std::size_t size() const noexcept { return checkpoints.size(); }
  bool empty() const noexcept { return checkpoints.empty(); }
  ScoreTable score_table() const;
  void validate() const;
};

// Validation metrics of a model at a fixed threshold of 0.5.
std::vector<TaskMetrics> validation_metrics(const TwoViewModel& model, const LabeledDataset& val,
                                            RealMatrix* fused_out = nullptr,
                                            Backend backend = Backend::kParallel,
                                            double degenerate_f1 = kDefaultDegenerateF1);

// Mini-batch training with per-task batch balancing; the model is updated in
// place and a checkpoint is appended after every epoch.
CheckpointHistory train(TwoViewModel& model, const LabeledDataset& train_ds,
                        const LabeledDataset& val_ds, const TrainConfig& config);

struct FilterOutcome {
  LabeledDataset data;                // labels = noisy labels, mask = kept entries
  std::vector<std::size_t> kept_rows;  // source row of each output row
  std::size_t kept_labels = 0;
};

// Keeps a noisy label when the fused prediction agrees with it and the
// confidence max(p, 1 - p) exceeds threshold. Rows with nothing kept are dropped.
FilterOutcome filter_noisy(const TwoViewModel& model, const LabeledDataset& noisy_ds,
                           double threshold, Backend backend = Backend::kParallel);

struct PretrainFinetuneResult {
  CheckpointHistory pretrain;
  CheckpointHistory finetune;
};

// Trains on A + C (masks respected), then continues on A alone.
PretrainFinetuneResult pretrain_finetune(TwoViewModel& model, const LabeledDataset& ds_a,
                                         const LabeledDataset& ds_c, const LabeledDataset& val_ds,
                                         const TrainConfig& pre_config,
                                         const TrainConfig& fine_config);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// One file per epoch, epoch_NNNN.ckpt, in dir.
void save_history(const std::filesystem::path& dir, const CheckpointHistory& history);
CheckpointHistory load_history(const std::filesystem::path& dir);

// epoch,task,tp,fp,tn,fn,f1,acc,score
std::string metrics_csv(const CheckpointHistory& history);

}  // namespace mtl
