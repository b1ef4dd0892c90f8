#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtl/model.hpp"
#include "mtl/synthdata.hpp"
#include "mtl/trainloop.hpp"

namespace mtl {

struct DataConfig {
  std::size_t task_count = 8;
  std::size_t latent_dim = 12;
  std::size_t input_dim = 24;
  std::size_t train_size = 3000;  // dataset-A
  std::size_t val_size = 1000;    // dataset-B
  std::size_t test_size = 1000;   // untouched split for held-out reporting
  std::size_t noisy_size = 6000;  // pool filtered into dataset-C
  std::vector<double> positive_rates;  // empty: geometric ladder 0.5 -> 0.03
  double correlation_rho = 0.3;        // used when task_correlation is empty
  RealMatrix task_correlation;
  double feature_noise_std = 0.8;
  double flip_rate = 0.19;
  bool export_csv = false;
};

struct MemberSpec {
  std::vector<std::size_t> hidden_dims{32};
  std::size_t feature_dim = 16;
  std::uint64_t seed_offset = 0;
};

struct PipelineConfig {
  std::uint64_t seed = 7;
  DataConfig data;
  std::vector<std::size_t> hidden_dims{32};
  std::size_t feature_dim = 16;
  TrainConfig train;
  double filter_threshold = 0.8;
  std::optional<std::size_t> pre_epochs;   // default: half of train.epochs
  std::optional<std::size_t> fine_epochs;  // default: the other half
  std::vector<double> threshold_grid;      // empty: 0.05, 0.10, ..., 0.95
  double degenerate_f1 = kDefaultDegenerateF1;
  std::vector<MemberSpec> ensemble_members;
  std::vector<std::uint64_t> ablation_seeds{1, 2, 3, 4, 5};
  std::vector<std::vector<std::size_t>> groups;

  // Fills derived defaults and checks ranges; throws ConfigError.
  void finalize();

  std::vector<double> rates() const;
  RealMatrix correlation() const;
  std::vector<double> grid() const;
  std::size_t pretrain_epochs() const;
  std::size_t finetune_epochs() const;
};

// Parses a config document (or a manifest that embeds one). Missing keys
// take defaults; unknown keys are rejected. Throws ParseError on malformed
// JSON and ConfigError on invalid values.
PipelineConfig parse_config(const std::string& text);
std::string config_to_json(const PipelineConfig& cfg);

}  // namespace mtl
