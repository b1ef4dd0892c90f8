#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mtl/matrix.hpp"
#include "mtl/rng.hpp"

namespace mtl {

// Latent-factor generator for correlated, imbalanced multi-label data.
// Label scores s = L z with L L^T = task_correlation; y_j = 1[s_j > tau_j]
// where tau_j is the empirical (1 - rate_j) quantile of s_j. Features are a
// random affine map of the full latent vector plus Gaussian noise.
struct GeneratorConfig {
  std::size_t task_count = 8;
  std::size_t latent_dim = 12;  // >= task_count; extra factors are nuisance
  std::size_t input_dim = 24;
  std::size_t sample_count = 4000;
  std::vector<double> positive_rates;  // one per task, in (0, 1)
  RealMatrix task_correlation;         // C x C; empty means identity
  double feature_noise_std = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// AR(1)-style correlation rho^|j-k|, always positive definite for |rho| < 1.
RealMatrix banded_correlation(std::size_t tasks, double rho);

struct LabeledDataset {
  RealMatrix features;
  BitMatrix labels;
  std::optional<BitMatrix> noisy_labels;
  BitMatrix mask;  // 1 = label usable for training

  std::size_t size() const noexcept { return features.rows(); }
  std::size_t task_count() const noexcept { return labels.cols(); }
  std::size_t input_dim() const noexcept { return features.cols(); }
  void validate() const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

LabeledDataset generate(const GeneratorConfig& config);

// Random partition; the first side gets ceil(fraction * N) rows. Rows keep
// their original relative order on each side.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double train_fraction,
                                                std::uint64_t seed);

// Same as split but returns the row indices of each side.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t rows, double train_fraction, std::uint64_t seed);

// Flips each clean label independently with probability flip_rate into
// noisy_labels. labels stay clean.
LabeledDataset corrupt_labels(const LabeledDataset& ds, double flip_rate, std::uint64_t seed);

LabeledDataset take_rows(const LabeledDataset& ds, std::span<const std::size_t> rows);
LabeledDataset select_tasks(const LabeledDataset& ds, std::span<const std::size_t> tasks);
// Rows of b after rows of a. An empty side is ignored; otherwise noisy_labels
// survive only if both have them.
LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b);

struct BalanceSelection {
  std::vector<std::size_t> kept;  // ascending indices into the batch
  double alpha = 0.2;
  std::size_t positives = 0;
  std::size_t negatives_kept = 0;
};

// Keeps every positive. If alpha * N_neg > N_pos, keeps a uniformly random
// subset of round_half_even(alpha * N_neg) negatives, otherwise all of them.
BalanceSelection batch_balance(std::span<const std::uint8_t> labels, double alpha, CounterRng& rng);

// Applies batch_balance to every task column of a batch, restricted to rows
// where valid == 1. Column j draws from CounterRng::substream(seed, id_j),
// where id_j is task_ids[j] (default: j), so a task keeps its stream when
// columns are reordered or subset.
BitMatrix balance_mask(const BitMatrix& labels, const BitMatrix& valid, double alpha,
                       std::uint64_t seed, std::span<const std::size_t> task_ids = {});

std::vector<std::uint8_t> encode_dataset(const LabeledDataset& ds);
LabeledDataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path);
std::string dataset_csv(const LabeledDataset& ds);

}  // namespace mtl
