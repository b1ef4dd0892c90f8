#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtl/matrix.hpp"

namespace mtl {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// F1 when tp + fp + fn == 0 (nothing to find and nothing predicted).
inline constexpr double kDefaultDegenerateF1 = 1.0;

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);
double f1(const ConfusionCounts& c, double degenerate = kDefaultDegenerateF1);
double accuracy(const ConfusionCounts& c);
// (accuracy + F1) / 2, both in [0, 1].
double final_score(double mean_acc, double mean_f1);

struct TaskMetrics {
  ConfusionCounts counts;
  double f1 = 0.0;
  double acc = 0.0;
  double score = 0.0;  // (acc + f1) / 2
};

TaskMetrics task_metrics(const ConfusionCounts& c, double degenerate = kDefaultDegenerateF1);

// Confusion counts of column `task` with prediction = prob >= threshold.
ConfusionCounts task_confusion(const RealMatrix& probs, const BitMatrix& truth, std::size_t task,
                               double threshold);

struct EvalReport {
  std::vector<TaskMetrics> tasks;
  double mean_f1 = 0.0;
  double mean_acc = 0.0;
  double final = 0.0;
};

EvalReport evaluate(const RealMatrix& fused, std::span<const double> thresholds,
                    const BitMatrix& truth, double degenerate = kDefaultDegenerateF1);
EvalReport summarize(std::vector<TaskMetrics> tasks);

// Per-epoch per-task metrics; the minimal view of a checkpoint history that
// selection needs.
using ScoreTable = std::vector<std::vector<double>>;  // [epoch][task]

struct TaskSelection {
  std::size_t epoch = 0;
  double threshold = 0.5;
  double score = 0.0;
  std::vector<double> weights;  // ensemble: intercept, then one per member
};

struct SelectionResult {
  std::vector<TaskSelection> tasks;
  double composite = 0.0;  // mean of per-task scores
  std::string selection_set = "validation";
};

// Per task, the earliest epoch with maximal score.
SelectionResult select_checkpoints(const ScoreTable& scores);
// Best mean-over-tasks score achievable by a single epoch, and that epoch.
std::pair<std::size_t, double> best_single_epoch(const ScoreTable& scores);

std::vector<double> default_threshold_grid();

// Per task, the lowest grid threshold maximizing (acc + f1) / 2.
SelectionResult select_thresholds(const RealMatrix& fused, const BitMatrix& truth,
                                  std::span<const double> grid,
                                  double degenerate = kDefaultDegenerateF1);

// Logistic blend sigma(b0 + sum_m b_m logit(p_m)), fit per task.
struct TaskBlend {
  enum class Kind { kBlend, kUniform, kSingleMember };
  Kind kind = Kind::kUniform;
  std::vector<double> weights;  // b0, b1..bM (kBlend) or the equivalent for the chosen rule
  std::size_t member = 0;       // for kSingleMember
  bool degenerate_input = false;
  double fit_score = 0.0;
};

struct EnsembleModel {
  std::size_t members = 0;
  std::vector<TaskBlend> tasks;
};

struct EnsembleOptions {
  std::size_t iterations = 50;  // damped Newton steps
  double l2 = 1e-4;
  double degenerate_f1 = kDefaultDegenerateF1;
};

EnsembleModel fit_ensemble(std::span<const RealMatrix> member_probs, const BitMatrix& truth,
                           const EnsembleOptions& options = {});
RealMatrix apply_ensemble(const EnsembleModel& model, std::span<const RealMatrix> member_probs);

std::string selection_to_json(const SelectionResult& result);
SelectionResult selection_from_json(const std::string& text);
std::string ensemble_to_json(const EnsembleModel& model);
EnsembleModel ensemble_from_json(const std::string& text);

}  // namespace mtl
