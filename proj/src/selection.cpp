#include "mtl/selection.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "mtl/error.hpp"
#include "mtl/numerics.hpp"

namespace mtl {

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("confusion: length mismatch");
  if (pred.empty()) throw EmptySelectionError("confusion: empty input");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double f1(const ConfusionCounts& c, double degenerate) {
  if (c.total() == 0) throw EmptySelectionError("f1: empty counts");
  const auto denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return degenerate;
  return static_cast<double>(2 * c.tp) / static_cast<double>(denom);
}

double accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) throw EmptySelectionError("accuracy: empty counts");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double final_score(double mean_acc, double mean_f1) {
  if (!(mean_acc >= 0.0 && mean_acc <= 1.0 && mean_f1 >= 0.0 && mean_f1 <= 1.0)) {
    throw InvalidArgument("final_score: inputs must lie in [0,1]");
  }
  return (mean_acc + mean_f1) / 2.0;
}

TaskMetrics task_metrics(const ConfusionCounts& c, double degenerate) {
  TaskMetrics m;
  m.counts = c;
  m.f1 = f1(c, degenerate);
  m.acc = accuracy(c);
  m.score = (m.acc + m.f1) / 2.0;
  return m;
}

ConfusionCounts task_confusion(const RealMatrix& probs, const BitMatrix& truth, std::size_t task,
                               double threshold) {
  require_same_shape(probs, truth, "task_confusion");
  if (probs.rows() == 0) throw EmptySelectionError("task_confusion: no samples");
  ConfusionCounts c;
  for (std::size_t n = 0; n < probs.rows(); ++n) {
    const bool p = probs(n, task) >= threshold;
    const bool t = truth(n, task) != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

EvalReport summarize(std::vector<TaskMetrics> tasks) {
  if (tasks.empty()) throw EmptySelectionError("summarize: no tasks");
  EvalReport r;
  for (const auto& t : tasks) {
    r.mean_f1 += t.f1;
    r.mean_acc += t.acc;
  }
  r.mean_f1 /= static_cast<double>(tasks.size());
  r.mean_acc /= static_cast<double>(tasks.size());
  r.final = final_score(r.mean_acc, r.mean_f1);
  r.tasks = std::move(tasks);
  return r;
}

EvalReport evaluate(const RealMatrix& fused, std::span<const double> thresholds,
                    const BitMatrix& truth, double degenerate) {
  require_same_shape(fused, truth, "evaluate");
  if (thresholds.size() != fused.cols()) throw ShapeError("evaluate: one threshold per task");
  std::vector<TaskMetrics> tasks(fused.cols());
  const auto n_tasks = static_cast<std::ptrdiff_t>(fused.cols());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < n_tasks; ++j) {
    tasks[j] = task_metrics(task_confusion(fused, truth, j, thresholds[j]), degenerate);
  }
  return summarize(std::move(tasks));
}

SelectionResult select_checkpoints(const ScoreTable& scores) {
  if (scores.empty()) throw EmptySelectionError("select_checkpoints: empty history");
  const std::size_t tasks = scores.front().size();
  if (tasks == 0) throw EmptySelectionError("select_checkpoints: no tasks");
  for (const auto& row : scores)
    if (row.size() != tasks) throw ShapeError("select_checkpoints: ragged score table");
  SelectionResult r;
  r.tasks.resize(tasks);
  for (std::size_t j = 0; j < tasks; ++j) {
    auto& t = r.tasks[j];
    t.score = scores[0][j];
    for (std::size_t e = 1; e < scores.size(); ++e) {
      if (scores[e][j] > t.score) {
        t.score = scores[e][j];
        t.epoch = e;
      }
    }
    r.composite += t.score;
  }
  r.composite /= static_cast<double>(tasks);
  return r;
}

std::pair<std::size_t, double> best_single_epoch(const ScoreTable& scores) {
  if (scores.empty()) throw EmptySelectionError("best_single_epoch: empty history");
  std::size_t best = 0;
  double best_mean = -INFINITY;
  for (std::size_t e = 0; e < scores.size(); ++e) {
    double mean = 0.0;
    for (double s : scores[e]) mean += s;
    mean /= static_cast<double>(scores[e].size());
    if (mean > best_mean) {
      best_mean = mean;
      best = e;
    }
  }
  return {best, best_mean};
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  // Built from integers so that 0.5 is exactly representable in the grid.
  for (int k = 1; k <= 19; ++k) grid.push_back(k / 20.0);
  return grid;
}

SelectionResult select_thresholds(const RealMatrix& fused, const BitMatrix& truth,
                                  std::span<const double> grid, double degenerate) {
  require_same_shape(fused, truth, "select_thresholds");
  if (grid.empty()) throw InvalidArgument("select_thresholds: empty grid");
  for (double t : grid)
    if (!(t > 0.0 && t < 1.0)) throw InvalidArgument("select_thresholds: grid values must lie in (0,1)");
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());

  SelectionResult r;
  r.tasks.resize(fused.cols());
  for (std::size_t j = 0; j < fused.cols(); ++j) {
    auto& t = r.tasks[j];
    t.score = -INFINITY;
    for (double th : sorted) {
      const double s = task_metrics(task_confusion(fused, truth, j, th), degenerate).score;
      if (s > t.score) {
        t.score = s;
        t.threshold = th;
      }
    }
    r.composite += t.score;
  }
  r.composite /= static_cast<double>(fused.cols());
  return r;
}

namespace {

double score_at_half(std::span<const double> probs, const BitMatrix& truth, std::size_t task,
                     double degenerate) {
  ConfusionCounts c;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const bool p = probs[n] >= 0.5, t = truth(n, task) != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return task_metrics(c, degenerate).score;
}

double blend_prob(std::span<const double> w, std::span<const double> logits) {
  double z = w[0];
  for (std::size_t m = 0; m < logits.size(); ++m) z += w[m + 1] * logits[m];
  return sigmoid_unchecked(z);
}

// L2-regularized logistic regression on member logits by damped Newton steps.
std::vector<double> fit_blend(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                              const EnsembleOptions& opt) {
  const auto n = x.rows();
  const auto dim = x.cols();  // intercept column included
  Eigen::VectorXd w = Eigen::VectorXd::Constant(dim, 1.0 / static_cast<double>(dim - 1));
  w(0) = 0.0;
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(dim, opt.l2);
  penalty(0) = 0.0;

  auto objective = [&](const Eigen::VectorXd& v) {
    double loss = 0.0;
    const Eigen::VectorXd z = x * v;
    for (Eigen::Index i = 0; i < n; ++i) {
      // log(1 + e^z) - y z, computed stably.
      const double zi = z(i);
      loss += (zi > 0 ? zi + std::log1p(std::exp(-zi)) : std::log1p(std::exp(zi))) - y(i) * zi;
    }
    return loss / static_cast<double>(n) + 0.5 * (penalty.array() * v.array().square()).sum();
  };

  double current = objective(w);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    const Eigen::VectorXd z = x * w;
    Eigen::VectorXd p(n), s(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = sigmoid_unchecked(z(i));
      s(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd grad =
        x.transpose() * (p - y) / static_cast<double>(n) + penalty.cwiseProduct(w);
    Eigen::MatrixXd hess = x.transpose() * s.asDiagonal() * x / static_cast<double>(n);
    hess.diagonal() += penalty + Eigen::VectorXd::Constant(dim, 1e-9);
    const Eigen::VectorXd step = hess.ldlt().solve(grad);
    double t = 1.0;
    bool improved = false;
    for (int half = 0; half < 30; ++half, t *= 0.5) {
      const Eigen::VectorXd cand = w - t * step;
      const double val = objective(cand);
      if (std::isfinite(val) && val <= current) {
        improved = current - val > 1e-14;
        w = cand;
        current = val;
        break;
      }
    }
    if (!improved) break;
  }
  return {w.data(), w.data() + dim};
}

}  // namespace

EnsembleModel fit_ensemble(std::span<const RealMatrix> member_probs, const BitMatrix& truth,
                           const EnsembleOptions& opt) {
  if (member_probs.size() < 2) throw InvalidArgument("fit_ensemble: need at least 2 members");
  for (const auto& m : member_probs) require_same_shape(m, truth, "fit_ensemble");
  if (truth.rows() == 0) throw EmptySelectionError("fit_ensemble: no samples");
  const std::size_t members = member_probs.size();
  const std::size_t rows = truth.rows();

  EnsembleModel model;
  model.members = members;
  model.tasks.resize(truth.cols());
  std::vector<double> probs(rows);

  for (std::size_t j = 0; j < truth.cols(); ++j) {
    auto& task = model.tasks[j];
    // Uniform average is always a candidate and the fallback.
    for (std::size_t n = 0; n < rows; ++n) {
      double s = 0.0;
      for (const auto& m : member_probs) s += m(n, j);
      probs[n] = s / static_cast<double>(members);
    }
    task.kind = TaskBlend::Kind::kUniform;
    task.fit_score = score_at_half(probs, truth, j, opt.degenerate_f1);

    bool constant = true;
    for (const auto& m : member_probs) {
      for (std::size_t n = 1; n < rows && constant; ++n) constant = m(n, j) == m(0, j);
    }
    if (constant) {
      task.degenerate_input = true;
      continue;
    }
    // Identical members carry no blending signal and make the fit singular.
    bool identical = true;
    for (std::size_t m = 1; m < members && identical; ++m) {
      for (std::size_t n = 0; n < rows && identical; ++n) {
        identical = member_probs[m](n, j) == member_probs[0](n, j);
      }
    }
    if (identical) continue;

    Eigen::MatrixXd x(rows, members + 1);
    Eigen::VectorXd y(rows);
    for (std::size_t n = 0; n < rows; ++n) {
      x(n, 0) = 1.0;
      for (std::size_t m = 0; m < members; ++m) x(n, m + 1) = logit(member_probs[m](n, j));
      y(n) = truth(n, j);
    }
    const auto w = fit_blend(x, y, opt);
    std::vector<double> logits(members);
    for (std::size_t n = 0; n < rows; ++n) {
      for (std::size_t m = 0; m < members; ++m) logits[m] = x(n, m + 1);
      probs[n] = blend_prob(w, logits);
    }
    const double blend_score = score_at_half(probs, truth, j, opt.degenerate_f1);
    if (blend_score > task.fit_score) {
      task.kind = TaskBlend::Kind::kBlend;
      task.weights = w;
      task.fit_score = blend_score;
    }
    for (std::size_t m = 0; m < members; ++m) {
      for (std::size_t n = 0; n < rows; ++n) probs[n] = member_probs[m](n, j);
      const double member_score = score_at_half(probs, truth, j, opt.degenerate_f1);
      if (member_score > task.fit_score) {
        task.kind = TaskBlend::Kind::kSingleMember;
        task.member = m;
        task.weights.clear();
        task.fit_score = member_score;
      }
    }
  }
  return model;
}

RealMatrix apply_ensemble(const EnsembleModel& model, std::span<const RealMatrix> member_probs) {
  if (member_probs.size() != model.members) throw ShapeError("apply_ensemble: member count mismatch");
  const RealMatrix& first = member_probs.front();
  for (const auto& m : member_probs) require_same_shape(m, first, "apply_ensemble");
  if (first.cols() != model.tasks.size()) throw ShapeError("apply_ensemble: task count mismatch");
  RealMatrix out(first.rows(), first.cols());
  std::vector<double> logits(model.members);
  for (std::size_t j = 0; j < model.tasks.size(); ++j) {
    const auto& task = model.tasks[j];
    for (std::size_t n = 0; n < first.rows(); ++n) {
      switch (task.kind) {
        case TaskBlend::Kind::kBlend:
          for (std::size_t m = 0; m < model.members; ++m) logits[m] = logit(member_probs[m](n, j));
          out(n, j) = blend_prob(task.weights, logits);
          break;
        case TaskBlend::Kind::kSingleMember:
          out(n, j) = member_probs[task.member](n, j);
          break;
        case TaskBlend::Kind::kUniform: {
          double s = 0.0;
          for (const auto& m : member_probs) s += m(n, j);
          out(n, j) = s / static_cast<double>(model.members);
          break;
        }
      }
    }
  }
  return out;
}

using nlohmann::json;

std::string selection_to_json(const SelectionResult& result) {
  json tasks = json::object();
  for (std::size_t j = 0; j < result.tasks.size(); ++j) {
    const auto& t = result.tasks[j];
    tasks[std::to_string(j)] = {{"epoch", t.epoch},
                                {"threshold", t.threshold},
                                {"score", t.score},
                                {"weights", t.weights}};
  }
  json doc = {{"composite", result.composite},
              {"selection_set", result.selection_set},
              {"tasks", tasks}};
  return doc.dump(2) + "\n";
}

SelectionResult selection_from_json(const std::string& text) {
  try {
    const auto doc = json::parse(text);
    SelectionResult r;
    r.composite = doc.at("composite").get<double>();
    r.selection_set = doc.value("selection_set", std::string("validation"));
    const auto& tasks = doc.at("tasks");
    r.tasks.resize(tasks.size());
    for (std::size_t j = 0; j < tasks.size(); ++j) {
      const auto& t = tasks.at(std::to_string(j));
      r.tasks[j].epoch = t.at("epoch").get<std::size_t>();
      r.tasks[j].threshold = t.at("threshold").get<double>();
      r.tasks[j].score = t.at("score").get<double>();
      r.tasks[j].weights = t.value("weights", std::vector<double>{});
    }
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("selection json: ") + e.what());
  }
}

namespace {
const char* kind_name(TaskBlend::Kind k) {
  switch (k) {
    case TaskBlend::Kind::kBlend: return "blend";
    case TaskBlend::Kind::kSingleMember: return "member";
    case TaskBlend::Kind::kUniform: break;
  }
  return "uniform";
}
}  // namespace

std::string ensemble_to_json(const EnsembleModel& model) {
  json tasks = json::object();
  for (std::size_t j = 0; j < model.tasks.size(); ++j) {
    const auto& t = model.tasks[j];
    tasks[std::to_string(j)] = {{"kind", kind_name(t.kind)},
                                {"weights", t.weights},
                                {"member", t.member},
                                {"degenerate_input", t.degenerate_input},
                                {"fit_score", t.fit_score}};
  }
  return json{{"members", model.members}, {"tasks", tasks}}.dump(2) + "\n";
}

EnsembleModel ensemble_from_json(const std::string& text) {
  try {
    const auto doc = json::parse(text);
    EnsembleModel m;
    m.members = doc.at("members").get<std::size_t>();
    const auto& tasks = doc.at("tasks");
    m.tasks.resize(tasks.size());
    for (std::size_t j = 0; j < tasks.size(); ++j) {
      const auto& t = tasks.at(std::to_string(j));
      const auto kind = t.at("kind").get<std::string>();
      auto& out = m.tasks[j];
      if (kind == "blend") out.kind = TaskBlend::Kind::kBlend;
      else if (kind == "member") out.kind = TaskBlend::Kind::kSingleMember;
      else if (kind == "uniform") out.kind = TaskBlend::Kind::kUniform;
      else throw ParseError("ensemble json: unknown kind " + kind);
      out.weights = t.at("weights").get<std::vector<double>>();
      out.member = t.at("member").get<std::size_t>();
      out.degenerate_input = t.value("degenerate_input", false);
      out.fit_score = t.value("fit_score", 0.0);
      if (out.kind == TaskBlend::Kind::kBlend && out.weights.size() != m.members + 1) {
        throw ParseError("ensemble json: blend needs members + 1 weights");
      }
      if (out.kind == TaskBlend::Kind::kSingleMember && out.member >= m.members) {
        throw ParseError("ensemble json: member index out of range");
      }
    }
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("ensemble json: ") + e.what());
  }
}

}  // namespace mtl
