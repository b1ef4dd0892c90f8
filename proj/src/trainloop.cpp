#include "mtl/trainloop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mtl/binary_io.hpp"
#include "mtl/error.hpp"
#include "mtl/file_io.hpp"
#include "mtl/rng.hpp"

namespace mtl {

void TrainConfig::validate(std::size_t train_size) const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (batch_size > train_size) throw ConfigError("train: batch_size exceeds training-set size");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0,1)");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train: lr_decay must lie in (0,1]");
  if (!(loss.mv >= 0.0 && loss.cr >= 0.0)) throw ConfigError("train: loss weights must be >= 0");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("train: alpha must lie in (0,1]");
}

double Checkpoint::mean_score() const {
  double s = 0.0;
  for (const auto& m : metrics) s += m.score;
  return metrics.empty() ? 0.0 : s / static_cast<double>(metrics.size());
}

ScoreTable CheckpointHistory::score_table() const {
  ScoreTable table;
  for (const auto& c : checkpoints) {
    auto& row = table.emplace_back();
    for (const auto& m : c.metrics) row.push_back(m.score);
  }
  return table;
}

void CheckpointHistory::validate() const {
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (i > 0 && checkpoints[i].epoch <= checkpoints[i - 1].epoch) {
      throw ContractError("history: epochs must be strictly increasing");
    }
    if (checkpoints[i].metrics.size() != task_count) {
      throw ContractError("history: checkpoint task count mismatch");
    }
  }
}

std::vector<TaskMetrics> validation_metrics(const TwoViewModel& model, const LabeledDataset& val,
                                            RealMatrix* fused_out, Backend backend,
                                            double degenerate_f1) {
  auto pred = forward(model, val.features, backend);
  const std::vector<double> half(model.task_count(), 0.5);
  auto report = evaluate(pred.fused, half, val.labels, degenerate_f1);
  if (fused_out) *fused_out = std::move(pred.fused);
  return std::move(report.tasks);
}

namespace {

void require_compatible(const TwoViewModel& model, const LabeledDataset& ds, const char* which) {
  ds.validate();
  if (ds.input_dim() != model.input_dim() || ds.task_count() != model.task_count()) {
    throw ShapeError(std::string(which) + " dataset dims do not match the model");
  }
}

template <typename Params>
bool all_finite(const Params& g) {
  bool ok = true;
  for_each_dense(g, [&](const Dense& d) {
    for (double v : d.weight.data()) ok = ok && std::isfinite(v);
    for (double v : d.bias) ok = ok && std::isfinite(v);
  });
  return ok;
}

std::uint64_t batch_seed(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
  return mix64(seed ^ mix64((static_cast<std::uint64_t>(epoch) << 32) + batch + 1));
}

}  // namespace

CheckpointHistory train(TwoViewModel& model, const LabeledDataset& train_ds,
                        const LabeledDataset& val_ds, const TrainConfig& config) {
  model.validate();
  require_compatible(model, train_ds, "training");
  require_compatible(model, val_ds, "validation");
  if (val_ds.size() == 0) throw ContractError("train: validation set is empty");
  CheckpointHistory history;
  history.task_count = model.task_count();
  if (config.epochs == 0) return history;
  config.validate(train_ds.size());

  const std::size_t rows = train_ds.size();
  std::vector<std::size_t> order(rows);
  ModelGradients velocity = ModelGradients::zeros_like(model);
  double lr = config.learning_rate;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    CounterRng shuffle_rng = CounterRng::substream(config.seed, epoch);
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    std::size_t batch = 0;
    for (std::size_t begin = 0; begin < rows; begin += config.batch_size, ++batch) {
      const std::size_t end = std::min(rows, begin + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const LabeledDataset b = take_rows(train_ds, idx);

      BitMatrix rec_mask = config.balancing
                               ? balance_mask(b.labels, b.mask, config.alpha,
                                              batch_seed(config.seed, epoch, batch))
                               : b.mask;
      if (std::none_of(rec_mask.data().begin(), rec_mask.data().end(), [](auto m) { return m; })) {
        continue;
      }
      const ViewMasks masks{rec_mask, rec_mask};
      auto diverged = [&] {
        return TrainingDivergedError("training diverged at epoch " + std::to_string(epoch) +
                                         ", batch " + std::to_string(batch),
                                     epoch, batch);
      };
      GradientResult step;
      try {
        step = gradients(model, b.features, b.labels, masks, config.loss, config.backend);
      } catch (const InvalidArgument&) {
        // Non-finite activations surface as invalid probabilities.
        throw diverged();
      }
      if (!std::isfinite(step.loss.total) || !all_finite(step.grads)) throw diverged();

      // Parameter update, walking model/gradient/velocity blocks in lockstep.
      std::vector<Dense*> params;
      for_each_dense(model, [&](Dense& d) { params.push_back(&d); });
      std::vector<const Dense*> grads;
      for_each_dense(step.grads, [&](const Dense& d) { grads.push_back(&d); });
      std::vector<Dense*> vel;
      for_each_dense(velocity, [&](Dense& d) { vel.push_back(&d); });
      auto update = [&](double& p, double g, double& v) {
        if (config.optimizer == Optimizer::kMomentum) {
          v = config.momentum * v + g;
          p -= lr * v;
        } else {
          p -= lr * g;
        }
      };
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto& pw = params[k]->weight.data();
        const auto& gw = grads[k]->weight.data();
        auto& vw = vel[k]->weight.data();
        for (std::size_t i = 0; i < pw.size(); ++i) update(pw[i], gw[i], vw[i]);
        for (std::size_t i = 0; i < params[k]->bias.size(); ++i) {
          update(params[k]->bias[i], grads[k]->bias[i], vel[k]->bias[i]);
        }
      }
      if (!all_finite(model)) throw diverged();
    }

    Checkpoint ckpt;
    ckpt.epoch = epoch;
    ckpt.model = model;
    RealMatrix fused;
    ckpt.metrics = validation_metrics(model, val_ds, &fused, config.backend, config.degenerate_f1);
    if (config.keep_val_probs) ckpt.val_probs = std::move(fused);
    history.checkpoints.push_back(std::move(ckpt));
    lr *= config.lr_decay;
  }
  return history;
}

FilterOutcome filter_noisy(const TwoViewModel& model, const LabeledDataset& noisy_ds,
                           double threshold, Backend backend) {
  if (!noisy_ds.noisy_labels) throw ContractError("filter_noisy: dataset has no noisy labels");
  if (!(threshold >= 0.5 && threshold < 1.0)) {
    throw InvalidArgument("filter_noisy: threshold must lie in [0.5, 1)");
  }
  require_compatible(model, noisy_ds, "noisy");
  const BitMatrix& noisy = *noisy_ds.noisy_labels;
  const std::size_t tasks = noisy_ds.task_count();

  FilterOutcome out;
  BitMatrix keep(noisy_ds.size(), tasks, 0);
  if (noisy_ds.size() > 0) {
    const auto pred = forward(model, noisy_ds.features, backend);
    for (std::size_t n = 0; n < noisy_ds.size(); ++n) {
      bool any = false;
      for (std::size_t j = 0; j < tasks; ++j) {
        const double p = pred.fused(n, j);
        const std::uint8_t predicted = p >= 0.5 ? 1 : 0;
        const double confidence = std::max(p, 1.0 - p);
        if (noisy_ds.mask(n, j) && predicted == noisy(n, j) && confidence > threshold) {
          keep(n, j) = 1;
          any = true;
          ++out.kept_labels;
        }
      }
      if (any) out.kept_rows.push_back(n);
    }
  }

  out.data.features = RealMatrix(out.kept_rows.size(), noisy_ds.input_dim());
  out.data.labels = BitMatrix(out.kept_rows.size(), tasks);
  out.data.mask = BitMatrix(out.kept_rows.size(), tasks);
  for (std::size_t r = 0; r < out.kept_rows.size(); ++r) {
    const std::size_t n = out.kept_rows[r];
    std::copy(noisy_ds.features.row(n).begin(), noisy_ds.features.row(n).end(),
              out.data.features.row(r).begin());
    std::copy(noisy.row(n).begin(), noisy.row(n).end(), out.data.labels.row(r).begin());
    std::copy(keep.row(n).begin(), keep.row(n).end(), out.data.mask.row(r).begin());
  }
  return out;
}

PretrainFinetuneResult pretrain_finetune(TwoViewModel& model, const LabeledDataset& ds_a,
                                         const LabeledDataset& ds_c, const LabeledDataset& val_ds,
                                         const TrainConfig& pre_config,
                                         const TrainConfig& fine_config) {
  LabeledDataset a = ds_a;
  a.noisy_labels.reset();
  LabeledDataset c = ds_c;
  c.noisy_labels.reset();
  if (c.size() > 0 && (c.input_dim() != a.input_dim() || c.task_count() != a.task_count())) {
    throw ShapeError("pretrain_finetune: dataset C does not match dataset A");
  }
  PretrainFinetuneResult r;
  r.pretrain = train(model, concat(a, c), val_ds, pre_config);
  r.finetune = train(model, a, val_ds, fine_config);
  return r;
}

namespace {
constexpr std::string_view kCheckpointMagic = "MTLC";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

// "MTLC", u32 version, u64 epoch, u64 C, per task {u64 tp, fp, tn, fn; f64 f1,
// acc, score}, u8 has_probs, [u64 rows, f64 probs], u64 model byte length,
// model bytes (see serialize_model).
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter out;
  out.magic(kCheckpointMagic);
  out.u32(kCheckpointVersion);
  out.u64(ckpt.epoch);
  out.u64(ckpt.metrics.size());
  for (const auto& m : ckpt.metrics) {
    out.u64(m.counts.tp);
    out.u64(m.counts.fp);
    out.u64(m.counts.tn);
    out.u64(m.counts.fn);
    out.f64(m.f1);
    out.f64(m.acc);
    out.f64(m.score);
  }
  out.u8(ckpt.val_probs ? 1 : 0);
  if (ckpt.val_probs) {
    if (ckpt.val_probs->cols() != ckpt.metrics.size()) throw ShapeError("checkpoint probs width");
    out.u64(ckpt.val_probs->rows());
    out.f64s(ckpt.val_probs->data());
  }
  const auto model = serialize_model(ckpt.model);
  out.u64(model.size());
  out.bytes(model);
  return std::move(out.buffer());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_magic(kCheckpointMagic);
  if (const auto v = in.u32(); v != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ckpt;
  ckpt.epoch = in.u64();
  const auto tasks = in.count(1u << 20, "task count");
  ckpt.metrics.resize(tasks);
  for (auto& m : ckpt.metrics) {
    m.counts.tp = in.u64();
    m.counts.fp = in.u64();
    m.counts.tn = in.u64();
    m.counts.fn = in.u64();
    m.f1 = in.f64();
    m.acc = in.f64();
    m.score = in.f64();
  }
  const auto has_probs = in.u8();
  if (has_probs > 1) throw ParseError("bad probs flag");
  if (has_probs) {
    const auto rows = in.count(in.remaining() / 8, "probability rows");
    RealMatrix probs(rows, tasks);
    in.f64s(probs.data());
    ckpt.val_probs = std::move(probs);
  }
  const auto len = in.count(in.remaining(), "model length");
  if (len != in.remaining()) throw ParseError("checkpoint has trailing bytes");
  std::vector<std::uint8_t> model(len);
  in.bytes(model);
  ckpt.model = deserialize_model(model);
  if (ckpt.model.task_count() != tasks) throw ParseError("checkpoint task count mismatch");
  return ckpt;
}

void save_history(const std::filesystem::path& dir, const CheckpointHistory& history) {
  std::filesystem::create_directories(dir);
  char name[32];
  for (const auto& c : history.checkpoints) {
    std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", c.epoch);
    write_file_atomic(dir / name, encode_checkpoint(c));
  }
}

CheckpointHistory load_history(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw MissingInputError("missing checkpoint directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".ckpt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  CheckpointHistory h;
  for (const auto& f : files) h.checkpoints.push_back(decode_checkpoint(read_file(f)));
  if (!h.checkpoints.empty()) h.task_count = h.checkpoints.front().metrics.size();
  try {
    h.validate();
  } catch (const ContractError& e) {
    throw ParseError(e.what());
  }
  return h;
}

std::string metrics_csv(const CheckpointHistory& history) {
  std::string out = "epoch,task,tp,fp,tn,fn,f1,acc,score\n";
  char buf[256];
  for (const auto& c : history.checkpoints) {
    for (std::size_t j = 0; j < c.metrics.size(); ++j) {
      const auto& m = c.metrics[j];
      std::snprintf(buf, sizeof buf, "%zu,%zu,%llu,%llu,%llu,%llu,%.17g,%.17g,%.17g\n", c.epoch, j,
                    static_cast<unsigned long long>(m.counts.tp),
                    static_cast<unsigned long long>(m.counts.fp),
                    static_cast<unsigned long long>(m.counts.tn),
                    static_cast<unsigned long long>(m.counts.fn), m.f1, m.acc, m.score);
      out += buf;
    }
  }
  return out;
}

}  // namespace mtl
