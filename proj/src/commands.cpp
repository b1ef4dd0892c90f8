#include "mtl/commands.hpp"

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <map>

#include "mtl/error.hpp"
#include "mtl/file_io.hpp"
#include "mtl/rng.hpp"

namespace mtl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
constexpr std::uint64_t kModelSeedTag = 0x6d6f64656cULL;
constexpr std::uint64_t kNoiseSeedTag = 0x6e6f697365ULL;
}  // namespace

SynthBundle synthesize(const PipelineConfig& cfg) {
  const auto& d = cfg.data;
  GeneratorConfig gen;
  gen.task_count = d.task_count;
  gen.latent_dim = d.latent_dim;
  gen.input_dim = d.input_dim;
  gen.sample_count = d.train_size + d.val_size + d.test_size + d.noisy_size;
  gen.positive_rates = cfg.rates();
  gen.task_correlation = cfg.correlation();
  gen.feature_noise_std = d.feature_noise_std;
  gen.seed = cfg.seed;
  const LabeledDataset all = generate(gen);

  // Carve the pool: clean | noisy, then clean into A | B | test.
  auto frac = [](std::size_t a, std::size_t total) {
    return static_cast<double>(a) / static_cast<double>(total);
  };
  SynthBundle out;
  LabeledDataset clean = all;
  if (d.noisy_size > 0) {
    auto [c, n] = split(all, frac(gen.sample_count - d.noisy_size, gen.sample_count), cfg.seed + 1);
    clean = std::move(c);
    out.noisy = corrupt_labels(n, d.flip_rate, mix64(cfg.seed ^ kNoiseSeedTag));
  }
  auto [a, rest] = split(clean, frac(d.train_size, clean.size()), cfg.seed + 2);
  out.train = std::move(a);
  if (d.test_size > 0) {
    auto [b, t] = split(rest, frac(d.val_size, rest.size()), cfg.seed + 3);
    out.val = std::move(b);
    out.test = std::move(t);
  } else {
    out.val = std::move(rest);
  }
  return out;
}

TwoViewModel initial_model(std::size_t input_dim, std::size_t tasks,
                           const std::vector<std::size_t>& hidden_dims, std::size_t feature_dim,
                           std::uint64_t seed) {
  ModelShape shape;
  shape.input_dim = input_dim;
  shape.task_count = tasks;
  shape.hidden_dims = hidden_dims;
  shape.feature_dim = feature_dim;
  return make_model(shape, mix64(seed ^ kModelSeedTag));
}

const Checkpoint& baseline_checkpoint(const CheckpointHistory& history) {
  if (history.empty()) throw EmptySelectionError("history is empty");
  return history.checkpoints[best_single_epoch(history.score_table()).first];
}

const char* ablation_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kNoMultiview: return "w/o L_mv";
    case AblationVariant::kNoCoreg: return "w/o L_cr";
    case AblationVariant::kNoBalancing: return "w/o batch balancing";
    case AblationVariant::kBaseline: break;
  }
  return "baseline";
}

namespace {

struct Clock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
};

EvalReport evaluate_at(const TwoViewModel& model, const LabeledDataset& ds,
                       std::span<const double> thresholds, double degenerate) {
  return evaluate(forward(model, ds.features).fused, thresholds, ds.labels, degenerate);
}

PipelineConfig variant_config(const PipelineConfig& base, AblationVariant v, std::uint64_t seed) {
  PipelineConfig cfg = base;
  cfg.seed = seed;
  cfg.train.seed = seed;
  switch (v) {
    case AblationVariant::kNoMultiview: cfg.train.loss.mv = 0.0; break;
    case AblationVariant::kNoCoreg: cfg.train.loss.cr = 0.0; break;
    case AblationVariant::kNoBalancing: cfg.train.balancing = false; break;
    case AblationVariant::kBaseline: break;
  }
  return cfg;
}

}  // namespace

AblationReport run_ablation(const PipelineConfig& base, int threads) {
  constexpr std::array variants{AblationVariant::kNoMultiview, AblationVariant::kNoCoreg,
                                AblationVariant::kNoBalancing, AblationVariant::kBaseline};
  const auto& seeds = base.ablation_seeds;
  if (seeds.empty()) throw ConfigError("ablation.seeds must not be empty");
  AblationReport report;
  report.runs.resize(variants.size() * seeds.size());
  std::vector<SynthBundle> data(seeds.size());

  // Runs are independent; each one is single-writer over its own model and
  // lands in a fixed slot, so the merged report does not depend on threads.
  const auto n_seeds = static_cast<std::ptrdiff_t>(seeds.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t s = 0; s < n_seeds; ++s) {
    data[s] = synthesize(variant_config(base, AblationVariant::kBaseline, seeds[s]));
  }

  const auto n_runs = static_cast<std::ptrdiff_t>(report.runs.size());
  std::vector<std::string> errors(report.runs.size());
#pragma omp parallel for schedule(dynamic) num_threads(threads)
  for (std::ptrdiff_t r = 0; r < n_runs; ++r) {
    const std::size_t v = static_cast<std::size_t>(r) / seeds.size();
    const std::size_t s = static_cast<std::size_t>(r) % seeds.size();
    try {
      const PipelineConfig cfg = variant_config(base, variants[v], seeds[s]);
      const auto& bundle = data[s];
      TwoViewModel model = initial_model(bundle.train.input_dim(), bundle.train.task_count(),
                                         cfg.hidden_dims, cfg.feature_dim, cfg.seed);
      const auto history = train(model, bundle.train, bundle.val, cfg.train);
      const auto& eval_ds = bundle.test.size() > 0 ? bundle.test : bundle.val;
      const std::vector<double> half(bundle.train.task_count(), 0.5);
      report.runs[r] = {variants[v], seeds[s],
                        evaluate_at(baseline_checkpoint(history).model, eval_ds, half,
                                    cfg.degenerate_f1)};
    } catch (const std::exception& e) {
      errors[r] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw Error("ablation run failed: " + e);

  for (std::size_t v = 0; v < variants.size(); ++v) {
    AblationSummary sum;
    sum.variant = variants[v];
    const double n = static_cast<double>(seeds.size());
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const auto& rep = report.runs[v * seeds.size() + s].report;
      sum.mean_final += rep.final / n;
      sum.mean_f1 += rep.mean_f1 / n;
      sum.mean_acc += rep.mean_acc / n;
    }
    double ss = 0.0;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const double d = report.runs[v * seeds.size() + s].report.final - sum.mean_final;
      ss += d * d;
    }
    sum.std_final = seeds.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    report.summary.push_back(sum);
  }
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10f", v);
  return buf;
}

std::string confusion_fields(const TaskMetrics& m) {
  return std::to_string(m.counts.tp) + "," + std::to_string(m.counts.fp) + "," +
         std::to_string(m.counts.tn) + "," + std::to_string(m.counts.fn) + "," + fmt(m.f1) + "," +
         fmt(m.acc) + "," + fmt(m.score);
}

// Collects the artifacts a command writes so the manifest can list them.
// Nothing touches the disk until commit(), so a failing command leaves its
// previous outputs alone instead of a partial mix.
class ArtifactSink {
 public:
  explicit ArtifactSink(fs::path root) : root_(std::move(root)) {}

  void write(const fs::path& rel, std::span<const std::uint8_t> bytes) {
    pending_.emplace_back(rel, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
    artifacts_.push_back({{"path", rel.generic_string()}, {"checksum", checksum_hex(bytes)}});
  }
  void write(const fs::path& rel, const std::string& text) {
    write(rel, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                             text.size()));
  }
  // Lists an existing input file (with its checksum) without rewriting it.
  void record(const fs::path& rel) {
    const auto bytes = read_file(root_ / rel);
    artifacts_.push_back({{"path", rel.generic_string()}, {"checksum", checksum_hex(bytes)}});
  }
  // Replaces the contents of out_dir (relative to root) with the pending files.
  void commit(const fs::path& out_dir) {
    fs::remove_all(root_ / out_dir);
    for (const auto& [rel, bytes] : pending_) write_file_atomic(root_ / rel, bytes);
    pending_.clear();
  }
  const json& artifacts() const { return artifacts_; }

 private:
  fs::path root_;
  std::vector<std::pair<fs::path, std::vector<std::uint8_t>>> pending_;
  json artifacts_ = json::array();
};

struct Context {
  PipelineConfig cfg;
  CommandOptions opts;
  fs::path work;  // out_dir, or out_dir/group<G>
  std::vector<std::size_t> tasks;
  json timings = json::object();
};

LabeledDataset load_split(const Context& ctx, const char* name) {
  auto ds = load_dataset(ctx.opts.out_dir / "data" / (std::string(name) + ".mtld"));
  if (ds.task_count() != ctx.cfg.data.task_count) {
    throw ContractError(std::string(name) + ".mtld task count does not match the config");
  }
  if (ctx.tasks.size() != ds.task_count()) ds = select_tasks(ds, ctx.tasks);
  return ds;
}

fs::path rel_work(const Context& ctx, const fs::path& p) {
  return fs::relative(ctx.work / p, ctx.opts.out_dir);
}

void write_manifest(const Context& ctx, const std::string& command, const ArtifactSink& sink) {
  json options = {{"threads", ctx.opts.threads}, {"eval_set", ctx.opts.eval_set}};
  options["group"] = ctx.opts.group ? json(*ctx.opts.group) : json(nullptr);
  options["pretrain_on"] = ctx.opts.pretrain_on ? json(ctx.opts.pretrain_on->string()) : json(nullptr);
  json doc = {{"tool", "mtl-coreg"},
              {"version", kToolVersion},
              {"command", command},
              {"seed", ctx.cfg.seed},
              {"options", options},
              {"config", json::parse(config_to_json(ctx.cfg))},
              {"artifacts", sink.artifacts()},
              {"timings_ms", ctx.timings}};
  write_file_atomic(ctx.opts.out_dir / ("manifest_" + command + ".json"), doc.dump(2) + "\n");
}

void cmd_synth(Context& ctx, ArtifactSink& sink) {
  Clock clock;
  const auto bundle = synthesize(ctx.cfg);
  ctx.timings["generate"] = clock.ms();
  const std::pair<const char*, const LabeledDataset*> parts[] = {
      {"train", &bundle.train}, {"val", &bundle.val}, {"test", &bundle.test}, {"noisy", &bundle.noisy}};
  for (const auto& [name, ds] : parts) {
    if (ds->size() == 0) continue;
    sink.write(fs::path("data") / (std::string(name) + ".mtld"), encode_dataset(*ds));
    if (ctx.cfg.data.export_csv) {
      sink.write(fs::path("data") / (std::string(name) + ".csv"), dataset_csv(*ds));
    }
  }
}

void write_history(ArtifactSink& sink, const fs::path& dir, const CheckpointHistory& h) {
  char name[32];
  for (const auto& c : h.checkpoints) {
    std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", c.epoch);
    sink.write(dir / "checkpoints" / name, encode_checkpoint(c));
  }
  sink.write(dir / "metrics.csv", metrics_csv(h));
}

void cmd_train(Context& ctx, ArtifactSink& sink) {
  const auto train_ds = load_split(ctx, "train");
  const auto val_ds = load_split(ctx, "val");
  TwoViewModel model = initial_model(train_ds.input_dim(), train_ds.task_count(),
                                     ctx.cfg.hidden_dims, ctx.cfg.feature_dim, ctx.cfg.seed);
  Clock clock;
  CheckpointHistory history;
  if (ctx.opts.pretrain_on) {
    auto ds_c = load_dataset(*ctx.opts.pretrain_on);
    TrainConfig pre = ctx.cfg.train, fine = ctx.cfg.train;
    pre.epochs = ctx.cfg.pretrain_epochs();
    fine.epochs = ctx.cfg.finetune_epochs();
    fine.seed = mix64(ctx.cfg.train.seed + 1);
    auto result = pretrain_finetune(model, train_ds, ds_c, val_ds, pre, fine);
    write_history(sink, rel_work(ctx, "train/pretrain"), result.pretrain);
    history = std::move(result.finetune);
  } else {
    history = train(model, train_ds, val_ds, ctx.cfg.train);
  }
  ctx.timings["train"] = clock.ms();
  write_history(sink, rel_work(ctx, "train"), history);
  sink.write(rel_work(ctx, "train/model.mtlm"), serialize_model(model));
}

void cmd_filter(Context& ctx, ArtifactSink& sink) {
  const auto model = deserialize_model(read_file(ctx.work / "train/model.mtlm"));
  const auto noisy = load_split(ctx, "noisy");
  Clock clock;
  const auto outcome = filter_noisy(model, noisy, ctx.cfg.filter_threshold);
  ctx.timings["filter"] = clock.ms();
  sink.write(rel_work(ctx, "filter/filtered.mtld"), encode_dataset(outcome.data));

  // Purity against the generator's clean labels, for reporting only.
  std::size_t agree = 0;
  for (std::size_t r = 0; r < outcome.kept_rows.size(); ++r) {
    for (std::size_t j = 0; j < noisy.task_count(); ++j) {
      if (outcome.data.mask(r, j)) agree += outcome.data.labels(r, j) == noisy.labels(outcome.kept_rows[r], j);
    }
  }
  json summary = {{"threshold", ctx.cfg.filter_threshold},
                  {"pool_rows", noisy.size()},
                  {"pool_labels", noisy.size() * noisy.task_count()},
                  {"kept_rows", outcome.kept_rows.size()},
                  {"kept_labels", outcome.kept_labels},
                  {"kept_label_purity",
                   outcome.kept_labels ? static_cast<double>(agree) / static_cast<double>(outcome.kept_labels) : 0.0}};
  sink.write(rel_work(ctx, "filter/summary.json"), summary.dump(2) + "\n");
}

// Fused probabilities where column j comes from the model at epochs[j].
RealMatrix composite_probs(const CheckpointHistory& history, const std::vector<std::size_t>& epochs,
                           const LabeledDataset& ds) {
  RealMatrix out(ds.size(), epochs.size());
  std::map<std::size_t, RealMatrix> cache;
  for (std::size_t j = 0; j < epochs.size(); ++j) {
    auto it = cache.find(epochs[j]);
    if (it == cache.end()) {
      it = cache.emplace(epochs[j], forward(history.checkpoints.at(epochs[j]).model, ds.features).fused).first;
    }
    for (std::size_t n = 0; n < ds.size(); ++n) out(n, j) = it->second(n, j);
  }
  return out;
}

SelectionResult full_selection(const Context& ctx, const CheckpointHistory& history,
                               const LabeledDataset& val) {
  auto chosen = select_checkpoints(history.score_table());
  std::vector<std::size_t> epochs;
  for (const auto& t : chosen.tasks) epochs.push_back(t.epoch);
  const auto probs = composite_probs(history, epochs, val);
  const auto grid = ctx.cfg.grid();
  const auto thresholds = select_thresholds(probs, val.labels, grid, ctx.cfg.degenerate_f1);
  for (std::size_t j = 0; j < chosen.tasks.size(); ++j) {
    chosen.tasks[j].threshold = thresholds.tasks[j].threshold;
  }
  chosen.selection_set = "validation";
  return chosen;
}

void cmd_select(Context& ctx, ArtifactSink& sink) {
  const auto history = load_history(ctx.work / "train/checkpoints");
  if (history.empty()) throw ContractError("select: checkpoint history is empty");
  const auto val = load_split(ctx, "val");
  Clock clock;
  const auto result = full_selection(ctx, history, val);
  ctx.timings["select"] = clock.ms();
  auto doc = json::parse(selection_to_json(result));
  doc["best_single_epoch"] = best_single_epoch(history.score_table()).first;
  doc["best_single_epoch_mean"] = best_single_epoch(history.score_table()).second;
  sink.write(rel_work(ctx, "select/selection.json"), doc.dump(2) + "\n");
}

std::vector<RealMatrix> member_probs(const std::vector<TwoViewModel>& members, const LabeledDataset& ds) {
  std::vector<RealMatrix> out;
  for (const auto& m : members) out.push_back(forward(m, ds.features).fused);
  return out;
}

void cmd_ensemble(Context& ctx, ArtifactSink& sink) {
  const auto train_ds = load_split(ctx, "train");
  const auto val_ds = load_split(ctx, "val");
  const auto& specs = ctx.cfg.ensemble_members;
  std::vector<TwoViewModel> members(specs.size());
  std::vector<std::string> errors(specs.size());
  Clock clock;
  const auto n_members = static_cast<std::ptrdiff_t>(specs.size());
#pragma omp parallel for schedule(dynamic) num_threads(ctx.opts.threads)
  for (std::ptrdiff_t m = 0; m < n_members; ++m) {
    try {
      TrainConfig tc = ctx.cfg.train;
      tc.seed = ctx.cfg.seed + specs[m].seed_offset;
      TwoViewModel model = initial_model(train_ds.input_dim(), train_ds.task_count(),
                                         specs[m].hidden_dims, specs[m].feature_dim, tc.seed);
      const auto history = train(model, train_ds, val_ds, tc);
      members[m] = baseline_checkpoint(history).model;
    } catch (const std::exception& e) {
      errors[m] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw Error("ensemble member failed: " + e);
  ctx.timings["train_members"] = clock.ms();

  EnsembleOptions opt;
  opt.degenerate_f1 = ctx.cfg.degenerate_f1;
  const auto probs = member_probs(members, val_ds);
  const auto ensemble = fit_ensemble(probs, val_ds.labels, opt);
  for (std::size_t m = 0; m < members.size(); ++m) {
    sink.write(rel_work(ctx, "ensemble/member_" + std::to_string(m) + ".mtlm"), serialize_model(members[m]));
  }
  sink.write(rel_work(ctx, "ensemble/ensemble.json"), ensemble_to_json(ensemble));
}

std::string report_csv(const std::vector<StrategyRow>& rows, const std::string& eval_set,
                       const std::string& selection_set) {
  std::string out = "strategy,f1,accuracy,final,eval_set,selection_set,in_sample\n";
  for (const auto& r : rows) {
    out += r.strategy + "," + fmt(r.report.mean_f1) + "," + fmt(r.report.mean_acc) + "," +
           fmt(r.report.final) + "," + eval_set + "," + selection_set + "," +
           (eval_set == "val" ? "true" : "false") + "\n";
  }
  return out;
}

void cmd_eval(Context& ctx, ArtifactSink& sink) {
  if (ctx.opts.eval_set != "val" && ctx.opts.eval_set != "test") {
    throw ContractError("eval: --dataset must be val or test");
  }
  const auto history = load_history(ctx.work / "train/checkpoints");
  if (history.empty()) throw ContractError("eval: checkpoint history is empty");
  const auto ds = load_split(ctx, ctx.opts.eval_set.c_str());
  const std::size_t tasks = ds.task_count();
  const std::vector<double> half(tasks, 0.5);
  const double degenerate = ctx.cfg.degenerate_f1;

  SelectionResult selection;
  const fs::path selection_path = ctx.work / "select/selection.json";
  if (fs::exists(selection_path)) {
    const auto bytes = read_file(selection_path);
    selection = selection_from_json(std::string(bytes.begin(), bytes.end()));
    sink.record(rel_work(ctx, "select/selection.json"));
  } else {
    selection = full_selection(ctx, history, load_split(ctx, "val"));
  }
  if (selection.tasks.size() != tasks) throw ContractError("eval: selection task count mismatch");
  std::vector<std::size_t> epochs;
  std::vector<double> thresholds;
  for (const auto& t : selection.tasks) {
    if (t.epoch >= history.size()) throw ContractError("eval: selected epoch not in history");
    epochs.push_back(t.epoch);
    thresholds.push_back(t.threshold);
  }

  std::vector<StrategyRow> rows;
  rows.push_back({"baseline", evaluate_at(baseline_checkpoint(history).model, ds, half, degenerate)});
  const auto chosen_probs = composite_probs(history, epochs, ds);
  rows.push_back({"chosen", evaluate(chosen_probs, half, ds.labels, degenerate)});
  rows.push_back({"chosen-threshold", evaluate(chosen_probs, thresholds, ds.labels, degenerate)});

  const fs::path ensemble_path = ctx.work / "ensemble/ensemble.json";
  if (fs::exists(ensemble_path)) {
    const auto bytes = read_file(ensemble_path);
    const auto ensemble = ensemble_from_json(std::string(bytes.begin(), bytes.end()));
    std::vector<TwoViewModel> members;
    for (std::size_t m = 0; m < ensemble.members; ++m) {
      members.push_back(deserialize_model(
          read_file(ctx.work / "ensemble" / ("member_" + std::to_string(m) + ".mtlm"))));
    }
    const auto probs = apply_ensemble(ensemble, member_probs(members, ds));
    rows.push_back({"ensemble", evaluate(probs, half, ds.labels, degenerate)});
  }

  sink.write(rel_work(ctx, "eval/report.csv"), report_csv(rows, ctx.opts.eval_set, selection.selection_set));
  std::string per_task = "strategy,task,tp,fp,tn,fn,f1,acc,score\n";
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.report.tasks.size(); ++j) {
      per_task += r.strategy + "," + std::to_string(j) + "," + confusion_fields(r.report.tasks[j]) + "\n";
    }
  }
  sink.write(rel_work(ctx, "eval/per_task.csv"), per_task);
}

void cmd_ablate(Context& ctx, ArtifactSink& sink) {
  Clock clock;
  const auto report = run_ablation(ctx.cfg, ctx.opts.threads);
  ctx.timings["ablate"] = clock.ms();
  std::string table = "variant,mean_final,std_final,mean_f1,mean_acc,seeds\n";
  for (const auto& s : report.summary) {
    table += std::string(ablation_name(s.variant)) + "," + fmt(s.mean_final) + "," + fmt(s.std_final) +
             "," + fmt(s.mean_f1) + "," + fmt(s.mean_acc) + "," + std::to_string(ctx.cfg.ablation_seeds.size()) + "\n";
  }
  std::string runs = "variant,seed,f1,accuracy,final\n";
  std::string confusions = "variant,seed,task,tp,fp,tn,fn,f1,acc,score\n";
  for (const auto& r : report.runs) {
    const std::string head = std::string(ablation_name(r.variant)) + "," + std::to_string(r.seed);
    runs += head + "," + fmt(r.report.mean_f1) + "," + fmt(r.report.mean_acc) + "," + fmt(r.report.final) + "\n";
    for (std::size_t j = 0; j < r.report.tasks.size(); ++j) {
      confusions += head + "," + std::to_string(j) + "," + confusion_fields(r.report.tasks[j]) + "\n";
    }
  }
  sink.write("ablate/ablation.csv", table);
  sink.write("ablate/runs.csv", runs);
  sink.write("ablate/confusions.csv", confusions);
}

}  // namespace

int run_command(const std::string& command, const CommandOptions& options) {
  using Handler = void (*)(Context&, ArtifactSink&);
  struct Command {
    Handler run;
    const char* output;  // directory the command owns
    bool per_group;      // output lives under group<G>/ when --group is set
  };
  static const std::map<std::string, Command> handlers = {
      {"synth", {cmd_synth, "data", false}},        {"train", {cmd_train, "train", true}},
      {"filter", {cmd_filter, "filter", true}},     {"select", {cmd_select, "select", true}},
      {"ensemble", {cmd_ensemble, "ensemble", true}}, {"eval", {cmd_eval, "eval", true}},
      {"ablate", {cmd_ablate, "ablate", false}}};
  const auto it = handlers.find(command);
  if (it == handlers.end()) {
    std::cerr << "mtl-coreg: unknown command '" << command << "'\n";
    return static_cast<int>(ExitCode::kUsage);
  }
  try {
    Context ctx;
    ctx.opts = options;
    if (ctx.opts.threads < 1) throw ConfigError("--threads must be >= 1");
    omp_set_num_threads(ctx.opts.threads);
    const auto bytes = read_file(options.config_path);
    const std::string text(bytes.begin(), bytes.end());
    ctx.cfg = parse_config(text);
    // Re-running from a manifest restores the options it recorded.
    if (const auto doc = json::parse(text, nullptr, false); doc.is_object() && doc.contains("options")) {
      const auto& o = doc["options"];
      if (!ctx.opts.group && o.contains("group") && o["group"].is_number_unsigned()) {
        ctx.opts.group = o["group"].get<std::size_t>();
      }
      if (!ctx.opts.pretrain_on && o.contains("pretrain_on") && o["pretrain_on"].is_string()) {
        ctx.opts.pretrain_on = o["pretrain_on"].get<std::string>();
      }
      if (ctx.opts.eval_set.empty() && o.contains("eval_set") && o["eval_set"].is_string()) {
        ctx.opts.eval_set = o["eval_set"].get<std::string>();
      }
    }
    if (ctx.opts.eval_set.empty()) {
      ctx.opts.eval_set = fs::exists(options.out_dir / "data/test.mtld") ? "test" : "val";
    }
    if (options.seed) {
      ctx.cfg.seed = *options.seed;
      ctx.cfg.train.seed = *options.seed;
    }
    ctx.work = options.out_dir;
    for (std::size_t j = 0; j < ctx.cfg.data.task_count; ++j) ctx.tasks.push_back(j);
    if (ctx.opts.group) {
      if (*ctx.opts.group >= ctx.cfg.groups.size()) throw ConfigError("--group index out of range");
      ctx.tasks = ctx.cfg.groups[*ctx.opts.group];
      ctx.work = options.out_dir / ("group" + std::to_string(*ctx.opts.group));
    }
    ArtifactSink sink(options.out_dir);
    it->second.run(ctx, sink);
    sink.commit(it->second.per_group ? rel_work(ctx, it->second.output) : fs::path(it->second.output));
    write_manifest(ctx, command, sink);
    return 0;
  } catch (const Error& e) {
    std::cerr << "mtl-coreg " << command << ": " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "mtl-coreg " << command << ": " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  }
}

}  // namespace mtl
