#include "mtl/config.hpp"

#include <cmath>
#include <json.hpp>
#include <set>

#include "mtl/error.hpp"

namespace mtl {

using nlohmann::json;

void PipelineConfig::finalize() {
  if (data.task_count == 0) throw ConfigError("data.task_count must be positive");
  if (!data.positive_rates.empty() && data.positive_rates.size() != data.task_count) {
    throw ConfigError("data.positive_rates needs one entry per task");
  }
  if (data.train_size == 0 || data.val_size == 0) {
    throw ConfigError("data.train_size and data.val_size must be positive");
  }
  if (!(std::abs(data.correlation_rho) < 1.0)) throw ConfigError("data.correlation_rho must lie in (-1,1)");
  if (!(data.flip_rate >= 0.0 && data.flip_rate < 0.5)) throw ConfigError("data.flip_rate must lie in [0,0.5)");
  if (!(filter_threshold >= 0.5 && filter_threshold < 1.0)) {
    throw ConfigError("filter.threshold must lie in [0.5,1)");
  }
  if (feature_dim == 0) throw ConfigError("model.feature_dim must be positive");
  for (auto h : hidden_dims)
    if (h == 0) throw ConfigError("model.hidden_dims entries must be positive");
  for (double t : threshold_grid)
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("selection.threshold_grid values must lie in (0,1)");
  if (!(degenerate_f1 == 0.0 || degenerate_f1 == 1.0)) {
    throw ConfigError("selection.degenerate_f1 must be 0 or 1");
  }
  if (train.epochs == 0) throw ConfigError("train.epochs must be positive");
  train.validate(data.train_size);
  for (const auto& g : groups) {
    if (g.empty()) throw ConfigError("groups must not be empty");
    for (auto t : g)
      if (t >= data.task_count) throw ConfigError("group task index out of range");
  }
  if (ensemble_members.empty()) {
    ensemble_members = {MemberSpec{{32}, 16, 0}, MemberSpec{{24, 16}, 12, 101}};
  }
  if (ensemble_members.size() < 2) throw ConfigError("ensemble.members needs at least 2 entries");
  // Fail early on an infeasible generator config.
  GeneratorConfig probe;
  probe.task_count = data.task_count;
  probe.latent_dim = data.latent_dim;
  probe.input_dim = data.input_dim;
  probe.sample_count = 1;
  probe.positive_rates = rates();
  probe.task_correlation = correlation();
  probe.feature_noise_std = data.feature_noise_std;
  probe.validate();
}

std::vector<double> PipelineConfig::rates() const {
  if (!data.positive_rates.empty()) return data.positive_rates;
  std::vector<double> r(data.task_count);
  for (std::size_t j = 0; j < r.size(); ++j) {
    const double t = r.size() == 1 ? 0.0 : static_cast<double>(j) / static_cast<double>(r.size() - 1);
    r[j] = 0.5 * std::pow(0.06, t);
  }
  return r;
}

RealMatrix PipelineConfig::correlation() const {
  if (!data.task_correlation.empty()) return data.task_correlation;
  return banded_correlation(data.task_count, data.correlation_rho);
}

std::vector<double> PipelineConfig::grid() const {
  return threshold_grid.empty() ? default_threshold_grid() : threshold_grid;
}

std::size_t PipelineConfig::pretrain_epochs() const {
  return pre_epochs.value_or(train.epochs / 2);
}
std::size_t PipelineConfig::finetune_epochs() const {
  return fine_epochs.value_or(train.epochs - train.epochs / 2);
}

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const char* where) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw ConfigError(std::string("unknown key '") + key + "' in " + where);
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

RealMatrix read_matrix(const json& rows) {
  const auto n = rows.size();
  RealMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (rows.at(i).size() != n) throw ConfigError("data.task_correlation must be square");
    for (std::size_t k = 0; k < n; ++k) m(i, k) = rows.at(i).at(k).get<double>();
  }
  return m;
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  if (doc.is_object() && doc.contains("config") && doc.contains("artifacts")) doc = doc["config"];

  PipelineConfig cfg;
  try {
    reject_unknown(doc, {"seed", "data", "model", "train", "filter", "pretrain", "selection",
                         "ensemble", "ablation", "groups"},
                   "config");
    read(doc, "seed", cfg.seed);
    if (doc.contains("data")) {
      const auto& d = doc["data"];
      reject_unknown(d, {"task_count", "latent_dim", "input_dim", "train_size", "val_size",
                         "test_size", "noisy_size", "positive_rates", "correlation_rho",
                         "task_correlation", "feature_noise_std", "flip_rate", "export_csv"},
                     "data");
      auto& c = cfg.data;
      read(d, "task_count", c.task_count);
      read(d, "latent_dim", c.latent_dim);
      read(d, "input_dim", c.input_dim);
      read(d, "train_size", c.train_size);
      read(d, "val_size", c.val_size);
      read(d, "test_size", c.test_size);
      read(d, "noisy_size", c.noisy_size);
      read(d, "positive_rates", c.positive_rates);
      read(d, "correlation_rho", c.correlation_rho);
      if (d.contains("task_correlation") && !d["task_correlation"].empty()) {
        c.task_correlation = read_matrix(d["task_correlation"]);
      }
      read(d, "feature_noise_std", c.feature_noise_std);
      read(d, "flip_rate", c.flip_rate);
      read(d, "export_csv", c.export_csv);
    }
    if (doc.contains("model")) {
      const auto& m = doc["model"];
      reject_unknown(m, {"hidden_dims", "feature_dim"}, "model");
      read(m, "hidden_dims", cfg.hidden_dims);
      read(m, "feature_dim", cfg.feature_dim);
    }
    if (doc.contains("train")) {
      const auto& t = doc["train"];
      reject_unknown(t, {"epochs", "batch_size", "learning_rate", "optimizer", "momentum",
                         "lr_decay", "lambda_mv", "lambda_cr", "mv_absolute", "alpha",
                         "balancing"},
                     "train");
      auto& c = cfg.train;
      read(t, "epochs", c.epochs);
      read(t, "batch_size", c.batch_size);
      read(t, "learning_rate", c.learning_rate);
      if (t.contains("optimizer")) {
        const auto name = t["optimizer"].get<std::string>();
        if (name == "gd") c.optimizer = Optimizer::kGradientDescent;
        else if (name == "momentum") c.optimizer = Optimizer::kMomentum;
        else throw ConfigError("train.optimizer must be \"gd\" or \"momentum\"");
      }
      read(t, "momentum", c.momentum);
      read(t, "lr_decay", c.lr_decay);
      read(t, "lambda_mv", c.loss.mv);
      read(t, "lambda_cr", c.loss.cr);
      read(t, "mv_absolute", c.loss.mv_absolute);
      read(t, "alpha", c.alpha);
      read(t, "balancing", c.balancing);
    }
    if (doc.contains("filter")) {
      reject_unknown(doc["filter"], {"threshold"}, "filter");
      read(doc["filter"], "threshold", cfg.filter_threshold);
    }
    if (doc.contains("pretrain")) {
      const auto& p = doc["pretrain"];
      reject_unknown(p, {"pre_epochs", "fine_epochs"}, "pretrain");
      if (p.contains("pre_epochs") && !p["pre_epochs"].is_null()) cfg.pre_epochs = p["pre_epochs"].get<std::size_t>();
      if (p.contains("fine_epochs") && !p["fine_epochs"].is_null()) cfg.fine_epochs = p["fine_epochs"].get<std::size_t>();
    }
    if (doc.contains("selection")) {
      const auto& s = doc["selection"];
      reject_unknown(s, {"threshold_grid", "degenerate_f1"}, "selection");
      read(s, "threshold_grid", cfg.threshold_grid);
      read(s, "degenerate_f1", cfg.degenerate_f1);
    }
    if (doc.contains("ensemble")) {
      const auto& e = doc["ensemble"];
      reject_unknown(e, {"members"}, "ensemble");
      if (e.contains("members")) {
        for (const auto& m : e["members"]) {
          reject_unknown(m, {"hidden_dims", "feature_dim", "seed_offset"}, "ensemble.members[]");
          MemberSpec spec;
          read(m, "hidden_dims", spec.hidden_dims);
          read(m, "feature_dim", spec.feature_dim);
          read(m, "seed_offset", spec.seed_offset);
          cfg.ensemble_members.push_back(spec);
        }
      }
    }
    if (doc.contains("ablation")) {
      reject_unknown(doc["ablation"], {"seeds"}, "ablation");
      read(doc["ablation"], "seeds", cfg.ablation_seeds);
    }
    read(doc, "groups", cfg.groups);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.train.seed = cfg.seed;
  cfg.train.degenerate_f1 = cfg.degenerate_f1;
  cfg.finalize();
  return cfg;
}

std::string config_to_json(const PipelineConfig& cfg) {
  json corr = json::array();
  const RealMatrix r = cfg.correlation();
  for (std::size_t i = 0; i < r.rows(); ++i) {
    corr.push_back(std::vector<double>(r.row(i).begin(), r.row(i).end()));
  }
  json members = json::array();
  for (const auto& m : cfg.ensemble_members) {
    members.push_back({{"hidden_dims", m.hidden_dims},
                       {"feature_dim", m.feature_dim},
                       {"seed_offset", m.seed_offset}});
  }
  const auto& t = cfg.train;
  json doc = {
      {"seed", cfg.seed},
      {"data",
       {{"task_count", cfg.data.task_count},
        {"latent_dim", cfg.data.latent_dim},
        {"input_dim", cfg.data.input_dim},
        {"train_size", cfg.data.train_size},
        {"val_size", cfg.data.val_size},
        {"test_size", cfg.data.test_size},
        {"noisy_size", cfg.data.noisy_size},
        {"positive_rates", cfg.rates()},
        {"correlation_rho", cfg.data.correlation_rho},
        {"task_correlation", corr},
        {"feature_noise_std", cfg.data.feature_noise_std},
        {"flip_rate", cfg.data.flip_rate},
        {"export_csv", cfg.data.export_csv}}},
      {"model", {{"hidden_dims", cfg.hidden_dims}, {"feature_dim", cfg.feature_dim}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"optimizer", t.optimizer == Optimizer::kMomentum ? "momentum" : "gd"},
        {"momentum", t.momentum},
        {"lr_decay", t.lr_decay},
        {"lambda_mv", t.loss.mv},
        {"lambda_cr", t.loss.cr},
        {"mv_absolute", t.loss.mv_absolute},
        {"alpha", t.alpha},
        {"balancing", t.balancing}}},
      {"filter", {{"threshold", cfg.filter_threshold}}},
      {"pretrain", {{"pre_epochs", cfg.pretrain_epochs()}, {"fine_epochs", cfg.finetune_epochs()}}},
      {"selection", {{"threshold_grid", cfg.grid()}, {"degenerate_f1", cfg.degenerate_f1}}},
      {"ensemble", {{"members", members}}},
      {"ablation", {{"seeds", cfg.ablation_seeds}}},
      {"groups", cfg.groups},
  };
  return doc.dump(2) + "\n";
}

}  // namespace mtl
