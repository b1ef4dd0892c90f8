#include <doctest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "mtl/file_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSmallConfig = R"({
  "seed": 5,
  "data": {"task_count": 4, "latent_dim": 6, "input_dim": 10, "train_size": 400,
           "val_size": 200, "test_size": 200, "noisy_size": 400, "export_csv": true},
  "model": {"hidden_dims": [12], "feature_dim": 6},
  "train": {"epochs": 4, "batch_size": 32},
  "ensemble": {"members": [{"hidden_dims": [8], "feature_dim": 4},
                           {"hidden_dims": [12], "feature_dim": 6, "seed_offset": 9}]},
  "ablation": {"seeds": [3]},
  "groups": [[0, 1], [2, 3]]
})";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mtl_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::string& args) {
  const std::string cmd = std::string(MTL_CLI_PATH) + " " + args + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string run_args(const std::string& command, const fs::path& config, const fs::path& out,
                     const std::string& extra = "") {
  return command + " --config " + config.string() + " --out " + out.string() + " --threads 1 " + extra;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text(p));
  std::string line;
  while (std::getline(in, line)) {
    auto& row = rows.emplace_back();
    std::istringstream fields(line);
    std::string f;
    while (std::getline(fields, f, ',')) row.push_back(f);
  }
  return rows;
}

// Every artifact listed in a manifest, with its recorded checksum.
std::map<std::string, std::string> artifacts(const fs::path& manifest) {
  std::map<std::string, std::string> out;
  const auto doc = json::parse(read_text(manifest));
  for (const auto& a : doc["artifacts"]) {
    out[a["path"].get<std::string>()] = a["checksum"].get<std::string>();
  }
  return out;
}

}  // namespace

TEST_CASE("exit codes for usage, missing, malformed and invalid inputs") {
  const auto dir = scratch("codes");
  CHECK(run("") == 1);
  CHECK(run("frobnicate --config x") == 1);
  CHECK(run("synth") == 1);
  CHECK(run(run_args("synth", dir / "absent.json", dir / "out")) == 2);

  write_text(dir / "broken.json", "{\"seed\": ");
  CHECK(run(run_args("synth", dir / "broken.json", dir / "out")) == 3);

  write_text(dir / "invalid.json", R"({"train": {"alpha": 2}})");
  CHECK(run(run_args("synth", dir / "invalid.json", dir / "out")) == 4);

  write_text(dir / "small.json", kSmallConfig);
  CHECK(run(run_args("train", dir / "small.json", dir / "empty")) == 2);

  const auto out = dir / "out";
  REQUIRE(run(run_args("synth", dir / "small.json", out)) == 0);
  write_text(out / "data/val.mtld", "MTLDgarbage");
  CHECK(run(run_args("train", dir / "small.json", out)) == 3);
  CHECK(run(run_args("train", dir / "small.json", out, "--group 7")) == 4);
}

TEST_CASE("synth is deterministic and writes what the config asks for") {
  const auto dir = scratch("synth");
  write_text(dir / "small.json", kSmallConfig);
  REQUIRE(run(run_args("synth", dir / "small.json", dir / "a")) == 0);
  REQUIRE(run(run_args("synth", dir / "small.json", dir / "b")) == 0);
  const auto listed = artifacts(dir / "a/manifest_synth.json");
  CHECK(listed.size() == 8);
  for (const auto& [path, sum] : listed) {
    CAPTURE(path);
    CHECK(read_text(dir / "a" / path) == read_text(dir / "b" / path));
    const auto bytes = mtl::read_file(dir / "a" / path);
    CHECK(mtl::checksum_hex(bytes) == sum);
  }
  const auto header = read_csv(dir / "a/data/train.csv").front();
  CHECK(header.size() == 10 + 3 * 4);
  CHECK(read_csv(dir / "a/data/train.csv").size() == 401);
  CHECK(read_csv(dir / "a/data/val.csv").size() == 201);

  REQUIRE(run(run_args("synth", dir / "small.json", dir / "c", "--seed 6")) == 0);
  CHECK(read_text(dir / "a/data/train.mtld") != read_text(dir / "c/data/train.mtld"));
}

TEST_CASE("full pipeline: reports satisfy the metric identities") {
  const auto dir = scratch("pipeline");
  const auto cfg = dir / "small.json";
  const auto out = dir / "out";
  write_text(cfg, kSmallConfig);
  REQUIRE(run(run_args("synth", cfg, out)) == 0);
  REQUIRE(run(run_args("train", cfg, out)) == 0);
  REQUIRE(run(run_args("filter", cfg, out)) == 0);
  const auto summary = json::parse(read_text(out / "filter/summary.json"));
  CHECK(summary["kept_labels"].get<std::size_t>() <= summary["pool_labels"].get<std::size_t>());

  REQUIRE(run(run_args("train", cfg, out, "--pretrain-on " + (out / "filter/filtered.mtld").string())) == 0);
  CHECK(fs::exists(out / "train/pretrain/metrics.csv"));
  // the shorter finetune history replaces the earlier 4-epoch run entirely
  CHECK(std::distance(fs::directory_iterator(out / "train/checkpoints"), fs::directory_iterator{}) == 2);
  REQUIRE(run(run_args("select", cfg, out)) == 0);
  REQUIRE(run(run_args("ensemble", cfg, out)) == 0);
  REQUIRE(run(run_args("eval", cfg, out)) == 0);

  // Selection composite dominates every single-epoch mean in the history.
  const auto selection = json::parse(read_text(out / "select/selection.json"));
  const double composite = selection["composite"].get<double>();
  std::map<std::string, std::pair<double, int>> epoch_means;
  const auto metrics = read_csv(out / "train/metrics.csv");
  for (std::size_t r = 1; r < metrics.size(); ++r) {
    auto& [sum, count] = epoch_means[metrics[r][0]];
    sum += std::stod(metrics[r][8]);
    ++count;
  }
  CHECK(epoch_means.size() == 2);  // finetune phase of the pretrain/finetune run
  for (const auto& [epoch, acc] : epoch_means) CHECK(composite >= acc.first / acc.second - 1e-9);

  const auto report = read_csv(out / "eval/report.csv");
  REQUIRE(report.size() == 5);
  CHECK(report[0] == std::vector<std::string>{"strategy", "f1", "accuracy", "final", "eval_set",
                                              "selection_set", "in_sample"});
  CHECK(report[1][0] == "baseline");
  CHECK(report[2][0] == "chosen");
  CHECK(report[3][0] == "chosen-threshold");
  CHECK(report[4][0] == "ensemble");
  for (std::size_t r = 1; r < report.size(); ++r) {
    const double f1 = std::stod(report[r][1]), acc = std::stod(report[r][2]), fin = std::stod(report[r][3]);
    CHECK(std::abs(fin - (f1 + acc) / 2) <= 1e-9);
    CHECK(report[r][4] == "test");
    CHECK(report[r][6] == "false");
  }

  // Per-task rows average to the reported means.
  const auto per_task = read_csv(out / "eval/per_task.csv");
  double score_sum = 0.0;
  for (std::size_t r = 1; r < per_task.size(); ++r)
    if (per_task[r][0] == "chosen") score_sum += std::stod(per_task[r][8]);
  CHECK(std::abs(score_sum / 4 - std::stod(report[2][3])) <= 1e-9);

  REQUIRE(run(run_args("eval", cfg, out, "--dataset val")) == 0);
  CHECK(read_csv(out / "eval/report.csv")[1][6] == "true");
}

TEST_CASE("task groups run as independent pipelines") {
  const auto dir = scratch("groups");
  const auto cfg = dir / "small.json";
  const auto out = dir / "out";
  write_text(cfg, kSmallConfig);
  REQUIRE(run(run_args("synth", cfg, out)) == 0);
  REQUIRE(run(run_args("train", cfg, out, "--group 1")) == 0);
  REQUIRE(run(run_args("eval", cfg, out, "--group 1")) == 0);
  const auto per_task = read_csv(out / "group1/eval/per_task.csv");
  CHECK(per_task.size() == 1 + 3 * 2);
}

TEST_CASE("ablate: four rows, recomputable scores, baseline matches train + eval") {
  const auto dir = scratch("ablate");
  const auto cfg = dir / "small.json";
  const auto out = dir / "out";
  write_text(cfg, kSmallConfig);
  REQUIRE(run(run_args("ablate", cfg, out)) == 0);
  const auto table = read_csv(out / "ablate/ablation.csv");
  REQUIRE(table.size() == 5);
  CHECK(table[1][0] == "w/o L_mv");
  CHECK(table[2][0] == "w/o L_cr");
  CHECK(table[3][0] == "w/o batch balancing");
  CHECK(table[4][0] == "baseline");

  for (const auto& row : read_csv(out / "ablate/confusions.csv")) {
    if (row[0] == "variant") continue;
    const double tp = std::stod(row[3]), fp = std::stod(row[4]), tn = std::stod(row[5]), fn = std::stod(row[6]);
    const double f1 = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
    const double acc = (tp + tn) / (tp + fp + tn + fn);
    CHECK(std::abs(std::stod(row[9]) - (f1 + acc) / 2) <= 1e-9);
  }

  const auto single = dir / "single";
  REQUIRE(run(run_args("synth", cfg, single, "--seed 3")) == 0);
  REQUIRE(run(run_args("train", cfg, single, "--seed 3")) == 0);
  REQUIRE(run(run_args("eval", cfg, single, "--seed 3")) == 0);
  const auto report = read_csv(single / "eval/report.csv");
  CHECK(report[1][0] == "baseline");
  CHECK(report[1][3] == table[4][1]);
}

TEST_CASE("re-running from manifests reproduces every artifact bitwise") {
  const auto dir = scratch("manifest");
  const auto cfg = dir / "small.json";
  const auto a = dir / "a", b = dir / "b";
  write_text(cfg, kSmallConfig);
  const char* steps[] = {"synth", "train", "filter", "select", "ensemble", "eval"};
  for (const char* step : steps) REQUIRE(run(run_args(step, cfg, a, "--seed 11")) == 0);
  for (const char* step : steps) {
    const auto manifest = a / ("manifest_" + std::string(step) + ".json");
    REQUIRE(run(std::string(step) + " --config " + manifest.string() + " --out " + b.string()) == 0);
  }
  for (const char* step : steps) {
    const auto first = artifacts(a / ("manifest_" + std::string(step) + ".json"));
    const auto second = artifacts(b / ("manifest_" + std::string(step) + ".json"));
    CAPTURE(step);
    CHECK(first == second);
    for (const auto& [path, sum] : first) CHECK(read_text(a / path) == read_text(b / path));
  }
  CHECK(json::parse(read_text(b / "manifest_train.json"))["seed"] == 11);
}
