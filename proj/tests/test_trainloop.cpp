#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "mtl/error.hpp"
#include "mtl/numerics.hpp"
#include "mtl/trainloop.hpp"

using namespace mtl;

namespace {

// y = 1[w . x > 0.2] with a margin of 0.1 enforced by rejection.
LabeledDataset separable(std::size_t n, std::uint64_t seed) {
  const std::vector<double> w{0.8, -0.5, 0.3, 0.0, 0.6};
  CounterRng rng(seed);
  LabeledDataset ds;
  ds.features = RealMatrix(n, 5);
  ds.labels = BitMatrix(n, 1);
  ds.mask = BitMatrix(n, 1, 1);
  for (std::size_t i = 0; i < n;) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      ds.features(i, k) = rng.normal();
      s += w[k] * ds.features(i, k);
    }
    if (std::abs(s - 0.2) < 0.1) continue;
    ds.labels(i, 0) = s > 0.2;
    ++i;
  }
  return ds;
}

// Independent convex solver: L2-regularized logistic regression by IRLS.
Eigen::VectorXd irls(const LabeledDataset& ds) {
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto d = static_cast<Eigen::Index>(ds.input_dim()) + 1;
  Eigen::MatrixXd x(n, d);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    for (Eigen::Index k = 1; k < d; ++k) x(i, k) = ds.features(i, k - 1);
    y(i) = ds.labels(i, 0);
  }
  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  for (int it = 0; it < 100; ++it) {
    Eigen::VectorXd p = (x * w).unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
    Eigen::VectorXd s = p.cwiseProduct(Eigen::VectorXd::Ones(n) - p);
    Eigen::MatrixXd h = x.transpose() * s.asDiagonal() * x + 1e-3 * Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd g = x.transpose() * (p - y) + 1e-3 * w;
    w -= h.ldlt().solve(g);
  }
  return w;
}

double irls_score(const Eigen::VectorXd& w, const LabeledDataset& ds) {
  std::vector<int> pred, truth;
  ConfusionCounts c;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    double z = w(0);
    for (std::size_t k = 0; k < ds.input_dim(); ++k) z += w(static_cast<Eigen::Index>(k + 1)) * ds.features(i, k);
    const bool p = z > 0, t = ds.labels(i, 0);
    c += ConfusionCounts{p && t ? 1u : 0u, p && !t ? 1u : 0u, !p && !t ? 1u : 0u, !p && t ? 1u : 0u};
  }
  return task_metrics(c).score;
}

TwoViewModel model_for(const LabeledDataset& ds, std::uint64_t seed) {
  ModelShape shape;
  shape.input_dim = ds.input_dim();
  shape.hidden_dims = {16};
  shape.feature_dim = 8;
  shape.task_count = ds.task_count();
  return make_model(shape, seed);
}

// One task, identity extractor on two inputs; the fused probability is sigmoid(x0).
TwoViewModel passthrough() {
  TwoViewModel m;
  for (std::size_t v = 0; v < 2; ++v) {
    Dense layer(2, 2);
    layer.weight(0, 0) = layer.weight(1, 1) = 1.0;
    m.extractors[v].layers = {layer};
    m.extractors[v].activation = Activation::kIdentity;
    m.banks[v].head = Dense(2, 1);
    m.banks[v].head.weight(0, 0) = 1.0;
  }
  return m;
}

LabeledDataset noisy_rows(const std::vector<double>& x0, const std::vector<std::uint8_t>& noisy) {
  LabeledDataset ds;
  ds.features = RealMatrix(x0.size(), 2);
  for (std::size_t i = 0; i < x0.size(); ++i) ds.features(i, 0) = x0[i];
  ds.labels = BitMatrix(x0.size(), 1);
  ds.noisy_labels = BitMatrix(x0.size(), 1, noisy);
  ds.mask = BitMatrix(x0.size(), 1, 1);
  return ds;
}

LabeledDataset multi_task(std::size_t n, std::uint64_t seed, std::size_t tasks = 4) {
  GeneratorConfig cfg;
  cfg.task_count = tasks;
  cfg.latent_dim = tasks + 2;
  cfg.input_dim = 10;
  cfg.sample_count = n;
  for (std::size_t j = 0; j < tasks; ++j) cfg.positive_rates.push_back(0.4 - 0.08 * static_cast<double>(j));
  cfg.task_correlation = banded_correlation(tasks, 0.3);
  cfg.feature_noise_std = 0.5;
  cfg.seed = seed;
  return generate(cfg);
}

}  // namespace

TEST_CASE("train: zero epochs is a no-op") {
  const auto ds = separable(100, 1);
  auto m = model_for(ds, 2);
  const auto before = m;
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto h = train(m, ds, ds, cfg);
  CHECK(h.empty());
  CHECK(m == before);
}

TEST_CASE("train: separable single task reaches a high validation score") {
  const auto train_ds = separable(2000, 10);
  const auto val_ds = separable(1000, 11);
  const auto w = irls(train_ds);
  CHECK(irls_score(w, val_ds) >= 0.99);

  auto m = model_for(train_ds, 12);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 13;
  const auto h = train(m, train_ds, val_ds, cfg);
  REQUIRE(h.size() == 30);
  CHECK(h.checkpoints.back().metrics[0].score > 0.95);
  for (std::size_t e = 0; e < h.size(); ++e) CHECK(h.checkpoints[e].epoch == e);
  CHECK_NOTHROW(h.validate());
}

TEST_CASE("train: same seed gives bitwise-identical histories") {
  const auto ds = multi_task(400, 3);
  const auto val = multi_task(150, 4);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.seed = 99;
  cfg.keep_val_probs = true;
  cfg.optimizer = Optimizer::kMomentum;
  auto m1 = model_for(ds, 5);
  auto m2 = model_for(ds, 5);
  const auto h1 = train(m1, ds, val, cfg);
  const auto h2 = train(m2, ds, val, cfg);
  REQUIRE(h1.size() == h2.size());
  for (std::size_t e = 0; e < h1.size(); ++e) {
    CHECK(encode_checkpoint(h1.checkpoints[e]) == encode_checkpoint(h2.checkpoints[e]));
  }
  cfg.seed = 100;
  auto m3 = model_for(ds, 5);
  train(m3, ds, val, cfg);
  CHECK_FALSE(m3 == m1);
}

TEST_CASE("train: checkpoint scores decompose exactly") {
  const auto ds = multi_task(300, 6);
  TrainConfig cfg;
  cfg.epochs = 3;
  auto m = model_for(ds, 7);
  const auto h = train(m, ds, ds, cfg);
  for (const auto& c : h.checkpoints) {
    for (const auto& t : c.metrics) {
      const auto recomputed = task_metrics(t.counts);
      REQUIRE(std::abs(t.score - (recomputed.acc + recomputed.f1) / 2) <= 1e-12);
      REQUIRE(t.counts.total() == ds.size());
    }
  }
}

TEST_CASE("train: config and shape errors, divergence") {
  const auto ds = multi_task(100, 8);
  auto m = model_for(ds, 9);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 101;
  CHECK_THROWS_AS(train(m, ds, ds, cfg), ConfigError);
  cfg.batch_size = 10;
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(train(m, ds, ds, cfg), ConfigError);
  cfg.learning_rate = 0.05;
  CHECK_THROWS_AS(train(m, ds, take_rows(ds, std::vector<std::size_t>{}), cfg), ContractError);
  CHECK_THROWS_AS(train(m, select_tasks(ds, std::vector<std::size_t>{0}), ds, cfg), ShapeError);

  cfg.learning_rate = 1e300;
  cfg.optimizer = Optimizer::kMomentum;
  auto blown = model_for(ds, 9);
  CHECK_THROWS_AS(train(blown, ds, ds, cfg), TrainingDivergedError);
}

TEST_CASE("train: rows whose mask is zero never contribute") {
  auto ds = multi_task(200, 12);
  auto masked = ds;
  // Scramble labels on masked-out rows; training must not notice.
  for (std::size_t n = 0; n < 200; n += 2) {
    for (std::size_t j = 0; j < 4; ++j) {
      masked.mask(n, j) = 0;
      ds.mask(n, j) = 0;
      masked.labels(n, j) ^= 1;
    }
  }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.loss.cr = 0.0;  // the co-regularizer is label free and sees every row by design
  auto a = model_for(ds, 1);
  auto b = model_for(ds, 1);
  train(a, ds, ds, cfg);
  train(b, masked, ds, cfg);
  CHECK(a == b);
}

TEST_CASE("filter_noisy: rule examples") {
  const auto m = passthrough();
  const double x = logit(0.9);
  auto out = filter_noisy(m, noisy_rows({x, x}, {1, 0}), 0.8);
  CHECK(out.kept_rows == std::vector<std::size_t>{0});
  CHECK(out.kept_labels == 1);
  CHECK(out.data.labels(0, 0) == 1);
  CHECK(out.data.mask(0, 0) == 1);

  // confident negatives are kept too
  out = filter_noisy(m, noisy_rows({-x, -x}, {0, 1}), 0.8);
  CHECK(out.kept_rows == std::vector<std::size_t>{0});

  // exact agreement with confidence 1 keeps everything at threshold just above 0.5
  out = filter_noisy(m, noisy_rows({40.0, -40.0, 40.0}, {1, 0, 1}), std::nextafter(0.5, 1.0));
  CHECK(out.kept_labels == 3);
  CHECK(out.data.size() == 3);

  LabeledDataset clean = noisy_rows({1.0}, {1});
  clean.noisy_labels.reset();
  CHECK_THROWS_AS(filter_noisy(m, clean, 0.8), ContractError);
  CHECK_THROWS_AS(filter_noisy(m, noisy_rows({1.0}, {1}), 0.4), InvalidArgument);
  CHECK_THROWS_AS(filter_noisy(m, noisy_rows({1.0}, {1}), 1.0), InvalidArgument);
}

TEST_CASE("filter_noisy: brute-force set equality and threshold monotonicity") {
  const auto ds = corrupt_labels(multi_task(500, 20), 0.19, 21);
  auto m = model_for(ds, 22);
  TrainConfig cfg;
  cfg.epochs = 3;
  train(m, ds, ds, cfg);
  const auto fused = forward(m, ds.features).fused;

  for (double th : {std::nextafter(0.5, 1.0), 0.6, 0.8}) {
    const auto out = filter_noisy(m, ds, th);
    std::size_t r = 0, count = 0;
    for (std::size_t n = 0; n < ds.size(); ++n) {
      bool any = false;
      std::vector<std::uint8_t> row(4, 0);
      for (std::size_t j = 0; j < 4; ++j) {
        const double p = fused(n, j);
        const int pred = p >= 0.5;
        if (pred == (*ds.noisy_labels)(n, j) && std::max(p, 1 - p) > th) {
          row[j] = 1;
          any = true;
          ++count;
        }
      }
      if (!any) continue;
      REQUIRE(r < out.kept_rows.size());
      REQUIRE(out.kept_rows[r] == n);
      for (std::size_t j = 0; j < 4; ++j) {
        REQUIRE(out.data.mask(r, j) == row[j]);
        REQUIRE(out.data.labels(r, j) == (*ds.noisy_labels)(n, j));
      }
      ++r;
    }
    CHECK(r == out.kept_rows.size());
    CHECK(count == out.kept_labels);
  }

  std::size_t previous = SIZE_MAX;
  for (double th = 0.5; th < 1.0; th += 0.025) {
    const auto kept = filter_noisy(m, ds, th).kept_labels;
    REQUIRE(kept <= previous);
    previous = kept;
  }
}

TEST_CASE("pretrain_finetune: empty C equals two plain training phases") {
  const auto a = multi_task(300, 30);
  const auto val = multi_task(100, 31);
  const auto empty_c = take_rows(corrupt_labels(a, 0.1, 1), std::vector<std::size_t>{});
  TrainConfig pre, fine;
  pre.epochs = 2;
  pre.seed = 5;
  fine.epochs = 3;
  fine.seed = 6;
  auto m1 = model_for(a, 32);
  auto m2 = m1;
  const auto r = pretrain_finetune(m1, a, empty_c, val, pre, fine);
  train(m2, a, val, pre);
  const auto h = train(m2, a, val, fine);
  CHECK(m1 == m2);
  CHECK(r.pretrain.size() == 2);
  REQUIRE(r.finetune.size() == 3);
  CHECK(encode_checkpoint(r.finetune.checkpoints[2]) == encode_checkpoint(h.checkpoints[2]));
}

TEST_CASE("pretrain_finetune: masked-out C rows never enter the recognition loss") {
  const auto a = multi_task(200, 40);
  const auto val = multi_task(80, 41);
  auto c = corrupt_labels(multi_task(100, 42), 0.19, 43);
  c.mask = BitMatrix(c.size(), c.task_count(), 0);
  auto scrambled = c;
  for (auto& y : scrambled.labels.data()) y ^= 1;
  TrainConfig pre, fine;
  pre.epochs = 2;
  fine.epochs = 1;
  pre.loss.cr = 0.0;
  auto m1 = model_for(a, 44);
  auto m2 = m1;
  pretrain_finetune(m1, a, c, val, pre, fine);
  pretrain_finetune(m2, a, scrambled, val, pre, fine);
  CHECK(m1 == m2);
}

TEST_CASE("pretrain_finetune on filtered noisy data is not worse than A-only") {
  double gain = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = multi_task(400, 100 + seed);
    const auto val = multi_task(400, 200 + seed);
    const auto pool = corrupt_labels(multi_task(1200, 300 + seed), 0.19, 400 + seed);
    TrainConfig half;
    half.epochs = 8;
    half.seed = seed;
    TrainConfig full = half;
    full.epochs = 16;

    auto base = model_for(a, 500 + seed);
    const auto init = base;
    train(base, a, val, half);
    const auto c = filter_noisy(base, pool, 0.8).data;

    auto only_a = init;
    const auto ha = train(only_a, a, val, full);
    auto staged = init;
    const auto hs = pretrain_finetune(staged, a, c, val, half, half);
    gain += hs.finetune.checkpoints.back().mean_score() - ha.checkpoints.back().mean_score();
  }
  MESSAGE("mean gain from pretraining on filtered data: " << gain / 5);
  CHECK(gain / 5 >= -0.02);
}

TEST_CASE("checkpoint and history I/O") {
  const auto ds = multi_task(120, 50);
  auto m = model_for(ds, 51);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.keep_val_probs = true;
  const auto h = train(m, ds, ds, cfg);

  const auto bytes = encode_checkpoint(h.checkpoints[1]);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.epoch == 1);
  CHECK(back.model == h.checkpoints[1].model);
  CHECK(back.val_probs == h.checkpoints[1].val_probs);
  CHECK(back.metrics[2].counts == h.checkpoints[1].metrics[2].counts);
  auto bad = bytes;
  bad.resize(bad.size() - 1);
  CHECK_THROWS_AS(decode_checkpoint(bad), ParseError);

  const auto dir = std::filesystem::temp_directory_path() / "mtl_test_history";
  std::filesystem::remove_all(dir);
  save_history(dir, h);
  const auto loaded = load_history(dir);
  REQUIRE(loaded.size() == 3);
  CHECK(loaded.task_count == 4);
  CHECK(loaded.score_table() == h.score_table());
  std::filesystem::remove_all(dir);

  const auto csv = metrics_csv(h);
  CHECK(csv.rfind("epoch,task,tp,fp,tn,fn,f1,acc,score\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 4);
}
