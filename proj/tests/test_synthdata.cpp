#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "mtl/error.hpp"
#include "mtl/synthdata.hpp"

using namespace mtl;

namespace {

GeneratorConfig single_task(std::size_t n, double rate, std::uint64_t seed) {
  GeneratorConfig cfg;
  cfg.task_count = 1;
  cfg.latent_dim = 3;
  cfg.input_dim = 4;
  cfg.sample_count = n;
  cfg.positive_rates = {rate};
  cfg.seed = seed;
  return cfg;
}

double column_rate(const BitMatrix& labels, std::size_t j) {
  double s = 0;
  for (std::size_t n = 0; n < labels.rows(); ++n) s += labels(n, j);
  return s / static_cast<double>(labels.rows());
}

double pearson(const BitMatrix& labels, std::size_t a, std::size_t b) {
  const double n = static_cast<double>(labels.rows());
  double sa = 0, sb = 0, sab = 0;
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    sa += labels(i, a);
    sb += labels(i, b);
    sab += labels(i, a) * labels(i, b);
  }
  const double ma = sa / n, mb = sb / n;
  return (sab / n - ma * mb) / std::sqrt(ma * (1 - ma) * mb * (1 - mb));
}

std::vector<std::uint8_t> labels_with(std::size_t negatives, std::size_t positives) {
  std::vector<std::uint8_t> y(negatives, 0);
  y.insert(y.end(), positives, 1);
  // interleave a bit so positives are not a contiguous block
  std::rotate(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(negatives / 2), y.end());
  return y;
}

}  // namespace

TEST_CASE("generate: single-task calibration") {
  const auto ds = generate(single_task(10000, 0.5, 1));
  const double rate = column_rate(ds.labels, 0);
  CHECK(rate >= 0.45);
  CHECK(rate <= 0.55);
  CHECK(ds.size() == 10000);
  CHECK(ds.input_dim() == 4);
  CHECK_FALSE(ds.noisy_labels.has_value());
}

TEST_CASE("generate: 23 imbalanced tasks stay calibrated") {
  GeneratorConfig cfg;
  cfg.task_count = 23;
  cfg.latent_dim = 30;
  cfg.input_dim = 40;
  cfg.sample_count = 2000;
  for (std::size_t j = 0; j < 23; ++j) cfg.positive_rates.push_back(0.5 * std::pow(0.06, j / 22.0));
  cfg.task_correlation = banded_correlation(23, 0.4);
  cfg.seed = 3;
  const auto ds = generate(cfg);
  for (std::size_t j = 0; j < 23; ++j) {
    const double rate = column_rate(ds.labels, j);
    CAPTURE(j);
    CHECK(std::abs(rate - cfg.positive_rates[j]) <= 0.2 * cfg.positive_rates[j]);
  }
}

TEST_CASE("generate: deterministic and seed-sensitive") {
  auto cfg = single_task(500, 0.3, 42);
  CHECK(generate(cfg) == generate(cfg));
  auto other = cfg;
  other.seed = 43;
  CHECK_FALSE(generate(cfg) == generate(other));
}

TEST_CASE("generate: strong task correlation shows up in the labels") {
  GeneratorConfig cfg;
  cfg.task_count = 2;
  cfg.latent_dim = 4;
  cfg.input_dim = 6;
  cfg.sample_count = 10000;
  cfg.positive_rates = {0.5, 0.5};
  cfg.task_correlation = RealMatrix(2, 2, std::vector<double>{1.0, 0.9, 0.9, 1.0});
  cfg.seed = 11;
  const double r = pearson(generate(cfg).labels, 0, 1);
  CHECK(r > 0.5);
  // Median-thresholded bivariate normal: phi = (2/pi) asin(rho).
  CHECK(r == doctest::Approx(2.0 / std::numbers::pi * std::asin(0.9)).epsilon(0.04));
}

TEST_CASE("generate: config errors") {
  GeneratorConfig cfg;
  cfg.task_count = 3;
  cfg.latent_dim = 3;
  cfg.input_dim = 2;
  cfg.sample_count = 10;
  cfg.positive_rates = {0.1, 0.2, 0.3};
  cfg.task_correlation = RealMatrix(3, 3, std::vector<double>{1, 0.9, -0.9, 0.9, 1, 0.9, -0.9, 0.9, 1});
  CHECK_THROWS_AS(generate(cfg), ConfigError);

  cfg.task_correlation = {};
  cfg.positive_rates = {0.1, 1.0, 0.3};
  CHECK_THROWS_AS(generate(cfg), ConfigError);
  cfg.positive_rates = {0.1, 0.2};
  CHECK_THROWS_AS(generate(cfg), ConfigError);
  cfg.positive_rates = {0.1, 0.2, 0.3};
  cfg.latent_dim = 2;
  CHECK_THROWS_AS(generate(cfg), ConfigError);
}

TEST_CASE("split: sizes, disjoint cover, determinism") {
  const auto [a, b] = split_indices(25000, 0.9, 5);
  CHECK(a.size() == 22500);
  CHECK(b.size() == 2500);

  const auto [x, y] = split_indices(10, 0.5, 6);
  CHECK(x.size() == 5);
  CHECK(y.size() == 5);
  std::set<std::size_t> all(x.begin(), x.end());
  all.insert(y.begin(), y.end());
  CHECK(all.size() == 10);
  CHECK(*all.rbegin() == 9);

  CHECK(split_indices(1000, 0.3, 9) == split_indices(1000, 0.3, 9));
  CHECK_FALSE(split_indices(1000, 0.3, 9) == split_indices(1000, 0.3, 10));
  CHECK_THROWS_AS(split_indices(10, 0.0, 1), InvalidArgument);
  CHECK_THROWS_AS(split_indices(10, 0.99, 1), InvalidArgument);

  const auto ds = generate(single_task(50, 0.4, 2));
  const auto [left, right] = split(ds, 0.6, 3);
  CHECK(left.size() == 30);
  CHECK(right.size() == 20);
  CHECK(concat(left, right).size() == 50);
}

TEST_CASE("corrupt_labels: agreement rate, identity at zero, determinism") {
  GeneratorConfig cfg;
  cfg.task_count = 10;
  cfg.latent_dim = 10;
  cfg.input_dim = 2;
  cfg.sample_count = 10000;
  cfg.positive_rates.assign(10, 0.3);
  cfg.seed = 8;
  const auto ds = generate(cfg);
  const auto noisy = corrupt_labels(ds, 0.19, 77);
  REQUIRE(noisy.noisy_labels.has_value());
  CHECK(noisy.labels == ds.labels);
  double agree = 0;
  for (std::size_t k = 0; k < ds.labels.size(); ++k) agree += noisy.noisy_labels->data()[k] == ds.labels.data()[k];
  agree /= static_cast<double>(ds.labels.size());
  CHECK(agree >= 0.805);
  CHECK(agree <= 0.815);

  CHECK(*corrupt_labels(ds, 0.0, 1).noisy_labels == ds.labels);
  CHECK(corrupt_labels(ds, 0.19, 77) == noisy);
  CHECK_THROWS_AS(corrupt_labels(ds, 0.5, 1), InvalidArgument);
  CHECK_THROWS_AS(corrupt_labels(ds, -0.1, 1), InvalidArgument);
}

TEST_CASE("batch_balance: worked examples") {
  const auto y = labels_with(90, 10);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    CounterRng rng(seed);
    const auto sel = batch_balance(y, 0.2, rng);
    REQUIRE(sel.positives == 10);
    REQUIRE(sel.negatives_kept == 18);
    REQUIRE(sel.kept.size() == 28);
    std::size_t pos = 0;
    for (auto i : sel.kept) pos += y[i];
    REQUIRE(pos == 10);
  }
  CounterRng rng(1);
  CHECK(batch_balance(labels_with(50, 50), 0.2, rng).kept.size() == 100);
  const auto none = batch_balance(labels_with(100, 0), 0.2, rng);
  CHECK(none.kept.size() == 20);
  CHECK(none.negatives_kept == 20);
  CHECK_THROWS_AS(batch_balance(y, 0.0, rng), InvalidArgument);
  CHECK_THROWS_AS(batch_balance(y, 1.5, rng), InvalidArgument);
}

TEST_CASE("batch_balance: rounding is half-to-even, boundary keeps all") {
  CounterRng rng(3);
  // 0.5 * 5 = 2.5 -> 2; 0.5 * 7 = 3.5 -> 4
  CHECK(batch_balance(labels_with(5, 1), 0.5, rng).negatives_kept == 2);
  CHECK(batch_balance(labels_with(7, 1), 0.5, rng).negatives_kept == 4);
  // 0.2 * 50 = 10 is not > 10
  CHECK(batch_balance(labels_with(50, 10), 0.2, rng).negatives_kept == 50);
}

TEST_CASE("batch_balance: random batches never drop positives") {
  CounterRng gen(99);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t b = 1 + gen.below(200);
    std::vector<std::uint8_t> y(b);
    const double p = gen.uniform01();
    for (auto& v : y) v = gen.bernoulli(p);
    const double alpha = 0.05 + 0.95 * gen.uniform01();
    CounterRng rng(trial);
    const auto sel = batch_balance(y, alpha, rng);
    const std::size_t pos = std::count(y.begin(), y.end(), 1);
    const std::size_t neg = b - pos;
    REQUIRE(sel.positives == pos);
    const auto expect = alpha * neg > pos ? static_cast<std::size_t>(std::nearbyint(alpha * neg)) : neg;
    REQUIRE(sel.negatives_kept == expect);
    REQUIRE(std::is_sorted(sel.kept.begin(), sel.kept.end()));
    REQUIRE(std::adjacent_find(sel.kept.begin(), sel.kept.end()) == sel.kept.end());
  }
}

TEST_CASE("balance_mask: per-task streams follow the task through a permutation") {
  GeneratorConfig cfg;
  cfg.task_count = 5;
  cfg.latent_dim = 5;
  cfg.input_dim = 2;
  cfg.sample_count = 64;
  cfg.positive_rates = {0.05, 0.1, 0.2, 0.3, 0.5};
  cfg.seed = 4;
  const auto ds = generate(cfg);
  const BitMatrix valid(64, 5, 1);
  const auto mask = balance_mask(ds.labels, valid, 0.2, 1234);

  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto permuted = select_tasks(ds, perm);
  const auto pmask = balance_mask(permuted.labels, valid, 0.2, 1234, perm);
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t n = 0; n < 64; ++n) REQUIRE(pmask(n, j) == mask(n, perm[j]));

  // Rows outside valid are never selected.
  BitMatrix partial = valid;
  for (std::size_t n = 0; n < 64; n += 3) partial(n, 2) = 0;
  const auto restricted = balance_mask(ds.labels, partial, 0.2, 1);
  for (std::size_t n = 0; n < 64; n += 3) CHECK(restricted(n, 2) == 0);
}

TEST_CASE("dataset encoding round-trips and rejects corruption") {
  const auto ds = corrupt_labels(generate(single_task(37, 0.3, 5)), 0.1, 6);
  const auto bytes = encode_dataset(ds);
  CHECK(decode_dataset(bytes) == ds);

  auto bad = bytes;
  bad[1] = 'Z';
  CHECK_THROWS_AS(decode_dataset(bad), ParseError);
  bad = bytes;
  bad.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_dataset(bad), ParseError);

  const auto path = std::filesystem::temp_directory_path() / "mtl_test_dataset.mtld";
  save_dataset(path, ds);
  CHECK(load_dataset(path) == ds);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_dataset(path), MissingInputError);

  const auto csv = dataset_csv(take_rows(ds, std::vector<std::size_t>{0, 1}));
  CHECK(csv.rfind("features_0,features_1,features_2,features_3,label_0,noisy_0,mask_0\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
