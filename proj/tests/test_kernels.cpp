#include <doctest.h>
#include <omp.h>

#include <cmath>

#include "mtl/kernels.hpp"
#include "mtl/model.hpp"
#include "mtl/rng.hpp"

using namespace mtl;

namespace {

struct Fixture {
  TwoViewModel model;
  RealMatrix x;
  RealMatrix dlogits;
};

Fixture make_fixture(std::size_t rows, std::uint64_t seed) {
  ModelShape shape;
  shape.input_dim = 9;
  shape.hidden_dims = {13, 6};
  shape.feature_dim = 5;
  shape.task_count = 3;
  Fixture f{make_model(shape, seed), RealMatrix(rows, 9), RealMatrix(rows, 3)};
  CounterRng rng(seed + 1);
  for (double& v : f.x.data()) v = rng.normal();
  for (double& v : f.dlogits.data()) v = rng.uniform(-1.0, 1.0);
  return f;
}

double max_abs_diff(const RealMatrix& a, const RealMatrix& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, std::abs(a.data()[k] - b.data()[k]));
  return worst;
}

struct BackwardOut {
  kernels::ViewTrace trace;
  std::vector<Dense> ext;
  Dense bank;
};

BackwardOut run(Backend backend, const Fixture& f) {
  BackwardOut out;
  const auto grads = ModelGradients::zeros_like(f.model);
  out.ext = grads.extractors[0];
  out.bank = grads.banks[0];
  kernels::forward_view(backend, f.model.extractors[0], f.model.banks[0], f.x, out.trace);
  kernels::backward_view(backend, f.model.extractors[0], f.model.banks[0], f.x, out.trace,
                         f.dlogits, out.ext, out.bank);
  return out;
}

}  // namespace

TEST_CASE("parallel kernels agree with the serial reference") {
  for (std::size_t rows : {1u, 31u, 32u, 33u, 100u, 257u}) {
    CAPTURE(rows);
    const auto f = make_fixture(rows, rows * 17);
    const auto s = run(Backend::kSerial, f);
    const auto p = run(Backend::kParallel, f);
    CHECK(max_abs_diff(s.trace.logits, p.trace.logits) <= 1e-12);
    REQUIRE(s.trace.hidden.size() == p.trace.hidden.size());
    for (std::size_t l = 0; l < s.trace.hidden.size(); ++l) {
      CHECK(max_abs_diff(s.trace.hidden[l], p.trace.hidden[l]) <= 1e-12);
    }
    for (std::size_t l = 0; l < s.ext.size(); ++l) {
      CHECK(max_abs_diff(s.ext[l].weight, p.ext[l].weight) <= 1e-10);
      CHECK(max_abs_diff(RealMatrix(1, s.ext[l].bias.size(), s.ext[l].bias),
                         RealMatrix(1, p.ext[l].bias.size(), p.ext[l].bias)) <= 1e-10);
    }
    CHECK(max_abs_diff(s.bank.weight, p.bank.weight) <= 1e-10);
  }
}

TEST_CASE("parallel kernels are bitwise independent of the thread count") {
  const auto f = make_fixture(301, 5);
  const int before = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto one = run(Backend::kParallel, f);
  omp_set_num_threads(4);
  const auto four = run(Backend::kParallel, f);
  omp_set_num_threads(7);
  const auto seven = run(Backend::kParallel, f);
  omp_set_num_threads(before);
  for (const auto* other : {&four, &seven}) {
    CHECK(one.trace.logits == other->trace.logits);
    CHECK(one.ext == other->ext);
    CHECK(one.bank == other->bank);
  }
}

TEST_CASE("backward accumulates into existing gradients") {
  const auto f = make_fixture(40, 9);
  auto once = run(Backend::kParallel, f);
  auto twice = once;
  kernels::backward_view(Backend::kParallel, f.model.extractors[0], f.model.banks[0], f.x,
                         twice.trace, f.dlogits, twice.ext, twice.bank);
  for (std::size_t k = 0; k < once.bank.weight.size(); ++k) {
    CHECK(twice.bank.weight.data()[k] == doctest::Approx(2 * once.bank.weight.data()[k]).epsilon(1e-12));
  }
}

TEST_CASE("full-model forward and gradients agree across backends") {
  const auto f = make_fixture(70, 3);
  const auto a = forward(f.model, f.x, Backend::kSerial);
  const auto b = forward(f.model, f.x, Backend::kParallel);
  CHECK(max_abs_diff(a.fused, b.fused) <= 1e-12);

  BitMatrix y(70, 3), m(70, 3, 1);
  for (std::size_t k = 0; k < y.size(); ++k) y.data()[k] = k % 3 == 0;
  const ViewMasks masks{m, m};
  const auto gs = flatten(gradients(f.model, f.x, y, masks, {}, Backend::kSerial).grads);
  const auto gp = flatten(gradients(f.model, f.x, y, masks, {}, Backend::kParallel).grads);
  REQUIRE(gs.size() == gp.size());
  for (std::size_t i = 0; i < gs.size(); ++i) REQUIRE(std::abs(gs[i] - gp[i]) <= 1e-12);
}
