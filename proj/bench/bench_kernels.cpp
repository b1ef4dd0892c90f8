#include <benchmark/benchmark.h>
#include <omp.h>

#include "mtl/kernels.hpp"
#include "mtl/model.hpp"
#include "mtl/rng.hpp"

namespace {

struct Setup {
  mtl::TwoViewModel model;
  mtl::RealMatrix x;
  mtl::RealMatrix dlogits;
};

Setup make_setup(std::size_t rows) {
  mtl::ModelShape shape;
  shape.input_dim = 24;
  shape.hidden_dims = {64};
  shape.feature_dim = 32;
  shape.task_count = 8;
  Setup s{mtl::make_model(shape, 1), mtl::RealMatrix(rows, 24), mtl::RealMatrix(rows, 8)};
  mtl::CounterRng rng(2);
  for (double& v : s.x.data()) v = rng.normal();
  for (double& v : s.dlogits.data()) v = rng.uniform(-1, 1);
  return s;
}

template <mtl::Backend B>
void BM_Forward(benchmark::State& state) {
  const auto s = make_setup(static_cast<std::size_t>(state.range(0)));
  mtl::kernels::ViewTrace trace;
  for (auto _ : state) {
    mtl::kernels::forward_view(B, s.model.extractors[0], s.model.banks[0], s.x, trace);
    benchmark::DoNotOptimize(trace.logits.data().data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

template <mtl::Backend B>
void BM_Backward(benchmark::State& state) {
  const auto s = make_setup(static_cast<std::size_t>(state.range(0)));
  mtl::kernels::ViewTrace trace;
  mtl::kernels::forward_view(B, s.model.extractors[0], s.model.banks[0], s.x, trace);
  auto grads = mtl::ModelGradients::zeros_like(s.model);
  for (auto _ : state) {
    mtl::kernels::backward_view(B, s.model.extractors[0], s.model.banks[0], s.x, trace, s.dlogits,
                                grads.extractors[0], grads.banks[0]);
    benchmark::DoNotOptimize(grads.banks[0].bias.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

}  // namespace

BENCHMARK(BM_Forward<mtl::Backend::kSerial>)->Arg(64)->Arg(1024)->Arg(8192);
BENCHMARK(BM_Forward<mtl::Backend::kParallel>)->Arg(64)->Arg(1024)->Arg(8192);
BENCHMARK(BM_Backward<mtl::Backend::kSerial>)->Arg(64)->Arg(1024)->Arg(8192);
BENCHMARK(BM_Backward<mtl::Backend::kParallel>)->Arg(64)->Arg(1024)->Arg(8192);

BENCHMARK_MAIN();
