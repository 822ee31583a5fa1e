#include <benchmark/benchmark.h>

#include "memprobe/lora_audit.hpp"

namespace {

using namespace memprobe;

AdapterPair random_pair(Eigen::Index d_out, Eigen::Index d_in, Eigen::Index rank) {
  AdapterPair p;
  p.A = Matrix::Random(rank, d_in);
  p.B = Matrix::Random(d_out, rank);
  p.alpha = 32;
  p.rank = static_cast<std::size_t>(rank);
  return p;
}

void BM_reconstruct_update(benchmark::State& state) {
  const auto p = random_pair(state.range(0), state.range(0), state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(reconstruct_update(p));
}

void BM_layer_stats(benchmark::State& state) {
  const Eigen::Index d = state.range(0);
  const auto p = random_pair(d, d, 16);
  const Matrix update = reconstruct_update(p);
  const Matrix base = Matrix::Random(d, d);
  for (auto _ : state) benchmark::DoNotOptimize(layer_stats({}, update, base));
  state.SetItemsProcessed(state.iterations() * d * d);
}

}  // namespace

BENCHMARK(BM_reconstruct_update)->Args({512, 16})->Args({2048, 16})->Args({2048, 64});
BENCHMARK(BM_layer_stats)->Arg(512)->Arg(2048);
