#include <benchmark/benchmark.h>

#include <random>

#include "memprobe/metrics.hpp"

namespace {

using namespace memprobe;

// A 30-token target against a generation that shares about half its words,
// the shape every piecewise chunk is scored at.
std::pair<Units, Units> chunk_pair(std::size_t n) {
  std::mt19937_64 rng(n);
  Units h(n), r(n);
  for (std::size_t i = 0; i < n; ++i) {
    r[i] = "w" + std::to_string(rng() % 200);
    h[i] = rng() % 2 ? r[i] : "w" + std::to_string(rng() % 200);
  }
  return {h, r};
}

template <double (*F)(UnitView, UnitView)>
void BM_metric(benchmark::State& state) {
  const auto [h, r] = chunk_pair(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(F(h, r));
}

void BM_score_units(benchmark::State& state) {
  const auto [h, r] = chunk_pair(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(score_units(h, r));
}

}  // namespace

BENCHMARK(BM_metric<jaccard>)->Arg(30)->Arg(1500);
BENCHMARK(BM_metric<cosine>)->Arg(30)->Arg(1500);
BENCHMARK(BM_metric<levenshtein_sim>)->Arg(30)->Arg(1500);
BENCHMARK(BM_metric<seq_matcher>)->Arg(30)->Arg(1500);
BENCHMARK(BM_metric<bleu>)->Arg(30)->Arg(1500);
BENCHMARK(BM_metric<rouge_l>)->Arg(30)->Arg(1500);
BENCHMARK(BM_score_units)->Arg(30);
