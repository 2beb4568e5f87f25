// Benchmarks for the statistics hot paths used inside the CV harness.

#include <benchmark/benchmark.h>

#include "petfuse/rng.hpp"
#include "petfuse/stats.hpp"

using namespace petfuse;

namespace {

stats::ScoredSet make_scored(int n, uint64_t seed) {
  Rng rng(seed);
  stats::ScoredSet s;
  for (int i = 0; i < n; ++i) {
    s.labels.push_back(i % 3 == 0 ? 1 : 0);
    s.scores.push_back(rng.uniform() + 0.3 * s.labels.back());
  }
  return s;
}

void BM_Auroc(benchmark::State& state) {
  const auto s = make_scored(static_cast<int>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(stats::auroc(s));
}
BENCHMARK(BM_Auroc)->Arg(39)->Arg(1000);

void BM_MannWhitneyExact(benchmark::State& state) {
  Rng rng(2);
  std::vector<double> a, b;
  for (int i = 0; i < 8; ++i) a.push_back(rng.uniform());
  for (int i = 0; i < 8; ++i) b.push_back(rng.uniform() + 0.2);
  for (auto _ : state) benchmark::DoNotOptimize(stats::mann_whitney_u(a, b));
}
BENCHMARK(BM_MannWhitneyExact);

void BM_MannWhitneyApprox(benchmark::State& state) {
  Rng rng(3);
  std::vector<double> a, b;
  for (int i = 0; i < 30; ++i) a.push_back(rng.normal());
  for (int i = 0; i < 30; ++i) b.push_back(rng.normal() + 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(stats::mann_whitney_u(a, b));
}
BENCHMARK(BM_MannWhitneyApprox);

void BM_LogRank(benchmark::State& state) {
  Rng rng(4);
  std::vector<double> a, b;
  for (int i = 0; i < 58; ++i) a.push_back(1.0 + 30.0 * rng.uniform());
  for (int i = 0; i < 58; ++i) b.push_back(5.0 + 30.0 * rng.uniform());
  for (auto _ : state) benchmark::DoNotOptimize(stats::logrank_test(a, b));
}
BENCHMARK(BM_LogRank);

}  // namespace
