// Benchmarks for the volume preprocessing path executed once per patient per
// fold task.

#include <benchmark/benchmark.h>

#include "petfuse/preprocess.hpp"
#include "petfuse/rng.hpp"

using namespace petfuse;

namespace {

Volume random_volume(std::array<int, 3> shape, uint64_t seed) {
  Volume v;
  v.modality = Modality::PET;
  v.shape = shape;
  v.spacing_mm = {4.0, 4.0, 4.0};
  v.voxels.resize(static_cast<size_t>(v.numel()));
  Rng rng(seed);
  for (float& x : v.voxels) x = static_cast<float>(rng.uniform() * 10.0);
  return v;
}

void BM_ClipArtifacts(benchmark::State& state) {
  const Volume v = random_volume({96, 64, 64}, 1);
  for (auto _ : state) benchmark::DoNotOptimize(clip_artifacts(v));
}
BENCHMARK(BM_ClipArtifacts)->Unit(benchmark::kMillisecond);

void BM_ResizeVolume(benchmark::State& state) {
  const Volume v = random_volume({96, 64, 64}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(resize_volume(v));
}
BENCHMARK(BM_ResizeVolume)->Unit(benchmark::kMillisecond);

void BM_FitNormalizer(benchmark::State& state) {
  std::vector<Volume> vols;
  for (int i = 0; i < 8; ++i) vols.push_back(random_volume({96, 64, 64}, 10 + i));
  std::vector<const Volume*> ptrs;
  for (const auto& v : vols) ptrs.push_back(&v);
  for (auto _ : state) benchmark::DoNotOptimize(fit_normalizer(ptrs, Modality::PET));
}
BENCHMARK(BM_FitNormalizer)->Unit(benchmark::kMillisecond);

}  // namespace
