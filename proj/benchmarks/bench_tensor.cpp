// Microbenchmarks for the tensor engine: per-layer conv3d forward/backward at
// the encoder shapes seen during training, plus a full training step.

#include <benchmark/benchmark.h>

#include "petfuse/models.hpp"
#include "petfuse/tensor.hpp"

using namespace petfuse;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, bool requires_grad = false) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (float& v : t.values) v = static_cast<float>(rng.normal() * 0.1);
  t.requires_grad = requires_grad;
  return t;
}

// encoder layer shapes at the 75x50x50 model input
struct ConvShape {
  int c_in, c_out, d, h, w;
};
constexpr ConvShape kLayers[] = {
    {1, 8, 75, 50, 50}, {8, 16, 38, 25, 25}, {16, 32, 19, 13, 13}, {32, 64, 10, 7, 7}};

void BM_Conv3dForward(benchmark::State& state) {
  const ConvShape s = kLayers[state.range(0)];
  Graph g;
  const NodeId x = g.leaf(random_tensor({1, s.c_in, s.d, s.h, s.w}, 1));
  const NodeId w = g.leaf(random_tensor({s.c_out, s.c_in, 3, 3, 3}, 2));
  const NodeId b = g.leaf(random_tensor({s.c_out}, 3));
  for (auto _ : state) {
    Graph local;
    const NodeId lx = local.leaf(g.value(x));
    const NodeId lw = local.leaf(g.value(w));
    const NodeId lb = local.leaf(g.value(b));
    benchmark::DoNotOptimize(local.conv3d(lx, lw, lb));
  }
  const double macs = 27.0 * s.c_in * s.c_out * s.d * s.h * s.w;
  state.counters["GFLOP/s"] = benchmark::Counter(
      2.0 * macs * static_cast<double>(state.iterations()) / 1e9, benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Conv3dForward)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

void BM_Conv3dTrainStep(benchmark::State& state) {
  const ConvShape s = kLayers[state.range(0)];
  Tensor wt = random_tensor({s.c_out, s.c_in, 3, 3, 3}, 2, true);
  Tensor bt = random_tensor({s.c_out}, 3, true);
  // inner layers receive gradients through their inputs as well
  const Tensor xt = random_tensor({1, s.c_in, s.d, s.h, s.w}, 1, state.range(0) != 0);
  for (auto _ : state) {
    Graph g;
    const NodeId x = g.leaf(xt);
    const NodeId w = g.leaf(wt);
    const NodeId b = g.leaf(bt);
    const NodeId loss = g.sum(g.square(g.conv3d(x, w, b)));
    g.backward(loss);
    benchmark::DoNotOptimize(g.value(w).grad.data());
  }
  const double macs = 27.0 * s.c_in * s.c_out * s.d * s.h * s.w;
  state.counters["GFLOP/s"] = benchmark::Counter(
      3.0 * 2.0 * macs * static_cast<double>(state.iterations()) / 1e9,
      benchmark::Counter::kIsRate);
}
BENCHMARK(BM_Conv3dTrainStep)->DenseRange(0, 3)->Unit(benchmark::kMillisecond);

void BM_EncoderForward(benchmark::State& state) {
  Rng rng(7);
  const Encoder3D enc("pet_enc", kModelVolumeShape, rng);
  const Tensor x =
      random_tensor({1, 1, kModelVolumeShape[0], kModelVolumeShape[1], kModelVolumeShape[2]}, 1);
  for (auto _ : state) {
    Graph g;
    std::map<std::string, NodeId> bound;
    enc.bind(g, false, bound);
    benchmark::DoNotOptimize(enc.forward(g, g.leaf(x), bound));
  }
}
BENCHMARK(BM_EncoderForward)->Unit(benchmark::kMillisecond);

void BM_TrainStepOneBatch(benchmark::State& state) {
  // full PET_ONLY training step at batch 8
  ModelSpec spec;
  spec.kind = ModelKind::PET_ONLY;
  spec.seed = 11;
  spec.epochs = 1;
  spec.batch_size = 8;
  Model model = Model::build(spec);

  const int64_t vox = static_cast<int64_t>(kModelVolumeShape[0]) * kModelVolumeShape[1] *
                      kModelVolumeShape[2];
  std::vector<std::vector<float>> vols;
  Dataset data;
  Rng rng(3);
  for (int i = 0; i < 8; ++i) {
    std::vector<float> v(static_cast<size_t>(vox));
    for (float& f : v) f = static_cast<float>(rng.normal());
    vols.push_back(std::move(v));
  }
  for (int i = 0; i < 8; ++i) {
    ModelInput s;
    s.id = "B" + std::to_string(i);
    s.pet = &vols[static_cast<size_t>(i)];
    s.label = i % 2 == 0 ? 1.0f : 0.0f;
    data.items.push_back(s);
  }
  for (auto _ : state) {
    Model m = model;  // fresh parameters each step
    train(m, data, spec);
  }
}
BENCHMARK(BM_TrainStepOneBatch)->Unit(benchmark::kMillisecond);

}  // namespace
