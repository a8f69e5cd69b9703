#include <benchmark/benchmark.h>

#include "moss/encoder.hpp"
#include "moss/ops.hpp"
#include "moss/stss.hpp"

namespace {

moss::FeatureMap<float> random_features(const moss::Shape& shape, std::uint64_t seed) {
  moss::Rng rng(seed);
  return moss::FeatureMap<float>(moss::uniform_tensor<float>(shape, rng));
}

const moss::Shape kShape{8, 14, 14, 64};
const moss::WindowSpec kWindow{5, 9, 9};

void set_flops(benchmark::State& state, std::size_t flops) {
  state.counters["GFLOP"] =
      benchmark::Counter(static_cast<double>(flops) * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

void BM_StssNaive(benchmark::State& state) {
  const auto f = random_features(kShape, 1);
  for (auto _ : state) benchmark::DoNotOptimize(moss::stss_oracle(f, kWindow));
  set_flops(state, moss::stss_flops(kShape, kWindow));
}
BENCHMARK(BM_StssNaive)->Unit(benchmark::kMillisecond);

void BM_StssBlocked(benchmark::State& state) {
  const auto f = random_features(kShape, 1);
  for (auto _ : state) benchmark::DoNotOptimize(moss::stss_forward(f, kWindow));
  set_flops(state, moss::stss_flops(kShape, kWindow));
}
BENCHMARK(BM_StssBlocked)->Unit(benchmark::kMillisecond);

void BM_StssParallel(benchmark::State& state) {
  const auto f = random_features(kShape, 1);
  const moss::Exec exec{static_cast<int>(state.range(0))};
  for (auto _ : state) benchmark::DoNotOptimize(moss::stss_forward(f, kWindow, {}, exec));
  set_flops(state, moss::stss_flops(kShape, kWindow));
}
BENCHMARK(BM_StssParallel)->Arg(1)->Arg(2)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond)->UseRealTime();

void BM_StssBackward(benchmark::State& state) {
  const auto f = random_features(kShape, 1);
  moss::Rng rng(2);
  const auto dS = moss::uniform_tensor<float>({8, 14, 14, 5, 9, 9}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(moss::stss_backward(f, kWindow, {}, dS));
}
BENCHMARK(BM_StssBackward)->Unit(benchmark::kMillisecond);

void BM_EncoderLearned(benchmark::State& state) {
  const moss::WindowSpec window{3, 5, 5};
  const moss::EncoderSpec spec{window, 16, 16, 3};
  const auto f = random_features({8, 8, 8, 16}, 3);
  const auto s = moss::stss_forward(f, window);
  moss::ParamStore<float> params;
  moss::Rng rng(4);
  moss::init_encoder_params(params, "enc1", spec, rng);
  for (auto _ : state) benchmark::DoNotOptimize(moss::encode_learned(s, params, "enc1", spec, moss::Mode::eval));
}
BENCHMARK(BM_EncoderLearned)->Unit(benchmark::kMillisecond);

void BM_Conv3x3(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  moss::Rng rng(5);
  const auto x = moss::uniform_tensor<float>({40, 8, 8, c}, rng);
  const auto k = moss::uniform_tensor<float>({3, 3, c, c}, rng);
  const auto b = moss::uniform_tensor<float>({c}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(moss::ops::conv3x3(x, k, b));
  set_flops(state, 2 * 40 * 64 * 9 * c * c);
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_Conv3x3Backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  moss::Rng rng(6);
  const auto x = moss::uniform_tensor<float>({40, 8, 8, c}, rng);
  const auto k = moss::uniform_tensor<float>({3, 3, c, c}, rng);
  const auto dy = moss::uniform_tensor<float>({40, 8, 8, c}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(moss::ops::conv3x3_backward(x, k, dy));
}
BENCHMARK(BM_Conv3x3Backward)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
