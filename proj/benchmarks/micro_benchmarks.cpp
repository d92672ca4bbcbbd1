// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>

#include "evla/decode.hpp"
#include "evla/trainer.hpp"

namespace {

using namespace evla;

struct Setup {
  PolicyConfig cfg;
  PolicyParams params;
  ActionCodec codec;
  std::vector<Episode> episodes;

  explicit Setup(MaskMode mode) {
    cfg.mask_mode = mode;
    params = init_params(cfg);
    episodes = gen_dataset(1, 256, Split::kTrain, TaskConfig{});
    codec = fit_codec_for(episodes, cfg, TrainConfig{});
  }
};

const Setup& setup(MaskMode mode) {
  static const Setup joint(MaskMode::kJoint);
  static const Setup causal(MaskMode::kCausal);
  return mode == MaskMode::kJoint ? joint : causal;
}

void BM_Decode(benchmark::State& state) {
  const auto path = static_cast<DecodePath>(state.range(0));
  const Setup& s = setup(path == DecodePath::kJoint ? MaskMode::kJoint : MaskMode::kCausal);
  std::size_t i = 0;
  for (auto _ : state) {
    DecodeResult r = decode(path, s.params, s.cfg, s.episodes[i++ % s.episodes.size()], s.codec);
    benchmark::DoNotOptimize(r.tokens.data());
  }
  state.SetLabel(to_string(path));
  state.counters["flops"] = static_cast<double>(count_flops(s.cfg, decode_layout(s.cfg), path));
}
BENCHMARK(BM_Decode)
    ->Arg(static_cast<int>(DecodePath::kJoint))
    ->Arg(static_cast<int>(DecodePath::kArCache))
    ->Arg(static_cast<int>(DecodePath::kArNoCache))
    ->Unit(benchmark::kMicrosecond);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = Tensor::zeros(n, n);
  Tensor b = Tensor::zeros(n, n);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> dist;
  for (double& v : a.values()) v = dist(rng);
  for (double& v : b.values()) v = dist(rng);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(24)->Arg(32)->Arg(128);

void BM_TrainStep(benchmark::State& state) {
  const auto mode = static_cast<MaskMode>(state.range(0));
  const Setup& s = setup(mode);
  PolicyParams params = s.params;
  AdamState adam = AdamState::zeros(params);
  TrainConfig tcfg;
  std::vector<Episode> batch(s.episodes.begin(), s.episodes.begin() + 32);
  for (auto _ : state) {
    StepMetrics m = train_step(params, s.cfg, batch, s.codec, tcfg, adam);
    benchmark::DoNotOptimize(m.loss);
  }
  state.SetLabel(to_string(mode));
}
BENCHMARK(BM_TrainStep)
    ->Arg(static_cast<int>(MaskMode::kJoint))
    ->Arg(static_cast<int>(MaskMode::kCausal))
    ->Unit(benchmark::kMillisecond);

}  // namespace
