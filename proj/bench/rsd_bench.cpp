#include <benchmark/benchmark.h>

#include <iostream>

#include "rsd/distillation.hpp"
#include "rsd/gaussian_model.hpp"
#include "rsd/metrics.hpp"
#include "rsd/operators.hpp"
#include "rsd/pretraining.hpp"
#include "rsd/throughput.hpp"

namespace {

using rsd::Index;
using rsd::par::Mode;

Mode mode_of(const benchmark::State& state) { return state.range(0) ? Mode::kParallel : Mode::kSerial; }

rsd::MlpConfig bench_mlp() {
  rsd::MlpConfig c;
  c.data_dim = 16;
  c.hidden = {128, 128};
  c.seed = 1;
  return c;
}

void BM_blur_apply_rows(benchmark::State& state) {
  const auto op = rsd::make_gaussian_blur(16, 5, 1.0);
  rsd::Rng rng(1);
  rsd::Samples x(4096, op.input_dim());
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(op.apply_rows(x, mode_of(state)));
  state.SetItemsProcessed(state.iterations() * x.rows());
}

void BM_sample_corrupted(benchmark::State& state) {
  rsd::Rng rng(2);
  const auto law = rsd::LowRankGaussian::random(64, 4, rng);
  const rsd::CorruptedGaussian model(law, rsd::make_avg_pool(8, 2), 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(rsd::sample_corrupted(model, 8192, rng, mode_of(state)));
  state.SetItemsProcessed(state.iterations() * 8192);
}

void BM_mlp_forward(benchmark::State& state) {
  const rsd::Mlp net(bench_mlp());
  rsd::Rng rng(3);
  rsd::Matrix x(16, 2048);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  const rsd::Matrix cond(0, x.cols());
  const rsd::Vector sigma = rsd::Vector::Constant(x.cols(), 0.5);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x, cond, sigma));
  state.SetItemsProcessed(state.iterations() * x.cols());
}

void BM_generate(benchmark::State& state) {
  const rsd::MlpGenerator g(rsd::Mlp(bench_mlp()), 5.0);
  const rsd::Rng rng(4);
  for (auto _ : state) benchmark::DoNotOptimize(rsd::generate(g, 4096, rng, mode_of(state)));
  state.SetItemsProcessed(state.iterations() * 4096);
}

void BM_tweedie_sampler_20(benchmark::State& state) {
  const rsd::Mlp net(bench_mlp());
  const rsd::Rng rng(5);
  const auto grid = rsd::tweedie_grid(10.0, 0.02, 20);
  for (auto _ : state) benchmark::DoNotOptimize(rsd::sample_ambient_tweedie(net, 0.0, grid, false, 4096, rng, mode_of(state)));
  state.SetItemsProcessed(state.iterations() * 4096);
}

void BM_proximal_frechet(benchmark::State& state) {
  rsd::Rng rng(6);
  const auto law = rsd::LowRankGaussian::random(16, 2, rng);
  rsd::OperatorSpec spec;
  spec.kind = rsd::OperatorKind::kRandomMask;
  spec.dim = 16;
  spec.missing_rate = 0.3;
  spec.per_sample = true;
  const rsd::OperatorSample ops(spec);
  const rsd::Samples gen = rsd::sample_clean(law, 8192, rng.stream(1, 0));
  const rsd::Samples ref = ops.fixed().apply_rows(rsd::sample_clean(law, 8192, rng.stream(2, 0)));
  for (auto _ : state) benchmark::DoNotOptimize(rsd::proximal_frechet(gen, ref, ops, 0.1, rng, 1e-6, mode_of(state)));
}

BENCHMARK(BM_blur_apply_rows)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_sample_corrupted)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_mlp_forward)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_generate)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_tweedie_sampler_20)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_proximal_frechet)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();

  const auto r = rsd::measure_one_step_speedup(bench_mlp(), 4096, 20, 3);
  std::cout << "one-step generate: " << r.generate_per_second << " samples/s\n"
            << "20-step sampler:   " << r.sampler_per_second << " samples/s\n"
            << "speedup: " << r.speedup << "x\n";
  return 0;
}
