#include <benchmark/benchmark.h>

#include <cmath>

#include "plab/analysis.hpp"
#include "plab/optim.hpp"
#include "plab/probes.hpp"

using namespace plab;

namespace {

Dataset task(int n_b, int K) {
  TaskSpec t;
  t.n_b = n_b;
  t.K = K;
  return generate(t);
}

}  // namespace

static void BM_Generate(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(task(static_cast<int>(st.range(0)), 10));
  st.SetItemsProcessed(st.iterations() * st.range(0) * 10);
}
BENCHMARK(BM_Generate)->Arg(200)->Arg(1000);

// One training step's worth of work: loss and gradient at batch 128.
static void BM_ForwardBackward(benchmark::State& st) {
  const Dataset ds = task(200, 10);
  ArchDescriptor a;
  const ModelState m = init(a, 1);
  const TokenBatch b = sample_batch(ds, static_cast<int>(st.range(0)), 0, 1);
  Engine<float> engine(a);
  std::vector<float> grad(m.params.size());
  Engine<float>::Request req;
  req.grad = grad;
  for (auto _ : st) benchmark::DoNotOptimize(engine.run(m.params, b, req));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}
BENCHMARK(BM_ForwardBackward)->Arg(32)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_Forward(benchmark::State& st) {
  const Dataset ds = task(200, 10);
  ArchDescriptor a;
  const ModelState m = init(a, 1);
  const TokenBatch b = sample_batch(ds, 128, 0, 1);
  Engine<float> engine(a);
  for (auto _ : st) benchmark::DoNotOptimize(engine.run(m.params, b, {}));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

static void BM_AdamW(benchmark::State& st) {
  ArchDescriptor a;
  ModelState m = init(a, 1);
  std::vector<float> g(m.params.size(), 1e-3f);
  AdamW opt(m.params.size(), TrainConfig{});
  for (auto _ : st) opt.step(m.params, g, 1e-3);
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(m.params.size()));
}
BENCHMARK(BM_AdamW);

static void BM_HessianVector(benchmark::State& st) {
  const Dataset ds = task(200, 10);
  ArchDescriptor a;
  const ModelState m = init(a, 1);
  const TokenBatch b = sample_batch(ds, 64, 0, 1);
  std::vector<double> v(m.params.size(), 1.0 / std::sqrt(static_cast<double>(m.params.size())));
  for (auto _ : st) benchmark::DoNotOptimize(hvp(m, b, v));
}
BENCHMARK(BM_HessianVector)->Unit(benchmark::kMillisecond);

static void BM_DetectTau(benchmark::State& st) {
  MetricsStream s;
  for (std::int64_t t = 0; t <= 50000; t += 50) {
    MetricsRecord r;
    r.step = t;
    r.eval_loss = t < 30000 ? std::log(10.0) : 0.01;
    s.push_back(r);
  }
  for (auto _ : st) benchmark::DoNotOptimize(detect_tau(s, 10));
}
BENCHMARK(BM_DetectTau);

static void BM_PowerLawBootstrap(benchmark::State& st) {
  std::vector<std::pair<double, double>> pts;
  for (int i = 1; i <= 10; ++i) pts.emplace_back(1000.0 * i, 0.1 * std::pow(1000.0 * i, 1.2));
  for (auto _ : st) benchmark::DoNotOptimize(fit_power_law(pts, static_cast<int>(st.range(0)), 42));
}
BENCHMARK(BM_PowerLawBootstrap)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
