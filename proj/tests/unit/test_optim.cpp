#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <unistd.h>

#include "plab/io.hpp"
#include "plab/optim.hpp"

using namespace plab;
namespace fs = std::filesystem;

namespace {

ArchDescriptor small_arch() {
  ArchDescriptor a;
  a.n_layers = 1;
  a.d_model = 32;
  a.n_heads = 2;
  a.d_mlp = 64;
  return a;
}

TrainConfig quick(std::int64_t steps) {
  TrainConfig c;
  c.lr = 3e-3;
  c.max_steps = steps;
  c.warmup_steps = 20;
  c.eval_every = 25;
  return c;
}

Dataset task(int n_b, int K, std::uint64_t seed = 42) {
  TaskSpec t;
  t.n_b = n_b;
  t.K = K;
  t.seed = seed;
  return generate(t);
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("plab_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(LrSchedule, CosineWarmupThenConstant) {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup_steps = 500;
  EXPECT_EQ(lr_schedule(c, 0), 0.0);
  EXPECT_NEAR(lr_schedule(c, 250), 5e-4, 1e-15);
  EXPECT_NEAR(lr_schedule(c, 100), 1e-3 * (1 - std::cos(std::numbers::pi * 0.2)) / 2, 1e-15);
  EXPECT_EQ(lr_schedule(c, 500), 1e-3);
  EXPECT_EQ(lr_schedule(c, 100000), 1e-3);
  c.warmup_steps = 0;
  EXPECT_EQ(lr_schedule(c, 0), 1e-3);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.warmup_steps = c.max_steps + 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SampleBatch, ReproducibleAndKeyed) {
  EXPECT_EQ(sample_batch(1000, 64, 7, 1), sample_batch(1000, 64, 7, 1));
  EXPECT_NE(sample_batch(1000, 64, 7, 1), sample_batch(1000, 64, 8, 1));
  EXPECT_NE(sample_batch(1000, 64, 7, 1), sample_batch(1000, 64, 7, 2));
}

TEST(SampleBatch, ChiSquareUniformity) {
  const std::size_t D = 100;
  std::vector<double> counts(D, 0.0);
  int total = 0;
  for (int step = 0; total < 100000; ++step) {
    for (auto i : sample_batch(D, 100, step, 3)) {
      ++counts[i];
      ++total;
    }
  }
  const double expected = total / static_cast<double>(D);
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // chi-square critical value, 99 degrees of freedom, alpha = 0.01
  EXPECT_LT(chi2, 134.642);
}

TEST(SampleBatch, WithReplacementCoverage) {
  const std::size_t D = 2000;
  double frac = 0.0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    const auto idx = sample_batch(D, static_cast<int>(D), r, 5);
    frac += std::set<std::size_t>(idx.begin(), idx.end()).size() / static_cast<double>(D);
  }
  EXPECT_NEAR(frac / reps, 1.0 - std::pow(1.0 - 1.0 / D, static_cast<double>(D)), 0.01);
}

TEST(AdamW, MatchesSlowReference) {
  TrainConfig c;
  c.weight_decay = 0.05;
  const std::size_t n = 257;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  std::vector<float> theta(n);
  for (auto& x : theta) x = static_cast<float>(nd(rng));
  std::vector<double> ref(theta.begin(), theta.end()), m(n, 0.0), v(n, 0.0);
  AdamW opt(n, c);
  for (int t = 1; t <= 30; ++t) {
    std::vector<float> g(n);
    for (auto& x : g) x = static_cast<float>(nd(rng));
    const double lr = 1e-3 * t;
    opt.step(theta, g, lr);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1 - c.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(c.beta1, t));
      const double vh = v[i] / (1 - std::pow(c.beta2, t));
      ref[i] -= lr * (c.weight_decay * ref[i] + mh / (std::sqrt(vh) + c.eps));
    }
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(theta[i] - ref[i]) / std::max(1.0, std::abs(ref[i])));
  EXPECT_LT(worst, 1e-6);
}

TEST(AdamW, DecayIsDecoupled) {
  // A zero gradient leaves the moments at zero; only decay moves theta.
  TrainConfig c;
  c.weight_decay = 0.1;
  AdamW opt(3, c);
  std::vector<float> th{1.0f, -2.0f, 0.5f}, g(3, 0.0f);
  opt.step(th, g, 0.01);
  EXPECT_FLOAT_EQ(th[0], 1.0f * (1 - 0.001f));
  EXPECT_FLOAT_EQ(th[1], -2.0f * (1 - 0.001f));
  for (float x : opt.m()) EXPECT_EQ(x, 0.0f);
  for (float x : opt.v()) EXPECT_EQ(x, 0.0f);
}

TEST(Train, FiberOfOneConvergesWithoutPlateau) {
  const Dataset ds = task(100, 1);
  const RunRecord r = train(ds, small_arch(), quick(2000));
  double best = 1e9;
  for (const auto& m : r.metrics) best = std::min(best, m.eval_loss);
  EXPECT_LT(best, 0.05);
  for (const auto& m : r.metrics) EXPECT_EQ(m.delta_z, 0.0);
}

TEST(Train, DeterministicMetrics) {
  const Dataset ds = task(20, 3);
  const RunRecord a = train(ds, small_arch(), quick(150));
  const RunRecord b = train(ds, small_arch(), quick(150));
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) EXPECT_EQ(a.metrics[i], b.metrics[i]);
  EXPECT_EQ(a.final_model.params, b.final_model.params);
}

TEST(Train, MetricsStreamInvariants) {
  const Dataset ds = task(20, 3);
  const RunRecord r = train(ds, small_arch(), quick(200));
  ASSERT_FALSE(r.metrics.empty());
  for (std::size_t i = 0; i < r.metrics.size(); ++i) {
    const auto& m = r.metrics[i];
    EXPECT_EQ(m.excess_risk, m.eval_loss);
    EXPECT_EQ(m.tokens_processed, m.step * 128);
    if (i) EXPECT_GT(m.step, r.metrics[i - 1].step);
  }
  EXPECT_EQ(r.metrics.back().step, r.steps_run);
}

TEST(Train, DivergenceMarksFailure) {
  TrainConfig c = quick(200);
  c.lr = 1e8;
  c.warmup_steps = 0;
  const RunRecord r = train(task(20, 3), small_arch(), c);
  EXPECT_EQ(r.status, RunStatus::failed);
  EXPECT_FALSE(r.failure.empty());
  EXPECT_TRUE(r.final_model.all_finite());
}

TEST(Train, RunDirectoryRoundTrip) {
  const fs::path dir = temp_dir("rundir");
  RunOptions o;
  o.run_dir = dir;
  ProbeSchedule p;
  p.stop_after_tau = 2.0;
  const RunRecord r = train(task(20, 3), small_arch(), quick(600), p, o);
  ASSERT_TRUE(run_is_complete(dir));
  EXPECT_TRUE(verify_manifest(dir).empty());
  ASSERT_TRUE(r.tau.confirmed);
  const RunRecord back = load_run(dir, true);
  EXPECT_EQ(back.metrics, r.metrics);
  EXPECT_EQ(back.events, r.events);
  EXPECT_EQ(back.config, r.config);
  EXPECT_EQ(back.arch, r.arch);
  EXPECT_EQ(back.final_model.params, r.final_model.params);
  for (const char* e : {"tau_half", "tau", "tau_1_5", "tau_2", "final"}) {
    EXPECT_NE(back.event(e), nullptr) << e;
  }
  EXPECT_LE(back.steps_run, 2 * r.tau.tau_steps + 2 * 25);
  fs::remove_all(dir);
}

TEST(Transfer, IdenticalTasksFinetuneImmediately) {
  const Dataset ds = task(20, 3);
  ProbeSchedule p;
  p.tau_events = false;
  const TransferResult t = transfer_train(ds, ds, small_arch(), quick(800), p);
  ASSERT_TRUE(t.pretrain.tau.confirmed);
  ASSERT_TRUE(t.finetune.tau.confirmed);
  EXPECT_EQ(t.finetune.tau.tau_steps, 0);
  // The scratch baseline starts from the same init seed as the pretrain run.
  EXPECT_EQ(t.scratch.metrics.front(), t.pretrain.metrics.front());
}
