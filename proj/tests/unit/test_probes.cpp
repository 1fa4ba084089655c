#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "plab/probes.hpp"
#include "plab/rng.hpp"

using namespace plab;

namespace {

// eval_loss = f(step) on a fixed cadence.
template <typename F>
MetricsStream stream_of(std::int64_t last, std::int64_t every, F f) {
  MetricsStream s;
  for (std::int64_t t = 0; t <= last; t += every) {
    MetricsRecord r;
    r.step = t;
    r.eval_loss = r.excess_risk = f(t);
    r.tokens_processed = t * 128;
    s.push_back(r);
  }
  return s;
}

SymmetricOperator diagonal(std::vector<double> d) {
  SymmetricOperator op;
  op.dim = d.size();
  op.apply = [d](std::span<const double> v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = d[i] * v[i];
    return out;
  };
  return op;
}

Dataset task(int n_b, int K) {
  TaskSpec t;
  t.n_b = n_b;
  t.K = K;
  return generate(t);
}

}  // namespace

TEST(Tau, StepDropIsDetectedAtTheDrop) {
  const double lnk = std::log(20.0);
  auto s = stream_of(6000, 100, [&](std::int64_t t) { return t < 3200 ? lnk : 0.1; });
  const auto tau = detect_tau(s, 20, 0.5, 128);
  EXPECT_TRUE(tau.confirmed);
  EXPECT_EQ(tau.tau_steps, 3200);
  EXPECT_EQ(tau.tau_tokens, 3200 * 128);
  EXPECT_EQ(tau.raw_crossing, 3200);
}

TEST(Tau, SingleDipIsNotConfirmed) {
  const double lnk = std::log(10.0);
  auto s = stream_of(3000, 100, [&](std::int64_t t) { return t == 1000 ? 0.5 : lnk; });
  const auto tau = detect_tau(s, 10);
  EXPECT_FALSE(tau.confirmed);
  EXPECT_EQ(tau.tau_steps, -1);
  EXPECT_EQ(tau.raw_crossing, 1000);
}

TEST(Tau, DipThenRealDrop) {
  const double lnk = std::log(10.0);
  auto s = stream_of(3000, 100, [&](std::int64_t t) { return t == 500 || t >= 2000 ? 0.2 : lnk; });
  const auto tau = detect_tau(s, 10);
  EXPECT_TRUE(tau.confirmed);
  EXPECT_EQ(tau.tau_steps, 2000);
}

TEST(Tau, NeverBelowThreshold) {
  auto s = stream_of(3000, 100, [](std::int64_t) { return 5.0; });
  const auto tau = detect_tau(s, 10);
  EXPECT_FALSE(tau.confirmed);
  EXPECT_EQ(tau.tau_steps, -1);
  EXPECT_EQ(tau.raw_crossing, -1);
}

TEST(Tau, LowerAlphaNeverComesEarlier) {
  auto s = stream_of(10000, 50, [](std::int64_t t) { return 4.0 * std::exp(-static_cast<double>(t) / 1500.0); });
  std::int64_t prev = 0;
  for (double alpha : {0.9, 0.7, 0.5, 0.3, 0.1}) {
    const auto tau = detect_tau(s, 10, alpha);
    ASSERT_TRUE(tau.confirmed);
    EXPECT_GE(tau.tau_steps, prev) << alpha;
    prev = tau.tau_steps;
  }
}

TEST(Tau, TrivialFiberUsesFallbackThreshold) {
  EXPECT_EQ(tau_threshold(1, 0.5), kTrivialFiberThreshold);
  EXPECT_NEAR(tau_threshold(10, 0.5), 0.5 * std::log(10.0), 1e-15);
}

TEST(DeltaZOnset, FirstOfThreeConsecutive) {
  auto s = stream_of(3000, 100, [](std::int64_t t) { return t < 2000 ? 2.0 : 0.1; });
  for (auto& r : s) {
    if (r.step == 500) r.delta_z = 0.5;  // isolated spike
    if (r.step >= 1000) r.delta_z = 0.2 + 1e-3 * static_cast<double>(r.step);
  }
  const auto tau = detect_tau(s, 10);
  ASSERT_EQ(tau.tau_steps, 2000);
  const auto on = detect_delta_z_onset(s, tau);
  EXPECT_TRUE(on.found);
  EXPECT_EQ(on.onset_step, 1000);
  EXPECT_NEAR(on.lead_fraction, 0.5, 1e-12);
}

TEST(DeltaZOnset, NoneWhenFlat) {
  auto s = stream_of(3000, 100, [](std::int64_t) { return 1.0; });
  const auto on = detect_delta_z_onset(s, detect_tau(s, 10));
  EXPECT_FALSE(on.found);
  EXPECT_EQ(on.onset_step, -1);
}

TEST(DeltaZ, FiberOfOneIsExactlyZero) {
  const Dataset ds = task(40, 1);
  ArchDescriptor a;
  a.n_layers = 1;
  a.d_model = 32;
  a.n_heads = 2;
  a.d_mlp = 64;
  const ModelState m = init(a, 3);
  EXPECT_EQ(delta_z(m, ds.examples, 5), 0.0);
}

TEST(DeltaZ, ModelIgnoringSelectorGivesZero) {
  // The linear family with zero weights predicts a constant distribution.
  ArchDescriptor a;
  a.family = Family::linear;
  ModelState m = init(a, 1);
  std::fill(m.params.begin(), m.params.end(), 0.0f);
  const Dataset ds = task(30, 5);
  EXPECT_NEAR(delta_z(m, ds.examples, 9), 0.0, 1e-5);
}

TEST(PowerIteration, DiagonalToy) {
  const auto op = diagonal({3.0, 1.0, -0.01});
  const auto top = power_iteration(op, 200, 1);
  EXPECT_NEAR(top.eigenvalue, 3.0, 0.03);
  EXPECT_LT(top.residual, 1e-6);
  const auto h = hessian_extremes(op, 2000, 1);
  EXPECT_NEAR(h.lambda_max, 3.0, 0.03);
  EXPECT_NEAR(h.lambda_min, -0.01, 1e-4);
  EXPECT_LE(h.lambda_min, h.lambda_max);
  EXPECT_FALSE(h.flagged);
}

TEST(PowerIteration, RandomSymmetricMatchesSpectrumBounds) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> n;
  const int d = 20;
  std::vector<double> m(d * d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) m[i * d + j] = m[j * d + i] = n(gen);
  }
  SymmetricOperator op;
  op.dim = d;
  op.apply = [&m, d](std::span<const double> v) {
    std::vector<double> out(d, 0.0);
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) out[i] += m[i * d + j] * v[j];
    }
    return out;
  };
  const auto h = hessian_extremes(op, 3000, 2);
  // Rayleigh quotients stay inside the Gershgorin discs.
  double gersh = 0.0;
  for (int i = 0; i < d; ++i) {
    double r = 0.0;
    for (int j = 0; j < d; ++j) r += std::abs(m[i * d + j]);
    gersh = std::max(gersh, r);
  }
  EXPECT_LE(h.lambda_min, h.lambda_max);
  EXPECT_LE(h.lambda_max, gersh);
  EXPECT_GE(h.lambda_min, -gersh);
}

TEST(PowerIteration, ZeroOperatorReportsZero) {
  const auto op = diagonal({0.0, 0.0});
  const auto r = power_iteration(op, 10, 1);
  EXPECT_EQ(r.eigenvalue, 0.0);
}

TEST(Direction, ConstantAndReversingPaths) {
  std::vector<std::int64_t> steps{0, 10, 20, 30};
  std::vector<std::vector<float>> line{{0, 0}, {1, 1}, {2, 2}, {3, 3}};
  auto dc = direction_consistency(steps, line);
  ASSERT_EQ(dc.size(), 2u);
  EXPECT_NEAR(*dc[0].cosine, 1.0, 1e-12);
  EXPECT_EQ(dc[0].step, 10);
  std::vector<std::vector<float>> zig{{0, 0}, {1, 0}, {0, 0}, {1, 0}};
  dc = direction_consistency(steps, zig);
  EXPECT_NEAR(*dc[0].cosine, -1.0, 1e-12);
  EXPECT_NEAR(*dc[1].cosine, -1.0, 1e-12);
}

TEST(Direction, ZeroDisplacementHasNoCosine) {
  std::vector<std::int64_t> steps{0, 10, 20};
  std::vector<std::vector<float>> th{{1, 1}, {1, 1}, {2, 2}};
  const auto dc = direction_consistency(steps, th);
  ASSERT_EQ(dc.size(), 1u);
  EXPECT_FALSE(dc[0].cosine.has_value());
}

TEST(Direction, RandomWalkCosinesAreSmall) {
  const int n = 10000;
  std::mt19937_64 gen(5);
  std::normal_distribution<float> g;
  std::vector<float> theta(n, 0.0f);
  DirectionTracker tr;
  for (int s = 0; s < 12; ++s) {
    tr.push(s * 100, theta);
    for (auto& x : theta) x += g(gen);
  }
  ASSERT_EQ(tr.results().size(), 10u);
  for (const auto& r : tr.results()) EXPECT_LT(std::abs(*r.cosine), 5.0 / std::sqrt(n));
}

TEST(Dissipation, ZeroGradientGivesZero) {
  auto s = stream_of(4000, 100, [](std::int64_t) { return 1.0; });
  const auto d = dissipation(s, 1000, 1e-3);
  EXPECT_EQ(d.Q, 0.0);
  EXPECT_EQ(d.measurements, 15);
  EXPECT_FALSE(d.partial);
}

TEST(Dissipation, ConstantGradientIntegrates) {
  auto s = stream_of(4000, 100, [](std::int64_t) { return 1.0; });
  for (auto& r : s) r.grad_norm = 2.0;
  const auto d = dissipation(s, 1000, 1e-3);
  EXPECT_NEAR(d.Q, 1e-3 * 4.0 * 1500.0, 1e-9);
  EXPECT_EQ(d.window_lo, 500);
  EXPECT_EQ(d.window_hi, 2000);
  EXPECT_TRUE(dissipation(s, 3000, 1e-3).partial);
  EXPECT_THROW(dissipation(s, -1, 1e-3), std::invalid_argument);
}

TEST(Ablation, RequiresAttention) {
  ArchDescriptor a;
  a.family = Family::linear;
  const ModelState m = init(a, 1);
  EXPECT_THROW(ablate_heads(m, task(10, 3), Phase::pre), std::invalid_argument);
}

TEST(Ablation, OneEntryPerHead) {
  ArchDescriptor a;
  a.n_layers = 2;
  a.d_model = 32;
  a.n_heads = 2;
  a.d_mlp = 64;
  const ModelState m = init(a, 1);
  const auto rep = ablate_heads(m, task(20, 3), Phase::mid, 7);
  EXPECT_EQ(rep.heads.size(), 4u);
  EXPECT_EQ(rep.step, 7);
  EXPECT_GT(rep.baseline_loss, 0.0);
  EXPECT_EQ(phase_from_string(to_string(Phase::post)), Phase::post);
}

TEST(Groups, UntrainedModelSolvesNothing) {
  ArchDescriptor a;
  a.n_layers = 1;
  a.d_model = 32;
  a.n_heads = 2;
  a.d_mlp = 64;
  const ModelState m = init(a, 1);
  const Dataset ds = task(30, 4);
  const auto g = group_snapshot(m, ds, 0, 10, 1);
  EXPECT_EQ(g.sampled_groups, 10);
  EXPECT_EQ(g.frac_100, 0.0);
  EXPECT_EQ(g.frac_ge_80, 0.0);
  EXPECT_GE(g.mean_accuracy, 0.0);
  EXPECT_LT(g.mean_accuracy, 0.2);
}

TEST(EvalSet, CappedAndStable) {
  const Dataset small = task(100, 5);
  EXPECT_EQ(eval_indices(small, 1).size(), small.size());
  const Dataset big = task(1000, 5);
  const auto a = eval_indices(big, 1);
  EXPECT_EQ(a.size(), kEvalCap);
  EXPECT_EQ(a, eval_indices(big, 1));
}
