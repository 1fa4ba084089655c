#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "plab/analysis.hpp"

using namespace plab;

namespace {

std::vector<std::pair<double, double>> noiseless(double a, double b, int n) {
  std::vector<std::pair<double, double>> pts;
  for (int i = 1; i <= n; ++i) {
    const double x = 100.0 * i;
    pts.emplace_back(x, a * std::pow(x, b));
  }
  return pts;
}

// Ten K values at n_b = 1000 and the tau reported for each.
std::vector<std::pair<double, double>> ksweep_table() {
  const double K[] = {3, 5, 7, 10, 13, 17, 20, 25, 30, 36};
  const double tau[] = {450, 800, 1050, 1850, 2100, 3300, 3950, 5250, 6950, 8750};
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 10; ++i) pts.emplace_back(1000.0 * K[i], tau[i]);
  return pts;
}

// Flat at plateau until tau, then near zero; delta_z switches on at onset.
MetricsStream staged(int, double plateau, std::int64_t tau, std::int64_t onset, std::int64_t every = 50) {
  MetricsStream s;
  for (std::int64_t t = 0; t <= 3 * tau; t += every) {
    MetricsRecord r;
    r.step = t;
    r.eval_loss = t < every ? 3.0 * std::log(38.0) : (t < tau ? plateau : 0.01);
    r.excess_risk = r.eval_loss;
    r.delta_z = onset >= 0 && t >= onset ? 1.0 : 0.0;
    s.push_back(r);
  }
  return s;
}

}  // namespace

TEST(PowerLaw, NoiselessRecovery) {
  const auto pts = noiseless(2.0, 1.3, 10);
  const auto f = fit_power_law(pts, 200, 1);
  EXPECT_NEAR(f.exponent, 1.3, 1e-9);
  EXPECT_NEAR(std::exp(f.intercept), 2.0, 1e-9);
  EXPECT_NEAR(f.r2, 1.0, 1e-12);
  EXPECT_EQ(f.n_points, 10);
}

TEST(PowerLaw, ReportedKSweep) {
  const auto f = fit_power_law(ksweep_table(), 10000, 42);
  EXPECT_NEAR(f.exponent, 1.19, 0.01);
  EXPECT_GE(f.r2, 0.98);
  EXPECT_LE(f.ci_lo, f.exponent);
  EXPECT_GE(f.ci_hi, f.exponent);
  EXPECT_GT(f.ci_lo, 1.0);
  EXPECT_LT(f.ci_hi, 1.4);
}

TEST(PowerLaw, TooFewPointsThrows) {
  const auto pts = noiseless(1.0, 1.0, 2);
  EXPECT_THROW(fit_power_law(pts), std::invalid_argument);
  std::vector<std::pair<double, double>> same_x{{5, 1}, {5, 2}, {5, 3}};
  EXPECT_THROW(fit_power_law(same_x), std::invalid_argument);
  std::vector<std::pair<double, double>> neg{{1, 1}, {2, -2}, {3, 3}};
  EXPECT_THROW(fit_power_law(neg), std::invalid_argument);
}

TEST(PowerLaw, ScaleEquivariance) {
  std::mt19937_64 g(3);
  std::normal_distribution<double> n(0.0, 0.1);
  auto pts = noiseless(1.5, 0.8, 12);
  for (auto& p : pts) p.second *= std::exp(n(g));
  const auto f = fit_power_law(pts, 500, 9);
  auto scaled = pts;
  for (auto& p : scaled) {
    p.first *= 7.0;
    p.second *= 3.0;
  }
  const auto h = fit_power_law(scaled, 500, 9);
  EXPECT_NEAR(h.exponent, f.exponent, 1e-9);
  EXPECT_NEAR(h.r2, f.r2, 1e-9);
  EXPECT_NEAR(h.ci_lo, f.ci_lo, 1e-9);
  EXPECT_NEAR(h.ci_hi, f.ci_hi, 1e-9);
}

TEST(PowerLaw, BootstrapIsSeeded) {
  auto pts = ksweep_table();
  const auto a = fit_power_law(pts, 2000, 5);
  const auto b = fit_power_law(pts, 2000, 5);
  EXPECT_EQ(a.ci_lo, b.ci_lo);
  EXPECT_EQ(a.ci_hi, b.ci_hi);
}

TEST(Stats, MedianMeanSd) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  const std::vector<double> xs{2, 4, 4, 4, 5, 5, 7, 9};
  EXPECT_EQ(mean(xs), 5.0);
  EXPECT_NEAR(sample_sd(xs), std::sqrt(32.0 / 7.0), 1e-12);
}

TEST(Plateau, PinnedAtLnKGivesUnitRatio) {
  const int K = 10;
  const auto s = staged(K, std::log(10.0), 2000, 1500);
  const auto tau = detect_tau(s, K);
  ASSERT_EQ(tau.tau_steps, 2000);
  const auto p = plateau_height(s, K, tau);
  ASSERT_TRUE(p.defined);
  EXPECT_NEAR(p.ratio, 1.0, 1e-12);
  EXPECT_EQ(p.window_lo, 50);
  EXPECT_EQ(p.window_hi, 1000);
  EXPECT_FALSE(p.low_confidence);
}

TEST(Plateau, UndefinedCases) {
  const auto s = staged(1, 0.02, 2000, -1);
  EXPECT_FALSE(plateau_height(s, 1, detect_tau(s, 1)).defined);
  TauEstimate none;
  EXPECT_FALSE(plateau_height(staged(10, std::log(10.0), 2000, -1), 10, none).defined);
  // Never near ln K.
  const auto off = staged(10, 1.5 * std::log(10.0), 2000, -1);
  EXPECT_FALSE(plateau_height(off, 10, detect_tau(off, 10)).defined);
}

TEST(DirectionWindows, SplitsByPhase) {
  const auto s = staged(10, std::log(10.0), 2000, 1500);
  const auto tau = detect_tau(s, 10);
  const auto p = plateau_height(s, 10, tau);
  std::vector<DirectionConsistency> dc;
  for (std::int64_t t = 100; t <= 5000; t += 100) dc.push_back({t, t <= 1000 ? 0.0 : 0.9});
  dc.push_back({1100, std::nullopt});
  const auto w = direction_windows(dc, p, tau);
  ASSERT_TRUE(w.plateau_mean.has_value());
  EXPECT_EQ(*w.plateau_mean, 0.0);
  EXPECT_EQ(w.plateau_n, 10);
  ASSERT_TRUE(w.transition_max.has_value());
  EXPECT_NEAR(*w.transition_max, 0.9, 1e-15);
  EXPECT_EQ(w.transition_n, 30);
}

TEST(TokenNormalize, ReportedBatchRows) {
  std::vector<std::pair<int, std::int64_t>> rows{{32, 23200}, {256, 1600}};
  const auto t = token_normalize(rows);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0].tau_tokens, 742400);
  EXPECT_EQ(t[1].tau_tokens, 409600);
  EXPECT_NEAR(t[0].step_ratio, 14.5, 1e-12);
  EXPECT_NEAR(t[0].token_ratio, 742400.0 / 409600.0, 1e-12);
  EXPECT_EQ(t[1].token_ratio, 1.0);
  std::vector<std::pair<int, std::int64_t>> bad{{0, 10}};
  EXPECT_THROW(token_normalize(bad), std::invalid_argument);
}

TEST(Cascade, LeadFractions) {
  std::vector<RunSeries> runs(3);
  runs[0].fiber_size = 10;
  runs[0].metrics = staged(10, std::log(10.0), 2000, 1000);
  runs[1].fiber_size = 10;
  runs[1].metrics = staged(10, std::log(10.0), 2000, 2000);
  runs[2].fiber_size = 10;
  runs[2].metrics = staged(10, std::log(10.0), 2000, -1);
  const auto c = cascade_timing(runs);
  ASSERT_EQ(c.lead_fractions.size(), 2u);
  EXPECT_NEAR(c.lead_fractions[0], 0.5, 1e-12);
  EXPECT_NEAR(c.lead_fractions[1], 0.0, 1e-12);
  EXPECT_NEAR(c.mean, 0.25, 1e-12);
  EXPECT_EQ(c.skipped, 1);
}

TEST(Threshold, StepDropsAgreeAcrossAlpha) {
  std::vector<RunSeries> runs;
  for (double D : {1000.0, 2000.0, 4000.0, 8000.0}) {
    RunSeries r;
    r.x = D;
    r.fiber_size = 10;
    const auto tau = static_cast<std::int64_t>(std::llround(0.5 * std::pow(D, 1.2) / 50.0)) * 50;
    r.metrics = staged(10, std::log(10.0), tau, -1);
    runs.push_back(std::move(r));
  }
  const std::vector<double> alphas{0.3, 0.5, 0.7};
  const auto rows = threshold_sensitivity(runs, alphas, 200, 1);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.fit_ok);
    EXPECT_EQ(r.fit.exponent, rows[0].fit.exponent);
    EXPECT_NEAR(r.fit.exponent, 1.2, 0.01);
  }
  const std::vector<double> bad{1.0};
  EXPECT_THROW(threshold_sensitivity(runs, bad), std::invalid_argument);
}

TEST(Csv, QuotesWhenNeeded) {
  const auto t = csv_table({"a", "b"}, {{"1", "x,y"}, {"2", "say \"hi\""}});
  EXPECT_EQ(t, "a,b\n1,\"x,y\"\n2,\"say \"\"hi\"\"\"\n");
}

TEST(Svg, WellFormedOutput) {
  Series s{"run", {{1, 2}, {2, 1}, {3, 0.5}}};
  const auto a = svg_loss_curves({s}, {{"ln 10", std::log(10.0)}}, "loss");
  EXPECT_EQ(a.rfind("<svg", 0), 0u);
  EXPECT_NE(a.find("</svg>"), std::string::npos);
  const auto f = fit_power_law(noiseless(2.0, 1.3, 5), 50, 1);
  const auto b = svg_loglog_fit({"pts", noiseless(2.0, 1.3, 5)}, f, "fit", "D", "tau");
  EXPECT_NE(b.find("</svg>"), std::string::npos);
}
