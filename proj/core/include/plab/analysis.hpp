#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "plab/metrics.hpp"
#include "plab/probes.hpp"

namespace plab {

struct PowerLawFit {
  double exponent = 0.0;
  double intercept = 0.0;  // ln-space intercept: ln y = intercept + exponent ln x
  double r2 = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  int n_points = 0;
  int bootstrap_resamples = 10000;
};

// OLS on (ln x, ln y) with a seeded percentile bootstrap over points. Needs
// at least three points with positive coordinates and two distinct x values.
PowerLawFit fit_power_law(std::span<const std::pair<double, double>> points, int resamples = 10000,
                          std::uint64_t seed = 42);

double median(std::vector<double> xs);
double mean(std::span<const double> xs);
double sample_sd(std::span<const double> xs);

struct PlateauMeasure {
  bool defined = false;
  double plateau_nats = 0.0;
  double ratio = 0.0;
  std::int64_t window_lo = 0;
  std::int64_t window_hi = 0;
  int n_evals = 0;
  bool low_confidence = false;  // fewer than three evals in the window
  std::string note;
};

// Median eval loss over [end of initial descent, tau/2], where the descent
// ends at the first eval within 5% of ln K.
PlateauMeasure plateau_height(std::span<const MetricsRecord> stream, int fiber_size, const TauEstimate& tau);

// Displacement cosines split into the plateau window (as measured by
// plateau_height) and the transition window (tau/2, 2 tau].
struct DirectionWindows {
  std::optional<double> plateau_mean;
  int plateau_n = 0;
  std::optional<double> transition_max;
  int transition_n = 0;
};

DirectionWindows direction_windows(std::span<const DirectionConsistency> dc, const PlateauMeasure& plateau,
                                   const TauEstimate& tau);

// One run as seen by the fits: its x value (D, K, ...), metrics and the
// numbers needed to re-detect tau.
struct RunSeries {
  double x = 0.0;
  int fiber_size = 1;
  int batch_size = 128;
  MetricsStream metrics;
};

struct ThresholdRow {
  double alpha = 0.0;
  PowerLawFit fit;
  bool fit_ok = false;
  std::vector<std::int64_t> taus;  // per run, -1 when unconfirmed
};

// Re-detects tau at each alpha and refits tau against x, using the median
// tau per distinct x.
std::vector<ThresholdRow> threshold_sensitivity(std::span<const RunSeries> runs, std::span<const double> alphas,
                                                int resamples = 10000, std::uint64_t seed = 42);

struct CascadeSummary {
  std::vector<double> lead_fractions;
  double mean = 0.0;
  double sd = 0.0;
  int skipped = 0;  // runs without a confirmed tau or an onset
};

CascadeSummary cascade_timing(std::span<const RunSeries> runs, double alpha = 0.5);

struct TokenRow {
  int batch_size = 0;
  std::int64_t tau_steps = 0;
  std::int64_t tau_tokens = 0;
  double step_ratio = 0.0;   // vs the minimum tau_steps row
  double token_ratio = 0.0;  // vs the minimum tau_tokens row
};

std::vector<TokenRow> token_normalize(std::span<const std::pair<int, std::int64_t>> batch_and_tau);

// CSV with a header row; fields containing commas or quotes are quoted.
std::string csv_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);
std::string fmt(double x, int digits = 6);

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

// Loss curves with dashed horizontal guides (e.g. ln K per series).
std::string svg_loss_curves(const std::vector<Series>& curves, const std::vector<std::pair<std::string, double>>& guides,
                            const std::string& title);
// Log-log scatter with the fitted line y = exp(intercept) x^exponent.
std::string svg_loglog_fit(const Series& points, const PowerLawFit& fit, const std::string& title,
                           const std::string& x_label, const std::string& y_label);

}  // namespace plab
