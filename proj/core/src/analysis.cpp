#include "plab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "plab/rng.hpp"

namespace plab {

namespace {

struct Ols {
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
  bool ok = false;
};

Ols ols(std::span<const double> x, std::span<const double> y) {
  Ols o;
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0) return o;
  o.slope = sxy / sxx;
  o.intercept = my - o.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (o.intercept + o.slope * x[i]);
    ss_res += r * r;
  }
  o.r2 = syy > 0.0 ? std::clamp(1.0 - ss_res / syy, 0.0, 1.0) : 1.0;
  o.ok = true;
  return o;
}

// Linear-interpolated quantile of sorted data.
double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

PowerLawFit fit_power_law(std::span<const std::pair<double, double>> points, int resamples, std::uint64_t seed) {
  if (points.size() < 3) throw std::invalid_argument("fit_power_law: need at least 3 points");
  if (resamples < 1) throw std::invalid_argument("fit_power_law: resamples must be positive");
  std::vector<double> lx, ly;
  for (const auto& [x, y] : points) {
    if (!(x > 0.0) || !(y > 0.0)) throw std::invalid_argument("fit_power_law: coordinates must be positive");
    lx.push_back(std::log(x));
    ly.push_back(std::log(y));
  }
  const Ols base = ols(lx, ly);
  if (!base.ok) throw std::invalid_argument("fit_power_law: need two distinct x values");
  PowerLawFit fit;
  fit.exponent = base.slope;
  fit.intercept = base.intercept;
  fit.r2 = base.r2;
  fit.n_points = static_cast<int>(points.size());
  fit.bootstrap_resamples = resamples;

  Rng rng(seed, "bootstrap");
  const std::size_t n = points.size();
  std::vector<double> slopes;
  slopes.reserve(static_cast<std::size_t>(resamples));
  std::vector<double> bx(n), by(n);
  // Resamples with a single distinct x have no slope and are drawn again.
  for (int r = 0, attempts = 0; r < resamples && attempts < 100 * resamples; ++attempts) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(rng.below(n));
      bx[i] = lx[k];
      by[i] = ly[k];
    }
    const Ols o = ols(bx, by);
    if (!o.ok) continue;
    slopes.push_back(o.slope);
    ++r;
  }
  std::sort(slopes.begin(), slopes.end());
  fit.ci_lo = std::min(quantile(slopes, 0.025), fit.exponent);
  fit.ci_hi = std::max(quantile(slopes, 0.975), fit.exponent);
  return fit;
}

double median(std::vector<double> xs) {
  if (xs.empty()) throw std::invalid_argument("median of an empty set");
  std::sort(xs.begin(), xs.end());
  const std::size_t m = xs.size() / 2;
  return xs.size() % 2 ? xs[m] : 0.5 * (xs[m - 1] + xs[m]);
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean of an empty set");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_sd(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

PlateauMeasure plateau_height(std::span<const MetricsRecord> stream, int fiber_size, const TauEstimate& tau) {
  PlateauMeasure p;
  if (fiber_size <= 1) {
    p.note = "no plateau for a fiber of one";
    return p;
  }
  if (!tau.confirmed) {
    p.note = "tau not confirmed";
    return p;
  }
  const double ln_k = std::log(static_cast<double>(fiber_size));
  std::int64_t start = -1;
  for (const auto& r : stream) {
    if (std::abs(r.eval_loss - ln_k) <= 0.05 * ln_k) {
      start = r.step;
      break;
    }
  }
  if (start < 0 || 2 * start > tau.tau_steps) {
    p.note = start < 0 ? "loss never came within 5% of ln K" : "descent ended after tau/2";
    return p;
  }
  p.window_lo = start;
  p.window_hi = tau.tau_steps / 2;
  std::vector<double> xs;
  for (const auto& r : stream) {
    if (r.step >= p.window_lo && 2 * r.step <= tau.tau_steps) xs.push_back(r.eval_loss);
  }
  p.n_evals = static_cast<int>(xs.size());
  p.plateau_nats = median(xs);
  p.ratio = p.plateau_nats / ln_k;
  p.low_confidence = p.n_evals < 3;
  p.defined = true;
  return p;
}

std::vector<ThresholdRow> threshold_sensitivity(std::span<const RunSeries> runs, std::span<const double> alphas,
                                                int resamples, std::uint64_t seed) {
  std::vector<ThresholdRow> out;
  for (double alpha : alphas) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("threshold_sensitivity: alpha must lie in (0, 1)");
    ThresholdRow row;
    row.alpha = alpha;
    std::map<double, std::vector<double>> by_x;
    for (const auto& run : runs) {
      const TauEstimate t = detect_tau(run.metrics, run.fiber_size, alpha, run.batch_size);
      row.taus.push_back(t.confirmed ? t.tau_steps : -1);
      if (t.confirmed && t.tau_steps > 0) by_x[run.x].push_back(static_cast<double>(t.tau_steps));
    }
    std::vector<std::pair<double, double>> pts;
    for (auto& [x, ts] : by_x) pts.emplace_back(x, median(ts));
    if (pts.size() >= 3) {
      row.fit = fit_power_law(pts, resamples, seed);
      row.fit_ok = true;
    }
    out.push_back(std::move(row));
  }
  return out;
}

CascadeSummary cascade_timing(std::span<const RunSeries> runs, double alpha) {
  CascadeSummary s;
  for (const auto& run : runs) {
    const TauEstimate t = detect_tau(run.metrics, run.fiber_size, alpha, run.batch_size);
    const DeltaZOnset o = detect_delta_z_onset(run.metrics, t);
    if (!t.confirmed || t.tau_steps <= 0 || !o.found) {
      ++s.skipped;
      continue;
    }
    s.lead_fractions.push_back(o.lead_fraction);
  }
  if (!s.lead_fractions.empty()) {
    s.mean = mean(s.lead_fractions);
    s.sd = sample_sd(s.lead_fractions);
  }
  return s;
}

std::vector<TokenRow> token_normalize(std::span<const std::pair<int, std::int64_t>> batch_and_tau) {
  std::vector<TokenRow> rows;
  std::int64_t min_steps = std::numeric_limits<std::int64_t>::max();
  std::int64_t min_tok = std::numeric_limits<std::int64_t>::max();
  for (const auto& [b, tau] : batch_and_tau) {
    if (b < 1 || tau < 0) throw std::invalid_argument("token_normalize: needs positive batch and confirmed tau");
    TokenRow r;
    r.batch_size = b;
    r.tau_steps = tau;
    r.tau_tokens = tau * b;
    min_steps = std::min(min_steps, r.tau_steps);
    min_tok = std::min(min_tok, r.tau_tokens);
    rows.push_back(r);
  }
  for (auto& r : rows) {
    r.step_ratio = min_steps > 0 ? static_cast<double>(r.tau_steps) / static_cast<double>(min_steps) : 0.0;
    r.token_ratio = min_tok > 0 ? static_cast<double>(r.tau_tokens) / static_cast<double>(min_tok) : 0.0;
  }
  return rows;
}

std::string fmt(double x, int digits) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, x);
  return buf;
}

std::string csv_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  auto cell = [](const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  };
  std::string out;
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) out += ',';
      out += cell(r[i]);
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

// --- SVG ---------------------------------------------------------------------

namespace {

constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 160, kTop = 40, kBottom = 55;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight); }
  double py(double y) const { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); }
};

void pad(double& lo, double& hi) {
  if (hi <= lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double m = 0.05 * (hi - lo);
  lo -= m;
  hi += m;
}

void axes(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& xl,
          const std::string& yl, bool log_ticks) {
  os << "<rect x=\"0\" y=\"0\" width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    os << "<text x=\"" << fmt(f.px(xv), 5) << "\" y=\"" << kH - kBottom + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt(log_ticks ? std::exp(xv) : xv, 3) << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(f.py(yv) + 3, 5) << "\" text-anchor=\"end\" font-size=\"10\">"
       << fmt(log_ticks ? std::exp(yv) : yv, 3) << "</text>\n";
  }
  os << "<text x=\"" << (kLeft + kW - kRight) / 2 << "\" y=\"" << kH - 15 << "\" text-anchor=\"middle\" font-size=\"12\">"
     << esc(xl) << "</text>\n";
  os << "<text x=\"16\" y=\"" << (kTop + kH - kBottom) / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << (kTop + kH - kBottom) / 2 << ")\">" << esc(yl) << "</text>\n";
}

}  // namespace

std::string svg_loss_curves(const std::vector<Series>& curves, const std::vector<std::pair<std::string, double>>& guides,
                            const std::string& title) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = 0.0, y1 = -x0;
  for (const auto& c : curves) {
    for (const auto& [x, y] : c.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  for (const auto& g : guides) y1 = std::max(y1, g.second);
  if (!std::isfinite(x0)) {
    x0 = 0;
    x1 = 1;
    y1 = 1;
  }
  pad(x0, x1);
  pad(y0, y1);
  y0 = std::max(y0, 0.0);
  const Frame f{x0, x1, y0, y1};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
     << ' ' << kH << "\">\n";
  axes(os, f, title, "step", "eval loss (nats)", false);
  for (std::size_t i = 0; i < guides.size(); ++i) {
    const double y = f.py(guides[i].second);
    os << "<line x1=\"" << kLeft << "\" y1=\"" << fmt(y, 5) << "\" x2=\"" << kW - kRight << "\" y2=\"" << fmt(y, 5)
       << "\" stroke=\"" << kPalette[i % 10] << "\" stroke-dasharray=\"5,4\" stroke-width=\"1\"/>\n";
    os << "<text x=\"" << kW - kRight + 4 << "\" y=\"" << fmt(y + 3, 5) << "\" font-size=\"10\">" << esc(guides[i].first)
       << "</text>\n";
  }
  for (std::size_t i = 0; i < curves.size(); ++i) {
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 10] << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : curves[i].points) os << fmt(f.px(x), 5) << ',' << fmt(f.py(y), 5) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << kW - kRight + 4 << "\" y=\"" << kTop + 14 * static_cast<double>(i) << "\" font-size=\"11\" fill=\""
       << kPalette[i % 10] << "\">" << esc(curves[i].label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_loglog_fit(const Series& points, const PowerLawFit& fit, const std::string& title,
                           const std::string& x_label, const std::string& y_label) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& [x, y] : points.points) {
    if (x <= 0 || y <= 0) continue;
    x0 = std::min(x0, std::log(x));
    x1 = std::max(x1, std::log(x));
    y0 = std::min(y0, std::log(y));
    y1 = std::max(y1, std::log(y));
  }
  if (!std::isfinite(x0)) {
    x0 = 0;
    x1 = 1;
    y0 = 0;
    y1 = 1;
  }
  pad(x0, x1);
  pad(y0, y1);
  const Frame f{x0, x1, y0, y1};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
     << ' ' << kH << "\">\n";
  axes(os, f, title, x_label, y_label, true);
  for (const auto& [x, y] : points.points) {
    if (x <= 0 || y <= 0) continue;
    os << "<circle cx=\"" << fmt(f.px(std::log(x)), 5) << "\" cy=\"" << fmt(f.py(std::log(y)), 5)
       << "\" r=\"4\" fill=\"" << kPalette[0] << "\"/>\n";
  }
  if (fit.n_points > 0) {
    const double ya = fit.intercept + fit.exponent * x0, yb = fit.intercept + fit.exponent * x1;
    os << "<line x1=\"" << fmt(f.px(x0), 5) << "\" y1=\"" << fmt(f.py(ya), 5) << "\" x2=\"" << fmt(f.px(x1), 5)
       << "\" y2=\"" << fmt(f.py(yb), 5) << "\" stroke=\"" << kPalette[1] << "\" stroke-dasharray=\"6,4\"/>\n";
    os << "<text x=\"" << kW - kRight + 4 << "\" y=\"" << kTop + 14 << "\" font-size=\"11\">exponent "
       << fmt(fit.exponent, 3) << "</text>\n";
    os << "<text x=\"" << kW - kRight + 4 << "\" y=\"" << kTop + 28 << "\" font-size=\"11\">R2 " << fmt(fit.r2, 3)
       << "</text>\n";
  }
  os << "<text x=\"" << kW - kRight + 4 << "\" y=\"" << kTop << "\" font-size=\"11\">" << esc(points.label) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

DirectionWindows direction_windows(std::span<const DirectionConsistency> dc, const PlateauMeasure& plateau,
                                   const TauEstimate& tau) {
  DirectionWindows w;
  double sum = 0.0;
  for (const auto& d : dc) {
    if (!d.cosine) continue;
    if (plateau.defined && d.step >= plateau.window_lo && d.step <= plateau.window_hi) {
      sum += *d.cosine;
      ++w.plateau_n;
    }
    if (tau.confirmed && 2 * d.step > tau.tau_steps && d.step <= 2 * tau.tau_steps) {
      ++w.transition_n;
      if (!w.transition_max || *d.cosine > *w.transition_max) w.transition_max = *d.cosine;
    }
  }
  if (w.plateau_n > 0) w.plateau_mean = sum / w.plateau_n;
  return w;
}

}  // namespace plab
