#include "plab/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "plab/io.hpp"

namespace plab {

namespace fs = std::filesystem;

namespace {

int fiber_of(const RunRecord& r) { return r.hierarchy ? r.hierarchy->fiber_size() : r.task.K; }
double d_of(const RunRecord& r) {
  return r.hierarchy ? static_cast<double>(r.hierarchy->D()) : static_cast<double>(r.task.D());
}

std::string opt_str(const std::optional<double>& x) { return x ? fmt(*x) : ""; }
std::string opt_str(const std::optional<std::int64_t>& x) { return x ? std::to_string(*x) : ""; }

struct Group {
  std::vector<double> taus;
  int n_runs = 0;
};

// Median-tau points keyed by x, from runs with a confirmed tau.
std::map<double, Group> group_taus(const std::vector<RunSummary>& runs, double (*x_of)(const RunSummary&)) {
  std::map<double, Group> g;
  for (const auto& r : runs) {
    auto& grp = g[x_of(r)];
    ++grp.n_runs;
    if (r.tau.confirmed && r.tau.tau_steps > 0) grp.taus.push_back(static_cast<double>(r.tau.tau_steps));
  }
  return g;
}

std::string scaling_table(const std::vector<RunSummary>& runs, double (*x_of)(const RunSummary&), const char* x_name,
                          int resamples, std::uint64_t seed) {
  const auto groups = group_taus(runs, x_of);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::pair<double, double>> pts;
  for (const auto& [x, g] : groups) {
    std::vector<std::string> row{"point", fmt(x), std::to_string(g.n_runs), std::to_string(g.taus.size())};
    if (g.taus.empty()) {
      row.insert(row.end(), {"", "", ""});
    } else {
      const double med = median(g.taus);
      pts.emplace_back(x, med);
      row.insert(row.end(), {fmt(med), fmt(mean(g.taus)), fmt(sample_sd(g.taus))});
    }
    row.insert(row.end(), {"", "", "", ""});
    rows.push_back(row);
  }
  if (pts.size() >= 3) {
    const PowerLawFit f = fit_power_law(pts, resamples, seed);
    rows.push_back({"fit", "", std::to_string(f.n_points), "", "", "", "", fmt(f.exponent), fmt(f.ci_lo), fmt(f.ci_hi),
                    fmt(f.r2)});
  } else {
    rows.push_back({"fit", "", std::to_string(pts.size()), "", "", "", "", "", "", "", ""});
  }
  return csv_table({"kind", x_name, "n_runs", "n_confirmed", "median_tau", "mean_tau", "sd_tau", "exponent", "ci_lo",
                    "ci_hi", "r2"},
                   rows);
}

double x_d(const RunSummary& r) { return d_of(r.record); }
double x_k(const RunSummary& r) { return static_cast<double>(r.fiber_size); }

std::string runs_table(const std::vector<RunSummary>& runs) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : runs) {
    const auto& r = s.record;
    rows.push_back({s.entry.id, s.entry.label, std::to_string(s.entry.seed), s.entry.status,
                    std::string(to_string(r.arch.family)), std::to_string(r.hierarchy ? r.hierarchy->n_b : r.task.n_b),
                    std::to_string(s.fiber_size), fmt(d_of(r)), fmt(r.task.noise_rate), std::to_string(r.task.len_z),
                    fmt(r.config.lr), std::to_string(r.config.batch_size),
                    s.tau.confirmed ? std::to_string(s.tau.tau_steps) : "",
                    s.tau.confirmed ? std::to_string(s.tau.tau_tokens) : "",
                    s.plateau.defined ? fmt(s.plateau.plateau_nats) : "", s.plateau.defined ? fmt(s.plateau.ratio) : "",
                    s.onset.found ? std::to_string(s.onset.onset_step) : "",
                    s.onset.found && s.tau.confirmed ? fmt(s.onset.lead_fraction) : "", std::to_string(r.steps_run),
                    r.metrics.empty() ? "" : fmt(r.metrics.back().eval_loss)});
  }
  return csv_table({"id", "label", "seed", "status", "family", "n_b", "K", "D", "noise", "len_z", "lr", "batch_size",
                    "tau_steps", "tau_tokens", "plateau_nats", "plateau_ratio", "dz_onset", "lead_fraction",
                    "steps_run", "final_loss"},
                   rows);
}

std::string plateau_table(const std::vector<RunSummary>& runs) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : runs) {
    rows.push_back({s.entry.id, std::to_string(s.fiber_size), fmt(std::log(static_cast<double>(s.fiber_size))),
                    s.plateau.defined ? "true" : "false", s.plateau.defined ? fmt(s.plateau.plateau_nats) : "",
                    s.plateau.defined ? fmt(s.plateau.ratio) : "",
                    s.plateau.defined ? std::to_string(s.plateau.window_lo) : "",
                    s.plateau.defined ? std::to_string(s.plateau.window_hi) : "", std::to_string(s.plateau.n_evals),
                    s.plateau.low_confidence ? "true" : "false", s.plateau.note});
  }
  return csv_table({"id", "K", "ln_K", "defined", "plateau_nats", "ratio", "window_lo", "window_hi", "n_evals",
                    "low_confidence", "note"},
                   rows);
}

// Median tau per value of a run attribute, with token normalisation.
template <typename F>
std::string tau_by(const std::vector<RunSummary>& runs, const char* name, F key) {
  std::map<double, std::vector<double>> taus;
  std::map<double, int> batch;
  for (const auto& s : runs) {
    auto& t = taus[key(s)];
    batch[key(s)] = s.record.config.batch_size;
    if (s.tau.confirmed) t.push_back(static_cast<double>(s.tau.tau_steps));
  }
  double min_tok = 0.0;
  for (const auto& [k, t] : taus) {
    if (t.empty()) continue;
    const double tok = median(t) * batch[k];
    if (min_tok == 0.0 || tok < min_tok) min_tok = tok;
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& [k, t] : taus) {
    if (t.empty()) {
      rows.push_back({fmt(k), "0", "", "", ""});
      continue;
    }
    const double med = median(t);
    const double tok = med * batch[k];
    rows.push_back({fmt(k), std::to_string(t.size()), fmt(med), fmt(tok), min_tok > 0 ? fmt(tok / min_tok) : ""});
  }
  return csv_table({name, "n_confirmed", "median_tau_steps", "median_tau_tokens", "token_ratio"}, rows);
}

std::string token_table(const std::vector<RunSummary>& runs) {
  std::map<int, std::vector<double>> taus;
  for (const auto& s : runs) {
    if (s.tau.confirmed) taus[s.record.config.batch_size].push_back(static_cast<double>(s.tau.tau_steps));
  }
  std::vector<std::pair<int, std::int64_t>> pts;
  for (const auto& [b, t] : taus) pts.emplace_back(b, static_cast<std::int64_t>(std::llround(median(t))));
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : token_normalize(pts)) {
    rows.push_back({std::to_string(r.batch_size), std::to_string(r.tau_steps), std::to_string(r.tau_tokens),
                    fmt(r.step_ratio), fmt(r.token_ratio)});
  }
  return csv_table({"batch_size", "tau_steps", "tau_tokens", "step_ratio", "token_ratio"}, rows);
}

std::vector<RunSeries> series_of(const std::vector<RunSummary>& runs, double (*x_of)(const RunSummary&)) {
  std::vector<RunSeries> out;
  for (const auto& s : runs) out.push_back({x_of(s), s.fiber_size, s.record.config.batch_size, s.record.metrics});
  return out;
}

std::string threshold_table(const std::vector<RunSummary>& runs, int resamples, std::uint64_t seed) {
  const auto series = series_of(runs, x_d);
  const std::vector<double> alphas{0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : threshold_sensitivity(series, alphas, resamples, seed)) {
    int n = 0;
    for (auto x : t.taus) n += x >= 0 ? 1 : 0;
    rows.push_back({fmt(t.alpha), t.fit_ok ? fmt(t.fit.exponent) : "", t.fit_ok ? fmt(t.fit.ci_lo) : "",
                    t.fit_ok ? fmt(t.fit.ci_hi) : "", t.fit_ok ? fmt(t.fit.r2) : "", std::to_string(n)});
  }
  return csv_table({"alpha", "exponent", "ci_lo", "ci_hi", "r2", "n_confirmed"}, rows);
}

std::string cascade_table(const std::vector<RunSummary>& runs, double alpha) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : runs) {
    rows.push_back({"run", s.entry.id, s.onset.found ? std::to_string(s.onset.onset_step) : "",
                    s.tau.confirmed ? std::to_string(s.tau.tau_steps) : "",
                    s.onset.found && s.tau.confirmed ? fmt(s.onset.lead_fraction) : ""});
  }
  const CascadeSummary c = cascade_timing(series_of(runs, x_d), alpha);
  rows.push_back({"summary", std::to_string(c.lead_fractions.size()) + " runs", "", "",
                  c.lead_fractions.empty() ? "" : fmt(c.mean) + " +- " + fmt(c.sd)});
  return csv_table({"kind", "id", "dz_onset", "tau_steps", "lead_fraction"}, rows);
}

std::string boundary_table(const fs::path& dir, int resamples, std::uint64_t seed) {
  const PhaseBoundaryResult pb = phase_boundary(boundary_observations(dir), resamples, seed);
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : pb.rows) {
    rows.push_back({"row", std::to_string(r.K), opt_str(r.max_all_succeed), opt_str(r.min_any_fail),
                    opt_str(r.eta_star), r.open_above ? "true" : "false", r.undefined ? "true" : "false",
                    r.monotonicity_violation ? "true" : "false", "", ""});
  }
  if (pb.fit) {
    rows.push_back({"fit", "", "", "", "", "", "", "", fmt(-pb.fit->exponent), fmt(pb.fit->r2)});
  }
  return csv_table({"kind", "K", "max_all_succeed", "min_any_fail", "eta_star", "open_above", "undefined",
                    "monotonicity_violation", "b", "r2"},
                   rows);
}

std::string asymmetry_table(const fs::path& dir, double alpha) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& e : read_manifest(dir)) {
    const fs::path rd = dir / e.dir;
    if (!run_is_complete(rd / "pretrain") || !run_is_complete(rd / "scratch")) continue;
    TransferResult t;
    t.pretrain = load_run(rd / "pretrain");
    t.scratch = load_run(rd / "scratch");
    if (run_is_complete(rd / "finetune")) t.finetune = load_run(rd / "finetune");
    const int K = t.scratch.task.K;
    const TauEstimate ft = detect_tau(t.finetune.metrics, K, alpha, t.finetune.config.batch_size);
    const TauEstimate sc = detect_tau(t.scratch.metrics, K, alpha, t.scratch.config.batch_size);
    if (ft.confirmed && sc.confirmed && ft.tau_steps > 0) {
      t.ratio = static_cast<double>(sc.tau_steps) / static_cast<double>(ft.tau_steps);
      t.ratio_defined = true;
    }
    const AsymmetryRow r = asymmetry_row(K, t, alpha);
    rows.push_back({e.id, std::to_string(K), std::to_string(e.seed), opt_str(r.tau_fwd), opt_str(r.tau_bwd),
                    opt_str(r.ratio), opt_str(r.transfer_ratio)});
  }
  return csv_table({"id", "K", "seed", "tau_fwd", "tau_bwd", "ratio", "transfer_ratio"}, rows);
}

std::string multiseed_table(const std::vector<RunSummary>& runs) {
  std::map<std::tuple<double, int, double>, std::vector<double>> g;
  for (const auto& s : runs) {
    auto& v = g[{d_of(s.record), s.fiber_size, s.record.config.lr}];
    if (s.tau.confirmed) v.push_back(static_cast<double>(s.tau.tau_steps));
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& [k, v] : g) {
    const auto& [D, K, lr] = k;
    if (v.empty()) {
      rows.push_back({fmt(D), std::to_string(K), fmt(lr), "0", "", "", "", ""});
      continue;
    }
    const double m = mean(v), sd = sample_sd(v);
    rows.push_back({fmt(D), std::to_string(K), fmt(lr), std::to_string(v.size()), fmt(m), fmt(sd),
                    m > 0 ? fmt(sd / m) : "", fmt(median(v))});
  }
  return csv_table({"D", "K", "lr", "n_confirmed", "mean_tau", "sd_tau", "cv", "median_tau"}, rows);
}

std::string arch_table(const std::vector<RunSummary>& runs, int resamples, std::uint64_t seed) {
  std::map<std::string, std::vector<RunSummary>> by;
  for (const auto& s : runs) by[std::string(to_string(s.record.arch.family))].push_back(s);
  std::vector<std::vector<std::string>> rows;
  for (const auto& [fam, rs] : by) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& [x, g] : group_taus(rs, x_d)) {
      if (!g.taus.empty()) pts.emplace_back(x, median(g.taus));
    }
    double min_dz = 0.0;
    int stuck = 0;
    for (const auto& s : rs) {
      if (!s.tau.confirmed) ++stuck;
      for (const auto& m : s.record.metrics) min_dz = std::max(min_dz, m.delta_z);
    }
    if (pts.size() >= 3) {
      const PowerLawFit f = fit_power_law(pts, resamples, seed);
      rows.push_back({fam, std::to_string(rs.size()), std::to_string(stuck), fmt(f.exponent), fmt(f.r2), fmt(min_dz)});
    } else {
      rows.push_back({fam, std::to_string(rs.size()), std::to_string(stuck), "", "", fmt(min_dz)});
    }
  }
  return csv_table({"family", "n_runs", "n_unconfirmed", "exponent", "r2", "max_delta_z"}, rows);
}

std::string dissipation_table(const std::vector<RunSummary>& runs) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : runs) {
    if (!s.tau.confirmed) {
      rows.push_back({s.entry.id, std::to_string(s.fiber_size), fmt(s.record.config.lr), "", "", "", "true"});
      continue;
    }
    const DissipationResult d = dissipation(s.record.metrics, s.tau.tau_steps, s.record.config.lr);
    rows.push_back({s.entry.id, std::to_string(s.fiber_size), fmt(s.record.config.lr), fmt(d.Q),
                    std::to_string(d.window_lo), std::to_string(d.window_hi), d.partial ? "true" : "false"});
  }
  return csv_table({"id", "K", "lr", "Q", "window_lo", "window_hi", "partial"}, rows);
}

std::string hierarchical_table(const std::vector<RunSummary>& runs) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& s : runs) {
    if (!s.record.hierarchy) continue;
    const auto& h = *s.record.hierarchy;
    // Evals sitting within 10% of ln K2 before tau would mark an intermediate plateau.
    const double mid = h.intermediate_benchmark();
    int near_mid = 0;
    for (const auto& m : s.record.metrics) {
      if (s.tau.confirmed && m.step >= s.tau.tau_steps) break;
      if (std::abs(m.eval_loss - mid) <= 0.1 * mid) ++near_mid;
    }
    rows.push_back({s.entry.id, std::to_string(h.K1), std::to_string(h.K2), fmt(h.plateau_benchmark()), fmt(mid),
                    s.plateau.defined ? fmt(s.plateau.plateau_nats) : "",
                    s.tau.confirmed ? std::to_string(s.tau.tau_steps) : "", std::to_string(near_mid)});
  }
  return csv_table({"id", "K1", "K2", "ln_K1K2", "ln_K2", "plateau_nats", "tau_steps", "evals_near_ln_K2"}, rows);
}

}  // namespace

RunSummary summarize_run(const RunRecord& rec, double alpha) {
  RunSummary s;
  s.record = rec;
  s.fiber_size = fiber_of(rec);
  s.tau = detect_tau(rec.metrics, s.fiber_size, alpha, rec.config.batch_size);
  s.plateau = plateau_height(rec.metrics, s.fiber_size, s.tau);
  s.onset = detect_delta_z_onset(rec.metrics, s.tau);
  return s;
}

std::vector<RunSummary> load_sweep(const fs::path& sweep_dir, double alpha) {
  std::vector<RunSummary> out;
  for (const auto& e : read_manifest(sweep_dir)) {
    fs::path rd = sweep_dir / e.dir;
    if (!run_is_complete(rd) && run_is_complete(rd / "scratch")) rd /= "scratch";
    if (!run_is_complete(rd)) continue;
    RunSummary s = summarize_run(load_run(rd), alpha);
    s.entry = e;
    out.push_back(std::move(s));
  }
  return out;
}

const std::vector<std::string>& report_tables() {
  static const std::vector<std::string> names{
      "runs",      "d-scaling", "k-independence", "token-norm", "lr",          "noise",       "selector",  "plateau",
      "threshold", "cascade",   "boundary",       "asymmetry",  "multi-seed",  "arch",        "dissipation",
      "hierarchical"};
  return names;
}

std::vector<std::string> default_tables(SweepFamily family) {
  switch (family) {
    case SweepFamily::d_sweep: return {"runs", "d-scaling", "plateau", "threshold", "cascade", "dissipation"};
    case SweepFamily::fixed_d_control: return {"runs", "k-independence", "plateau"};
    case SweepFamily::batch_sweep: return {"runs", "token-norm"};
    case SweepFamily::lr_sweep: return {"runs", "lr", "dissipation"};
    case SweepFamily::noise_sweep: return {"runs", "noise"};
    case SweepFamily::selector_sweep: return {"runs", "selector", "plateau"};
    case SweepFamily::arch_sweep: return {"runs", "arch"};
    case SweepFamily::phase_boundary: return {"runs", "boundary"};
    case SweepFamily::asymmetry: return {"runs", "asymmetry"};
    case SweepFamily::hierarchical: return {"runs", "hierarchical"};
    case SweepFamily::multi_seed: return {"runs", "multi-seed", "d-scaling"};
  }
  return {"runs"};
}

std::string report_csv(const fs::path& dir, const std::string& table, double alpha, int resamples, std::uint64_t seed) {
  if (table == "boundary") return boundary_table(dir, resamples, seed);
  if (table == "asymmetry") return asymmetry_table(dir, alpha);
  const auto runs = load_sweep(dir, alpha);
  if (table == "runs") return runs_table(runs);
  if (table == "d-scaling") return scaling_table(runs, x_d, "D", resamples, seed);
  if (table == "k-independence") return scaling_table(runs, x_k, "K", resamples, seed);
  if (table == "token-norm") return token_table(runs);
  if (table == "lr") return tau_by(runs, "lr", [](const RunSummary& s) { return s.record.config.lr; });
  if (table == "noise") return tau_by(runs, "noise", [](const RunSummary& s) { return s.record.task.noise_rate; });
  if (table == "selector") {
    return tau_by(runs, "len_z", [](const RunSummary& s) { return static_cast<double>(s.record.task.len_z); });
  }
  if (table == "plateau") return plateau_table(runs);
  if (table == "threshold") return threshold_table(runs, resamples, seed);
  if (table == "cascade") return cascade_table(runs, alpha);
  if (table == "multi-seed") return multiseed_table(runs);
  if (table == "arch") return arch_table(runs, resamples, seed);
  if (table == "dissipation") return dissipation_table(runs);
  if (table == "hierarchical") return hierarchical_table(runs);
  throw std::invalid_argument("unknown table '" + table + "'");
}

std::vector<fs::path> write_reports(const fs::path& dir, const std::vector<std::string>& tables, double alpha,
                                    int resamples, std::uint64_t seed) {
  std::vector<fs::path> written;
  const fs::path out = dir / "reports";
  fs::create_directories(out);
  for (const auto& t : tables) {
    const fs::path p = out / (t + ".csv");
    write_file_atomic(p, report_csv(dir, t, alpha, resamples, seed));
    written.push_back(p);
  }

  const auto runs = load_sweep(dir, alpha);
  std::vector<Series> curves;
  std::map<int, bool> ks;
  for (const auto& s : runs) {
    Series c;
    c.label = s.entry.id;
    for (const auto& m : s.record.metrics) c.points.emplace_back(static_cast<double>(m.step), m.eval_loss);
    curves.push_back(std::move(c));
    ks[s.fiber_size] = true;
  }
  std::vector<std::pair<std::string, double>> guides;
  for (const auto& [k, _] : ks) {
    if (k > 1) guides.emplace_back("ln " + std::to_string(k), std::log(static_cast<double>(k)));
  }
  const fs::path curves_path = out / "loss_curves.svg";
  write_file_atomic(curves_path, svg_loss_curves(curves, guides, "eval loss"));
  written.push_back(curves_path);

  for (const auto& [table, x_of, name] :
       {std::tuple{"d-scaling", &x_d, "D"}, std::tuple{"k-independence", &x_k, "K"}}) {
    if (std::find(tables.begin(), tables.end(), table) == tables.end()) continue;
    Series pts;
    pts.label = std::string("median tau vs ") + name;
    for (const auto& [x, g] : group_taus(runs, x_of)) {
      if (!g.taus.empty()) pts.points.emplace_back(x, median(g.taus));
    }
    PowerLawFit f;
    if (pts.points.size() >= 3) f = fit_power_law(pts.points, resamples, seed);
    const fs::path p = out / (std::string(table) + ".svg");
    write_file_atomic(p, svg_loglog_fit(pts, f, std::string("tau vs ") + name, name, "tau (steps)"));
    written.push_back(p);
  }
  return written;
}

std::string run_summary_text(const RunRecord& rec, double alpha) {
  const RunSummary s = summarize_run(rec, alpha);
  std::ostringstream os;
  os << "status        " << to_string(rec.status) << (rec.failure.empty() ? "" : " (" + rec.failure + ")") << "\n";
  os << "steps         " << rec.steps_run << "\n";
  os << "K             " << s.fiber_size << "  ln K = " << fmt(std::log(static_cast<double>(s.fiber_size)), 4)
     << "\n";
  if (!rec.metrics.empty()) os << "final loss    " << fmt(rec.metrics.back().eval_loss, 4) << "\n";
  if (s.tau.confirmed) {
    os << "tau           " << s.tau.tau_steps << " steps, " << s.tau.tau_tokens << " tokens (alpha " << alpha << ")\n";
  } else {
    os << "tau           unconfirmed\n";
  }
  if (s.plateau.defined) {
    os << "plateau       " << fmt(s.plateau.plateau_nats, 4) << " nats, ratio " << fmt(s.plateau.ratio, 4)
       << " over [" << s.plateau.window_lo << ", " << s.plateau.window_hi << "]"
       << (s.plateau.low_confidence ? " (low confidence)" : "") << "\n";
  } else {
    os << "plateau       undefined (" << s.plateau.note << ")\n";
  }
  if (s.onset.found) {
    os << "dz onset      " << s.onset.onset_step;
    if (s.tau.confirmed) os << ", lead fraction " << fmt(s.onset.lead_fraction, 3);
    os << "\n";
  } else {
    os << "dz onset      none\n";
  }
  os << "wall clock    " << fmt(rec.wall_clock_s, 4) << " s\n";
  return os.str();
}

}  // namespace plab
