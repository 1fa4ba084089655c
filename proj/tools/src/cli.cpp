#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"
#include "plab/analysis.hpp"
#include "plab/io.hpp"
#include "plab/optim.hpp"
#include "plab/probes.hpp"
#include "plab/records.hpp"
#include "plab/report.hpp"
#include "plab/rng.hpp"
#include "plab/sweeps.hpp"
#include "plab/taskgen.hpp"

namespace plab::cli {

namespace fs = std::filesystem;

namespace {

// A run or probe that executed but did not produce a usable result.
struct RunFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TaskFlags {
  TaskSpec task;
  int k2 = 0;
  std::string direction = "backward";
};

void add_task_flags(CLI::App* c, TaskFlags& t) {
  c->add_option("--nb", t.task.n_b, "number of base strings B");
  c->add_option("--k", t.task.K, "fiber size K (K1 for hierarchical tasks)");
  c->add_option("--len-b", t.task.len_b, "characters per base string");
  c->add_option("--len-a", t.task.len_a, "characters per target");
  c->add_option("--len-z", t.task.len_z, "characters per selector");
  c->add_option("--noise", t.task.noise_rate, "label noise rate in [0, 1)");
  c->add_option("--direction", t.direction, "backward (B,z -> A) or forward (A,z -> B)")
      ->check(CLI::IsMember({"backward", "forward"}));
  c->add_option("--k2", t.k2, "second selector level; > 0 makes the task hierarchical with K1 = --k");
}

Dataset build_dataset(TaskFlags t, std::uint64_t seed) {
  t.task.seed = seed;
  t.task.direction = direction_from_string(t.direction);
  if (t.k2 > 0) {
    if (t.task.noise_rate != 0.0 || t.task.direction != Direction::backward) {
      throw std::invalid_argument("hierarchical tasks support neither --noise nor --direction forward");
    }
    HierarchicalTaskSpec h;
    h.n_b = t.task.n_b;
    h.K1 = t.task.K;
    h.K2 = t.k2;
    h.len_b = t.task.len_b;
    h.len_a = t.task.len_a;
    h.len_z1 = t.task.len_z;
    h.len_z2 = t.task.len_z;
    h.seed = seed;
    return generate_hierarchical(h);
  }
  return generate(t.task);
}

Dataset dataset_of(const RunRecord& rec) {
  return rec.hierarchy ? generate_hierarchical(*rec.hierarchy) : generate(rec.task);
}

int fiber_of(const RunRecord& rec) { return rec.hierarchy ? rec.hierarchy->fiber_size() : rec.task.K; }

bool is_integer(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

std::string join_events(const RunRecord& rec) {
  std::string s;
  for (const auto& [k, v] : rec.events) s += (s.empty() ? "" : ", ") + k + "=" + std::to_string(v);
  return s.empty() ? "none" : s;
}

// Integer steps, event names, and the aliases plateau (tau_half) and
// converged (final).
std::int64_t resolve_step(const RunRecord& rec, const std::string& s) {
  if (is_integer(s)) return std::stoll(s);
  std::string name = s;
  if (name == "plateau") name = "tau_half";
  if (name == "converged") name = "final";
  const auto it = rec.events.find(name);
  if (it == rec.events.end()) {
    throw RunFailure("run has no '" + s + "' event (events: " + join_events(rec) + ")");
  }
  return it->second;
}

ModelState checkpoint_at(const fs::path& run_dir, const RunRecord& rec, std::int64_t step) {
  const auto it = rec.checkpoint_paths.find(step);
  if (it == rec.checkpoint_paths.end()) {
    std::string avail;
    for (const auto& [k, _] : rec.checkpoint_paths) avail += (avail.empty() ? "" : ", ") + std::to_string(k);
    throw RunFailure("no checkpoint at step " + std::to_string(step) + " (available: " +
                     (avail.empty() ? "none" : avail) + ")");
  }
  return load_checkpoint(run_dir / it->second);
}

void require_run_dir(const fs::path& dir) {
  if (!fs::exists(dir)) throw std::invalid_argument("run directory not found: " + dir.string());
  if (!run_is_complete(dir)) throw std::invalid_argument("not a finished run directory: " + dir.string());
}

// ---- gen -------------------------------------------------------------------

struct GenArgs {
  TaskFlags task;
  std::uint64_t seed = 42;
  std::string out;
  bool resume = false;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  const Dataset ds = build_dataset(a.task, a.seed);
  std::ostringstream text;
  write_dataset(text, ds);
  if (a.out == "-") {
    out << text.str();
    return kOk;
  }
  fs::path path = a.out;
  if (path.empty()) {
    path = fs::path(default_output_root()) / "datasets" /
           ("nb" + std::to_string(a.task.task.n_b) + "_k" + std::to_string(a.task.task.K) +
            (a.task.k2 > 0 ? "x" + std::to_string(a.task.k2) : "") + "_s" + std::to_string(a.seed) + ".tsv");
  }
  const std::string body = text.str();
  if (a.resume && fs::exists(path) && read_file(path) == body) {
    out << "unchanged " << path.string() << "\n";
  } else {
    write_file_atomic(path, body);
    out << "wrote " << path.string() << "\n";
  }
  out << "examples " << ds.size() << "\nfnv1a64 " << hex64(fnv1a64(body)) << "\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  TaskFlags task;
  ArchDescriptor arch;
  std::string family = "transformer";
  TrainConfig cfg;
  ProbeSchedule probes;
  bool no_tau_events = false;
  std::string init;
  std::string run;
  bool resume = false;
  bool quiet = false;
};

void add_train_flags(CLI::App* c, TrainArgs& a) {
  add_task_flags(c, a.task);
  c->add_option("--arch", a.family, "transformer | gated_mlp | rnn | linear")
      ->check(CLI::IsMember({"transformer", "gated_mlp", "rnn", "linear"}));
  c->add_option("--layers", a.arch.n_layers);
  c->add_option("--d-model", a.arch.d_model);
  c->add_option("--heads", a.arch.n_heads);
  c->add_option("--d-mlp", a.arch.d_mlp);
  c->add_option("--lr", a.cfg.lr, "peak learning rate");
  c->add_option("--batch", a.cfg.batch_size);
  c->add_option("--steps", a.cfg.max_steps, "maximum optimizer steps");
  c->add_option("--warmup", a.cfg.warmup_steps);
  c->add_option("--wd", a.cfg.weight_decay, "AdamW weight decay");
  c->add_option("--eval-every", a.cfg.eval_every);
  c->add_option("--checkpoint-every", a.cfg.checkpoint_every, "0 keeps only event checkpoints");
  c->add_option("--alpha", a.probes.alpha, "tau threshold as a fraction of ln K");
  c->add_option("--stop-after-tau", a.probes.stop_after_tau, "stop at this multiple of tau (0 disables)");
  c->add_option("--early-stop-loss", a.probes.early_stop_loss);
  c->add_option("--early-stop-evals", a.probes.early_stop_evals);
  c->add_option("--direction-every", a.probes.direction_every, "displacement cosine cadence (0 disables)");
  c->add_flag("--no-tau-events", a.no_tau_events, "do not keep checkpoints at tau/2, tau, 1.5 tau, 2 tau");
  c->add_option("--init", a.init, "start from a checkpoint file or a finished run directory");
}

ModelState load_init(const std::string& path) {
  const fs::path p(path);
  if (fs::is_directory(p)) {
    const RunRecord rec = load_run(p, true);
    if (rec.final_model.params.empty()) throw std::invalid_argument("run has no final checkpoint: " + path);
    return rec.final_model;
  }
  if (!fs::exists(p)) throw std::invalid_argument("init checkpoint not found: " + path);
  return load_checkpoint(p);
}

int report_status(const RunRecord& rec, std::ostream& out, double alpha) {
  out << run_summary_text(rec, alpha);
  return rec.status == RunStatus::failed ? kRunFailure : kOk;
}

int cmd_train(TrainArgs a, std::uint64_t seed, std::ostream& out) {
  a.arch.family = family_from_string(a.family);
  a.cfg.seed = seed;
  a.probes.tau_events = !a.no_tau_events;
  const Dataset ds = build_dataset(a.task, seed);
  a.arch.max_seq_len = std::max(a.arch.max_seq_len, ds.seq_len());

  fs::path dir = a.run;
  if (dir.empty()) {
    dir = fs::path(default_output_root()) / "runs" /
          ("train_nb" + std::to_string(a.task.task.n_b) + "_k" + std::to_string(a.task.task.K) + "_s" +
           std::to_string(seed));
  }
  if (run_is_complete(dir)) {
    if (!a.resume) {
      throw std::invalid_argument("run directory already holds a finished run: " + dir.string() +
                                  " (pass --resume to reuse it)");
    }
    out << "complete " << dir.string() << "\n";
    return report_status(load_run(dir), out, a.probes.alpha);
  }
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!a.resume || !fs::exists(dir / "config.json")) {
      throw std::invalid_argument("run directory exists and is not empty: " + dir.string());
    }
    fs::remove_all(dir);  // an interrupted run restarts from step 0
  }

  std::optional<ModelState> initial;
  if (!a.init.empty()) initial = load_init(a.init);
  RunOptions opts;
  opts.run_dir = dir;
  if (initial) opts.initial = &*initial;
  if (!a.quiet) {
    opts.on_eval = [&out](const MetricsRecord& m) {
      out << "step " << m.step << "  train " << fmt(m.train_loss, 4) << "  eval " << fmt(m.eval_loss, 4)
          << "  dz " << fmt(m.delta_z, 3) << "  |g| " << fmt(m.grad_norm, 3) << "\n"
          << std::flush;
    };
  }
  const RunRecord rec = train(ds, a.arch, a.cfg, a.probes, opts);
  out << "run " << dir.string() << "\n";
  return report_status(rec, out, a.probes.alpha);
}

// ---- sweep -----------------------------------------------------------------

struct SweepArgs {
  std::string plan;
  std::string family;
  bool full = false;
  std::string out;
  int parallelism = 1;
  bool resume = false;
  bool dump_plan = false;
  bool no_report = false;
  double alpha = 0.5;
};

void write_sweep_reports(const fs::path& dir, SweepFamily family, double alpha, std::uint64_t seed,
                         std::ostream& out, std::ostream& err) {
  for (const auto& t : default_tables(family)) {
    try {
      for (const auto& p : write_reports(dir, {t}, alpha, 10000, seed)) {
        if (p.extension() == ".csv") out << "report " << p.string() << "\n";
      }
    } catch (const std::exception& e) {
      err << "report " << t << " skipped: " << e.what() << "\n";
    }
  }
}

int cmd_sweep(const SweepArgs& a, const std::vector<std::uint64_t>& seeds, std::ostream& out, std::ostream& err) {
  if (a.plan.empty() == a.family.empty()) throw std::invalid_argument("give either a plan file or --family");
  SweepPlan plan = a.plan.empty() ? default_plan(sweep_family_from_string(a.family), a.full) : load_plan(a.plan);
  if (!seeds.empty()) plan.seeds = seeds;
  if (a.dump_plan) {
    out << plan_to_text(plan);
    return kOk;
  }
  const fs::path dir = a.out.empty() ? fs::path(default_output_root()) / "sweeps" / plan.name : fs::path(a.out);
  if (!a.resume && fs::exists(dir / "manifest.json")) {
    throw std::invalid_argument("sweep directory already exists: " + dir.string() + " (pass --resume)");
  }
  const SweepResult res = run_sweep(plan, dir, a.parallelism, a.resume);
  int errors = 0;
  for (const auto& e : res.entries) {
    out << e.id << "  " << e.status << (e.message.empty() ? "" : "  " + e.message) << "\n";
    errors += e.status == "error" ? 1 : 0;
  }
  out << "sweep " << dir.string() << "  runs " << res.entries.size() << "  trained " << res.trained << "\n";
  if (!a.no_report) write_sweep_reports(dir, plan.family, a.alpha, seeds.empty() ? 42 : seeds.front(), out, err);
  if (errors > 0) {
    err << errors << " run(s) raised errors; see manifest.json\n";
    return kRunFailure;
  }
  return kOk;
}

// ---- probe -----------------------------------------------------------------

struct ProbeArgs {
  std::string name;
  std::string run;
  std::string step;
  std::string phase;
  double alpha = 0.5;
  int iters = 50;
  int probe_batch = 512;
  int groups = 50;
  double eta = 0.0;
  bool resume = false;
};

nlohmann::ordered_json J(const std::string& s) { return nlohmann::ordered_json::parse(s); }

Phase infer_phase(const RunRecord& rec, std::int64_t step, double alpha) {
  const TauEstimate tau = detect_tau(rec.metrics, fiber_of(rec), alpha, rec.config.batch_size);
  if (!tau.confirmed) return Phase::pre;
  if (2 * step <= tau.tau_steps) return Phase::pre;
  if (2 * step >= 3 * tau.tau_steps) return Phase::post;
  return Phase::mid;
}

nlohmann::ordered_json run_probe(const ProbeArgs& a, const fs::path& dir, const RunRecord& rec, std::uint64_t seed,
                                 std::int64_t step) {
  const int fiber = fiber_of(rec);
  const TauEstimate tau = detect_tau(rec.metrics, fiber, a.alpha, rec.config.batch_size);
  if (a.name == "tau") return J(to_json(tau));
  if (a.name == "delta-z") {
    nlohmann::ordered_json j;
    j["onset"] = J(to_json(detect_delta_z_onset(rec.metrics, tau)));
    if (step >= 0) {
      const ModelState m = checkpoint_at(dir, rec, step);
      const Dataset ds = dataset_of(rec);
      j["step"] = step;
      j["delta_z"] = delta_z(m, eval_examples(ds, seed), stream_key(seed, "delta-z", static_cast<std::uint64_t>(step)));
    }
    return j;
  }
  if (a.name == "direction") {
    const DirectionWindows w = direction_windows(rec.direction, plateau_height(rec.metrics, fiber, tau), tau);
    nlohmann::ordered_json j;
    j["plateau_mean"] = w.plateau_mean ? nlohmann::ordered_json(*w.plateau_mean) : nlohmann::ordered_json();
    j["plateau_n"] = w.plateau_n;
    j["transition_max"] = w.transition_max ? nlohmann::ordered_json(*w.transition_max) : nlohmann::ordered_json();
    j["transition_n"] = w.transition_n;
    return j;
  }
  if (a.name == "dissipation") {
    if (!tau.confirmed) throw RunFailure("dissipation needs a confirmed tau; this run has none");
    return J(to_json(dissipation(rec.metrics, tau.tau_steps, a.eta)));
  }

  if (step < 0) throw std::invalid_argument("probe " + a.name + " needs --step");
  const ModelState m = checkpoint_at(dir, rec, step);
  const Dataset ds = dataset_of(rec);
  if (a.name == "groups") return J(to_json(group_snapshot(m, ds, step, a.groups, seed)));
  if (a.name == "hessian") return J(to_json(hessian_extremes(m, ds, seed, a.iters, a.probe_batch, step)));
  if (a.name == "ablate") {
    const Phase ph = a.phase.empty() ? infer_phase(rec, step, a.alpha) : phase_from_string(a.phase);
    return J(to_json(ablate_heads(m, ds, ph, step, seed)));
  }
  throw std::invalid_argument("unknown probe '" + a.name + "'");
}

// One JSON line per probe call, appended to probes/<name>.jsonl. The
// trainer owns direction.jsonl, so the direction summary gets its own file.
fs::path probe_log(const fs::path& dir, const std::string& name) {
  return dir / "probes" / ((name == "direction" ? std::string("direction_windows") : name) + ".jsonl");
}

int cmd_probe(const ProbeArgs& a, std::uint64_t seed, std::ostream& out) {
  const fs::path dir(a.run);
  require_run_dir(dir);
  const RunRecord rec = load_run(dir);
  const std::int64_t step = a.step.empty() ? -1 : resolve_step(rec, a.step);

  nlohmann::ordered_json args;
  args["probe"] = a.name;
  args["step"] = step;
  args["seed"] = seed;
  args["alpha"] = a.alpha;
  if (a.name == "hessian") {
    args["iters"] = a.iters;
    args["probe_batch"] = a.probe_batch;
  }
  if (a.name == "groups") args["groups"] = a.groups;
  if (a.name == "ablate") args["phase"] = a.phase;
  if (a.name == "dissipation") args["eta"] = a.eta;

  const fs::path log = probe_log(dir, a.name);
  if (a.resume && fs::exists(log)) {
    std::ifstream is(log);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::ordered_json::parse(line);
      if (j.contains("args") && j["args"] == args) {
        out << j["result"].dump(1) << "\n";
        return kOk;
      }
    }
  }
  nlohmann::ordered_json entry;
  entry["args"] = args;
  entry["result"] = run_probe(a, dir, rec, seed, step);
  std::string text = fs::exists(log) ? read_file(log) : std::string();
  text += entry.dump() + "\n";
  write_file_atomic(log, text);
  write_manifest(dir);
  out << entry["result"].dump(1) << "\n";
  return kOk;
}

// ---- report ----------------------------------------------------------------

struct ReportArgs {
  std::string sweep;
  std::string run;
  std::vector<std::string> tables;
  double alpha = 0.5;
  int resamples = 10000;
  bool resume = false;
};

int cmd_report(const ReportArgs& a, std::uint64_t seed, std::ostream& out) {
  if (a.sweep.empty() == a.run.empty()) throw std::invalid_argument("give exactly one of --sweep or --run");
  if (!a.run.empty()) {
    require_run_dir(a.run);
    out << run_summary_text(load_run(a.run), a.alpha);
    return kOk;
  }
  const fs::path dir(a.sweep);
  if (!fs::exists(dir / "manifest.json")) throw std::invalid_argument("not a sweep directory: " + dir.string());
  if (a.tables.empty()) {
    for (const auto& p : write_reports(dir, default_tables(read_sweep_plan(dir).family), a.alpha, a.resamples, seed)) {
      out << "report " << p.string() << "\n";
    }
    return kOk;
  }
  for (const auto& t : a.tables) {
    const fs::path path = dir / "reports" / (t + ".csv");
    if (a.resume && fs::exists(path)) {
      out << read_file(path);
      continue;
    }
    const std::string csv = report_csv(dir, t, a.alpha, a.resamples, seed);
    write_file_atomic(path, csv);
    out << csv;
  }
  return kOk;
}

}  // namespace

std::string default_output_root() {
  const char* env = std::getenv("PLAB_OUT");
  return env && *env ? env : "plab-out";
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"plab: staged-disambiguation plateau lab"};
  app.require_subcommand(1);
  app.footer("Default output root: $PLAB_OUT (currently " + default_output_root() + ").");

  std::uint64_t seed = 42;
  std::vector<std::uint64_t> sweep_seeds;

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen", "generate a task dataset");
  add_task_flags(c_gen, gen.task);
  c_gen->add_option("--seed", seed, "dataset seed");
  c_gen->add_option("--out", gen.out, "output file, '-' for stdout");
  c_gen->add_flag("--resume", gen.resume, "leave an identical existing file untouched");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train one run into a run directory");
  add_train_flags(c_train, tr);
  c_train->add_option("--seed", seed, "keys dataset, init, batches and probes");
  c_train->add_option("--run", tr.run, "run directory");
  c_train->add_flag("--resume", tr.resume, "reuse a finished run, restart an interrupted one");
  c_train->add_flag("--quiet", tr.quiet, "no per-eval progress lines");

  SweepArgs sw;
  auto* c_sweep = app.add_subcommand("sweep", "execute a sweep plan");
  c_sweep->add_option("plan", sw.plan, "plan file (see docs/plan-format.md)");
  c_sweep->add_option("--family", sw.family, "use the built-in plan for a sweep family");
  c_sweep->add_flag("--full", sw.full, "built-in plan at full scale instead of desk scale");
  c_sweep->add_option("--out", sw.out, "sweep directory");
  c_sweep->add_option("--parallelism", sw.parallelism, "concurrent runs")->check(CLI::PositiveNumber);
  c_sweep->add_flag("--resume", sw.resume, "skip runs that already finished");
  c_sweep->add_option("--seed", sweep_seeds, "replace the plan's seeds (repeatable)");
  c_sweep->add_flag("--dump-plan", sw.dump_plan, "print the expanded plan and exit");
  c_sweep->add_flag("--no-report", sw.no_report, "skip the report tables");
  c_sweep->add_option("--alpha", sw.alpha, "tau threshold for the reports");

  ProbeArgs pr;
  auto* c_probe = app.add_subcommand("probe", "apply a probe to a run directory");
  c_probe->add_option("name", pr.name, "tau | delta-z | groups | hessian | ablate | direction | dissipation")
      ->required()
      ->check(CLI::IsMember({"tau", "delta-z", "groups", "hessian", "ablate", "direction", "dissipation"}));
  c_probe->add_option("--run", pr.run, "run directory")->required();
  c_probe->add_option("--step", pr.step,
                      "checkpoint step: an integer, an event (mid, tau, tau_half, tau_1_5, tau_2, final), "
                      "plateau or converged");
  c_probe->add_option("--phase", pr.phase, "ablation phase label (pre | mid | post); inferred from tau if omitted")
      ->check(CLI::IsMember({"pre", "mid", "post"}));
  c_probe->add_option("--alpha", pr.alpha);
  c_probe->add_option("--iters", pr.iters, "power iterations");
  c_probe->add_option("--probe-batch", pr.probe_batch, "examples in the Hessian probe batch");
  c_probe->add_option("--groups", pr.groups, "groups sampled by the group snapshot");
  c_probe->add_option("--eta", pr.eta, "learning rate for dissipation (default: recorded lr_now)");
  c_probe->add_option("--seed", seed, "probe seed");
  c_probe->add_flag("--resume", pr.resume, "print a stored result instead of recomputing");

  ReportArgs rp;
  auto* c_report = app.add_subcommand("report", "tables and plots for a sweep, or a run summary");
  c_report->add_option("--sweep", rp.sweep, "sweep directory");
  c_report->add_option("--run", rp.run, "run directory");
  c_report->add_option("--table", rp.tables, "table name (repeatable)")->check(CLI::IsMember(report_tables()));
  c_report->add_option("--alpha", rp.alpha);
  c_report->add_option("--resamples", rp.resamples, "bootstrap resamples");
  c_report->add_option("--seed", seed, "bootstrap seed");
  c_report->add_flag("--resume", rp.resume, "print stored tables instead of recomputing");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (c_gen->parsed()) {
      gen.seed = seed;
      return cmd_gen(gen, out);
    }
    if (c_train->parsed()) return cmd_train(tr, seed, out);
    if (c_sweep->parsed()) return cmd_sweep(sw, sweep_seeds, out, err);
    if (c_probe->parsed()) return cmd_probe(pr, seed, out);
    if (c_report->parsed()) return cmd_report(rp, seed, out);
  } catch (const InfeasibleSpec& e) {
    err << "infeasible spec: " << e.what() << "\n";
    return kInfeasible;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return kRunFailure;
  }
  return kUsage;
}

}  // namespace plab::cli
