#include "plab/optim.hpp"

#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "plab/io.hpp"
#include "plab/records.hpp"
#include "plab/rng.hpp"

namespace plab {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto check = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("TrainConfig: ") + what);
  };
  check(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  check(batch_size >= 1, "batch_size must be positive");
  check(max_steps >= 1, "max_steps must be positive");
  check(warmup_steps >= 0 && warmup_steps <= max_steps, "warmup_steps must lie in [0, max_steps]");
  check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  check(weight_decay >= 0.0, "weight_decay must be non-negative");
  check(eps > 0.0, "eps must be positive");
  check(eval_every >= 1, "eval_every must be positive");
  check(checkpoint_every >= 0, "checkpoint_every must be non-negative");
}

double lr_schedule(const TrainConfig& cfg, std::int64_t step) {
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  if (step >= cfg.warmup_steps) return cfg.lr;
  const double x = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  return cfg.lr * 0.5 * (1.0 - std::cos(std::numbers::pi * x));
}

std::vector<std::size_t> sample_batch(std::size_t dataset_size, int batch_size, std::int64_t step,
                                      std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("sample_batch: batch_size must be positive");
  if (dataset_size == 0) throw std::invalid_argument("sample_batch: empty dataset");
  Rng rng(seed, "batch", static_cast<std::uint64_t>(step));
  std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
  for (auto& i : idx) i = static_cast<std::size_t>(rng.below(dataset_size));
  return idx;
}

TokenBatch sample_batch(const Dataset& ds, int batch_size, std::int64_t step, std::uint64_t seed) {
  const auto idx = sample_batch(ds.size(), batch_size, step, seed);
  return make_batch(ds, idx);
}

AdamW::AdamW(std::size_t n, const TrainConfig& cfg)
    : b1_(cfg.beta1), b2_(cfg.beta2), wd_(cfg.weight_decay), eps_(cfg.eps), m_(n, 0.0f), v_(n, 0.0f) {}

void AdamW::step(std::span<float> theta, std::span<const float> grad, double lr) {
  if (theta.size() != m_.size() || grad.size() != m_.size()) {
    throw std::invalid_argument("AdamW: size mismatch");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const float c1 = static_cast<float>(1.0 - b1_), c2 = static_cast<float>(1.0 - b2_);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float decay = static_cast<float>(lr * wd_);
  const float eps = static_cast<float>(eps_);
  float* th = theta.data();
  const float* g = grad.data();
  float* m = m_.data();
  float* v = v_.data();
  const std::size_t n = m_.size();
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + c1 * g[i];
    v[i] = b2 * v[i] + c2 * g[i] * g[i];
    th[i] -= decay * th[i] + step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
  }
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::early_stopped: return "early_stopped";
    case RunStatus::failed: return "failed";
  }
  return "?";
}

RunStatus run_status_from_string(std::string_view s) {
  if (s == "completed") return RunStatus::completed;
  if (s == "early_stopped") return RunStatus::early_stopped;
  if (s == "failed") return RunStatus::failed;
  throw std::invalid_argument("unknown run status '" + std::string(s) + "'");
}

const Snapshot* RunRecord::event(const std::string& name) const {
  const auto e = events.find(name);
  if (e == events.end()) return nullptr;
  const auto s = snapshots.find(e->second);
  return s == snapshots.end() ? nullptr : &s->second;
}

std::string config_json(const RunRecord& rec) {
  nlohmann::ordered_json j;
  if (rec.hierarchy) {
    j["task"] = nlohmann::ordered_json::parse(to_json(*rec.hierarchy));
    j["task_kind"] = "hierarchical";
  } else {
    j["task"] = nlohmann::ordered_json::parse(to_json(rec.task));
    j["task_kind"] = "flat";
  }
  j["arch"] = nlohmann::ordered_json::parse(to_json(rec.arch));
  j["train"] = nlohmann::ordered_json::parse(to_json(rec.config));
  j["probes"] = nlohmann::ordered_json::parse(to_json(rec.schedule));
  return j.dump(1) + "\n";
}

namespace {

std::string checkpoint_name(std::int64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "checkpoints/step_%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

double l2_norm(std::span<const float> g) {
  double s = 0.0;
  for (float x : g) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

void write_record_files(const RunRecord& rec, const fs::path& dir) {
  {
    std::string lines;
    for (const auto& d : rec.direction) lines += to_json(d) + "\n";
    write_file_atomic(dir / "probes" / "direction.jsonl", lines);
  }
  nlohmann::ordered_json j;
  j["status"] = std::string(to_string(rec.status));
  j["failure"] = rec.failure;
  j["steps_run"] = rec.steps_run;
  j["wall_clock_s"] = rec.wall_clock_s;
  j["tau"] = nlohmann::ordered_json::parse(to_json(rec.tau));
  j["events"] = nlohmann::ordered_json::object();
  for (const auto& [name, step] : rec.events) j["events"][name] = step;
  j["checkpoints"] = nlohmann::ordered_json::object();
  for (const auto& [step, path] : rec.checkpoint_paths) j["checkpoints"][std::to_string(step)] = path;
  write_file_atomic(dir / "record.json", j.dump(1) + "\n");
  write_manifest(dir);
}

}  // namespace

RunRecord train(const Dataset& ds, const ArchDescriptor& arch, const TrainConfig& cfg, const ProbeSchedule& probes,
                const RunOptions& opts) {
  cfg.validate();
  arch.validate();
  if (ds.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (ds.seq_len() > arch.max_seq_len) {
    throw std::invalid_argument("train: dataset sequences (" + std::to_string(ds.seq_len()) +
                                ") exceed the architecture's max_seq_len");
  }
  if (arch.vocab_size != kVocabSize) throw std::invalid_argument("train: vocab_size must match the task vocabulary");
  if (opts.initial && !(opts.initial->arch == arch)) {
    throw std::invalid_argument("train: initial model has a different architecture");
  }

  const auto t_start = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.task = ds.spec;
  rec.hierarchy = ds.hierarchy;
  rec.arch = arch;
  rec.config = cfg;
  rec.schedule = probes;

  const bool on_disk = !opts.run_dir.empty();
  std::ofstream metrics_out;
  if (on_disk) {
    fs::create_directories(opts.run_dir / "checkpoints");
    fs::create_directories(opts.run_dir / "probes");
    fs::remove(opts.run_dir / "record.json");
    write_file_atomic(opts.run_dir / "config.json", config_json(rec));
    metrics_out.open(opts.run_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics_out) throw std::runtime_error("cannot write metrics in " + opts.run_dir.string());
  }

  ModelState model = opts.initial ? *opts.initial : init(arch, cfg.seed);
  std::vector<float>& theta = model.params;
  std::vector<float> grad(theta.size());
  Engine<float> engine(arch);
  AdamW opt(theta.size(), cfg);
  const std::vector<Example> eval = eval_examples(ds, cfg.seed);

  const int fiber = ds.fiber_size();
  const double ln_k = ds.plateau_benchmark();
  DirectionTracker direction;

  // Parameter snapshots that may later be named as events.
  std::deque<Snapshot> recent;             // last three evals
  std::map<std::int64_t, Snapshot> pool;   // every snapshot_every steps until tau is known
  Snapshot last_good{0, theta};

  auto keep_event = [&](const std::string& name, const Snapshot& s) {
    rec.events[name] = s.step;
    if (!rec.snapshots.contains(s.step)) {
      rec.snapshots[s.step] = s;
      if (on_disk) {
        const std::string rel = checkpoint_name(s.step);
        save_checkpoint(opts.run_dir / rel, {arch, s.params});
        rec.checkpoint_paths[s.step] = rel;
      }
    }
  };

  double window_loss = 0.0;
  int window_n = 0;
  int below = 0;
  bool tau_known = false;
  std::int64_t tau = -1;
  bool mid_taken = false;
  std::int64_t s = 0;
  rec.status = RunStatus::completed;

  try {
    for (s = 0;; ++s) {
      const TokenBatch batch = sample_batch(ds, cfg.batch_size, s, cfg.seed);
      Engine<float>::Request req;
      req.grad = grad;
      window_loss += engine.run(theta, batch, req);
      ++window_n;

      bool stop = false;
      if (s % cfg.eval_every == 0 || s == cfg.max_steps) {
        MetricsRecord r;
        r.step = s;
        r.train_loss = window_loss / window_n;
        r.eval_loss = mean_example_loss(engine, theta, eval);
        if (!std::isfinite(r.eval_loss)) throw std::runtime_error("non-finite eval loss");
        r.excess_risk = r.eval_loss;
        r.delta_z = eval.size() >= 2
                        ? mean_example_loss(engine, theta, shuffle_selectors(eval, stream_key(cfg.seed, "delta-z",
                                                                               static_cast<std::uint64_t>(s)))) -
                              r.eval_loss
                        : 0.0;
        r.grad_norm = l2_norm(grad);
        r.lr_now = lr_schedule(cfg, s);
        r.tokens_processed = s * cfg.batch_size;
        window_loss = 0.0;
        window_n = 0;
        rec.metrics.push_back(r);
        if (metrics_out) metrics_out << metrics_to_json_line(r) << '\n' << std::flush;
        if (opts.on_eval) opts.on_eval(r);

        last_good = Snapshot{s, theta};
        if (probes.tau_events) {
          recent.push_back(last_good);
          if (recent.size() > 3) recent.pop_front();
          if (!tau_known && probes.snapshot_every > 0 && s % probes.snapshot_every == 0) pool[s] = last_good;
          if (!mid_taken && !tau_known && fiber > 1 && r.eval_loss <= 0.8 * ln_k && r.eval_loss >= 0.2 * ln_k) {
            keep_event("mid", last_good);
            mid_taken = true;
          }
          if (!tau_known) {
            const TauEstimate est = detect_tau(rec.metrics, fiber, probes.alpha, cfg.batch_size);
            if (est.confirmed) {
              tau_known = true;
              tau = est.tau_steps;
              // Candidates for the retroactive events.
              std::map<std::int64_t, const Snapshot*> have;
              for (const auto& [k, v] : pool) have[k] = &v;
              for (const auto& v : recent) have[v.step] = &v;
              for (const auto& [k, v] : rec.snapshots) have[k] = &v;
              if (have.contains(tau)) keep_event("tau", *have.at(tau));
              const Snapshot* half = nullptr;
              for (const auto& [k, v] : have) {
                if (!half || std::llabs(2 * k - tau) < std::llabs(2 * half->step - tau)) half = v;
              }
              if (half) keep_event("tau_half", *half);
              pool.clear();
            } else if (!pool.empty()) {
              // tau >= s - 2 eval_every, so snapshots far below half of that can go.
              const std::int64_t floor = (s - 2 * cfg.eval_every) / 2 - probes.snapshot_every;
              while (!pool.empty() && pool.begin()->first < floor) pool.erase(pool.begin());
            }
          }
          if (tau_known) {
            if (!rec.events.contains("tau_1_5") && 2 * s >= 3 * tau) keep_event("tau_1_5", last_good);
            if (!rec.events.contains("tau_2") && s >= 2 * tau) keep_event("tau_2", last_good);
          }
        }

        below = r.eval_loss < probes.early_stop_loss ? below + 1 : 0;
        const bool events_done = !probes.tau_events || !tau_known || rec.events.contains("tau_2");
        if (probes.early_stop_evals > 0 && below >= probes.early_stop_evals && events_done) {
          rec.status = RunStatus::early_stopped;
          stop = true;
        }
        if (tau_known && probes.stop_after_tau > 0.0 && static_cast<double>(s) >= probes.stop_after_tau * tau) {
          stop = true;
        }
      }
      if (probes.direction_every > 0 && s % probes.direction_every == 0) direction.push(s, theta);
      if (on_disk && cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
        const std::string rel = checkpoint_name(s);
        save_checkpoint(opts.run_dir / rel, model);
        rec.checkpoint_paths[s] = rel;
      }
      if (stop || s == cfg.max_steps) break;
      opt.step(theta, grad, lr_schedule(cfg, s));
      rec.steps_run = s + 1;
    }
    rec.final_model = model;
    keep_event("final", Snapshot{s, theta});
  } catch (const std::runtime_error& e) {
    rec.status = RunStatus::failed;
    rec.failure = std::string(e.what()) + " at step " + std::to_string(s);
    rec.final_model = ModelState{arch, last_good.params};
    keep_event("final", last_good);
  }

  rec.direction = direction.results();
  rec.tau = detect_tau(rec.metrics, fiber, probes.alpha, cfg.batch_size);
  rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  if (on_disk) {
    metrics_out.close();
    write_record_files(rec, opts.run_dir);
  }
  return rec;
}

TransferResult transfer_train(const Dataset& ds_fwd, const Dataset& ds_bwd, const ArchDescriptor& arch,
                              const TrainConfig& cfg, const ProbeSchedule& probes, const RunOptions& opts) {
  if (ds_fwd.spec.n_b != ds_bwd.spec.n_b || ds_fwd.spec.K != ds_bwd.spec.K || ds_fwd.spec.seed != ds_bwd.spec.seed) {
    throw std::invalid_argument("transfer_train: datasets must come from the same map");
  }
  auto sub = [&](const char* name) {
    RunOptions o;
    if (!opts.run_dir.empty()) o.run_dir = opts.run_dir / name;
    o.on_eval = opts.on_eval;
    return o;
  };
  TransferResult out;
  // Pretraining runs to convergence; its tau events are not needed.
  ProbeSchedule pre = probes;
  pre.tau_events = false;
  pre.stop_after_tau = 0.0;
  pre.direction_every = 0;
  out.pretrain = train(ds_fwd, arch, cfg, pre, sub("pretrain"));
  if (out.pretrain.status == RunStatus::failed) {
    throw std::runtime_error("transfer_train: pretraining failed: " + out.pretrain.failure);
  }
  RunOptions ft = sub("finetune");
  ft.initial = &out.pretrain.final_model;
  out.finetune = train(ds_bwd, arch, cfg, probes, ft);
  out.scratch = train(ds_bwd, arch, cfg, probes, sub("scratch"));
  if (out.finetune.tau.confirmed && out.scratch.tau.confirmed && out.finetune.tau.tau_steps > 0) {
    out.ratio = static_cast<double>(out.scratch.tau.tau_steps) / static_cast<double>(out.finetune.tau.tau_steps);
    out.ratio_defined = true;
  }
  return out;
}

bool run_is_complete(const fs::path& run_dir) {
  return fs::exists(run_dir / "record.json") && fs::exists(run_dir / "manifest.json");
}

RunRecord load_run(const fs::path& run_dir, bool load_checkpoints) {
  if (!run_is_complete(run_dir)) throw std::runtime_error("not a completed run directory: " + run_dir.string());
  RunRecord rec;
  const auto cfg = nlohmann::json::parse(read_file(run_dir / "config.json"));
  if (cfg.value("task_kind", "flat") == "hierarchical") {
    rec.hierarchy = hierarchical_spec_from_json(cfg.at("task").dump());
    rec.task.n_b = rec.hierarchy->n_b;
    rec.task.K = rec.hierarchy->fiber_size();
    rec.task.seed = rec.hierarchy->seed;
  } else {
    rec.task = task_spec_from_json(cfg.at("task").dump());
  }
  rec.arch = arch_from_json(cfg.at("arch").dump());
  rec.config = train_config_from_json(cfg.at("train").dump());
  rec.schedule = probe_schedule_from_json(cfg.at("probes").dump());
  rec.metrics = read_metrics(run_dir / "metrics.jsonl");

  const auto r = nlohmann::json::parse(read_file(run_dir / "record.json"));
  rec.status = run_status_from_string(r.at("status").get<std::string>());
  rec.failure = r.value("failure", "");
  rec.steps_run = r.at("steps_run").get<std::int64_t>();
  rec.wall_clock_s = r.at("wall_clock_s").get<double>();
  rec.tau = tau_from_json(r.at("tau").dump());
  for (const auto& [k, v] : r.at("events").items()) rec.events[k] = v.get<std::int64_t>();
  for (const auto& [k, v] : r.at("checkpoints").items()) rec.checkpoint_paths[std::stoll(k)] = v.get<std::string>();

  if (fs::exists(run_dir / "probes" / "direction.jsonl")) {
    std::ifstream is(run_dir / "probes" / "direction.jsonl");
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) rec.direction.push_back(direction_from_json(line));
    }
  }
  if (load_checkpoints) {
    for (const auto& [step, rel] : rec.checkpoint_paths) {
      rec.snapshots[step] = Snapshot{step, load_checkpoint(run_dir / rel).params};
    }
    if (rec.events.contains("final") && rec.snapshots.contains(rec.events.at("final"))) {
      rec.final_model = ModelState{rec.arch, rec.snapshots.at(rec.events.at("final")).params};
    }
  }
  return rec;
}

}  // namespace plab
