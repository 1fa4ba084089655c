#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plab/metrics.hpp"
#include "plab/nn.hpp"
#include "plab/probes.hpp"
#include "plab/taskgen.hpp"

namespace plab {

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  std::int64_t max_steps = 20000;
  std::int64_t warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double eps = 1e-8;
  std::int64_t eval_every = 50;
  std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::uint64_t seed = 42;            // keys init, batch, eval-subset and delta-z streams

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// What the trainer watches for besides the loss.
struct ProbeSchedule {
  double alpha = 0.5;
  // Keep parameter snapshots at tau/2, tau, 1.5 tau, 2 tau and at the first
  // eval inside the transition band (loss in [0.2, 0.8] ln K).
  bool tau_events = true;
  // Cadence of retained in-memory snapshots; tau/2 is recovered from these.
  std::int64_t snapshot_every = 100;
  // Stop once step >= stop_after_tau * tau (0 disables).
  double stop_after_tau = 0.0;
  double early_stop_loss = 0.01;
  int early_stop_evals = 5;
  // Interval of the parameter displacement cosines (0 disables).
  std::int64_t direction_every = 100;

  bool operator==(const ProbeSchedule&) const = default;
};

double lr_schedule(const TrainConfig& cfg, std::int64_t step);

// batch_size indices drawn uniformly with replacement, keyed by (seed, step).
std::vector<std::size_t> sample_batch(std::size_t dataset_size, int batch_size, std::int64_t step,
                                      std::uint64_t seed);
TokenBatch sample_batch(const Dataset& ds, int batch_size, std::int64_t step, std::uint64_t seed);

// AdamW with decoupled weight decay on every parameter:
//   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
//   theta -= lr (wd theta + m_hat / (sqrt(v_hat) + eps))
class AdamW {
 public:
  AdamW(std::size_t n, const TrainConfig& cfg);
  void step(std::span<float> theta, std::span<const float> grad, double lr);
  std::int64_t t() const { return t_; }
  const std::vector<float>& m() const { return m_; }
  const std::vector<float>& v() const { return v_; }

 private:
  double b1_, b2_, wd_, eps_;
  std::int64_t t_ = 0;
  std::vector<float> m_, v_;
};

enum class RunStatus { completed, early_stopped, failed };
std::string_view to_string(RunStatus s);
RunStatus run_status_from_string(std::string_view s);

struct Snapshot {
  std::int64_t step = 0;
  std::vector<float> params;
};

struct RunRecord {
  TaskSpec task;
  std::optional<HierarchicalTaskSpec> hierarchy;
  ArchDescriptor arch;
  TrainConfig config;
  ProbeSchedule schedule;
  MetricsStream metrics;
  std::map<std::string, std::int64_t> events;   // "tau_half", "mid", "tau", "tau_1_5", "tau_2", "final"
  std::map<std::int64_t, Snapshot> snapshots;   // retained parameter vectors, by step
  std::map<std::int64_t, std::string> checkpoint_paths;
  std::vector<DirectionConsistency> direction;
  TauEstimate tau;
  ModelState final_model;
  std::int64_t steps_run = 0;
  double wall_clock_s = 0.0;
  RunStatus status = RunStatus::completed;
  std::string failure;

  // Parameters at a named event, if retained.
  const Snapshot* event(const std::string& name) const;
  ModelState model_at(const Snapshot& s) const { return {arch, s.params}; }
};

struct RunOptions {
  std::filesystem::path run_dir;              // empty keeps the run in memory
  const ModelState* initial = nullptr;        // start from these weights
  std::function<void(const MetricsRecord&)> on_eval;
};

// Runs AdamW until max_steps, an early stop or the tau stop rule. A non-finite
// loss marks the run failed; the last good parameters are kept as "final".
RunRecord train(const Dataset& ds, const ArchDescriptor& arch, const TrainConfig& cfg,
                const ProbeSchedule& probes = {}, const RunOptions& opts = {});

struct TransferResult {
  RunRecord pretrain;
  RunRecord finetune;
  RunRecord scratch;
  // tau_scratch / tau_finetune on the backward task; > 1 means pretraining helped.
  double ratio = 0.0;
  bool ratio_defined = false;
};

// Pretrain on the forward task, then train the same weights with a fresh
// optimizer on the backward task; a scratch run with the same config is the
// baseline. Directories are created under opts.run_dir when set.
TransferResult transfer_train(const Dataset& ds_fwd, const Dataset& ds_bwd, const ArchDescriptor& arch,
                              const TrainConfig& cfg, const ProbeSchedule& probes = {},
                              const RunOptions& opts = {});

// JSON text for the config header of a run directory (task, arch, train, probes).
std::string config_json(const RunRecord& rec);

// Reads a run directory written by train().
RunRecord load_run(const std::filesystem::path& run_dir, bool load_checkpoints = false);
bool run_is_complete(const std::filesystem::path& run_dir);

}  // namespace plab
