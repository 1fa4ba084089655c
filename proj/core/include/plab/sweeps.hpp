#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "plab/analysis.hpp"
#include "plab/optim.hpp"

namespace plab {

enum class SweepFamily {
  d_sweep,
  fixed_d_control,
  batch_sweep,
  lr_sweep,
  noise_sweep,
  selector_sweep,
  arch_sweep,
  phase_boundary,
  asymmetry,
  hierarchical,
  multi_seed,
};

std::string_view to_string(SweepFamily f);
SweepFamily sweep_family_from_string(std::string_view s);

// One grid point before seeds are applied.
struct GridPoint {
  std::string label;  // varying keys, e.g. "K=10,lr=0.001"
  TaskSpec task;
  std::optional<HierarchicalTaskSpec> hierarchy;
  ArchDescriptor arch;
  TrainConfig train;
  ProbeSchedule probes;
};

struct SweepPlan {
  std::string name = "sweep";
  SweepFamily family = SweepFamily::d_sweep;
  std::vector<GridPoint> grid;
  std::vector<std::uint64_t> seeds{42};
};

// Plan files: "key = value" lines, '#' comments. A value with commas is a
// grid axis; the grid is the cartesian product of all axes in file order.
// Keys: name, family, seeds, task.*, hier.*, arch.*, train.*, probes.*.
// task.D sets n_b = round(D / K) per grid point. See docs/plan-format.md.
SweepPlan parse_plan(const std::string& text);
SweepPlan load_plan(const std::filesystem::path& path);

// A (grid point, seed) pair with the seed applied to dataset and training.
struct RunSpec {
  std::string id;  // directory name under runs/
  std::size_t point = 0;
  std::uint64_t seed = 0;
  GridPoint config;
};

std::vector<RunSpec> expand_runs(const SweepPlan& plan);

struct ManifestEntry {
  std::string id;
  std::string label;
  std::uint64_t seed = 0;
  std::string dir;     // relative to the sweep directory
  std::string status;  // completed | early_stopped | failed | error | pending
  std::string message;
};

struct SweepResult {
  std::filesystem::path dir;
  std::vector<ManifestEntry> entries;
  int trained = 0;  // runs executed (not skipped) in this call
};

// Runs every (grid point, seed) into <dir>/runs/<id>. With resume, runs whose
// directory holds a finished record are skipped. Errors in one run are
// recorded in the manifest and do not stop the sweep.
SweepResult run_sweep(const SweepPlan& plan, const std::filesystem::path& dir, int parallelism = 1,
                      bool resume = false);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& sweep_dir);
SweepPlan read_sweep_plan(const std::filesystem::path& sweep_dir);

// Desk-scale plans use n_b = 200; full-scale plans use n_b = 1000 and longer budgets.
SweepPlan default_plan(SweepFamily family, bool full_scale = false);
std::string plan_to_text(const SweepPlan& plan);

struct BoundaryObservation {
  int K = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  bool converged = false;
};

struct BoundaryRow {
  int K = 0;
  std::optional<double> max_all_succeed;
  std::optional<double> min_any_fail;
  std::optional<double> eta_star;
  bool open_above = false;          // nothing failed
  bool undefined = false;           // nothing succeeded
  bool monotonicity_violation = false;
};

struct PhaseBoundaryResult {
  std::vector<BoundaryRow> rows;
  std::optional<PowerLawFit> fit;  // eta* = a K^-b, so b = -fit.exponent
};

// Converged means eval_loss < 0.1 at some eval of a run that did not fail.
inline constexpr double kConvergedLoss = 0.1;
bool converged(const RunRecord& rec);

PhaseBoundaryResult phase_boundary(const std::vector<BoundaryObservation>& obs, int resamples = 10000,
                                   std::uint64_t seed = 42);

struct AsymmetryRow {
  int K = 0;
  std::optional<std::int64_t> tau_fwd;
  std::optional<std::int64_t> tau_bwd;
  std::optional<double> ratio;           // tau_fwd / tau_bwd
  std::optional<double> transfer_ratio;  // tau_scratch / tau_finetune
};

AsymmetryRow asymmetry_row(int K, const TransferResult& t, double alpha = 0.5);

// Forward, backward and transfer runs for each K on the same map.
std::vector<AsymmetryRow> asymmetry_suite(const std::vector<int>& Ks, const TaskSpec& base, const ArchDescriptor& arch,
                                          const TrainConfig& cfg, const ProbeSchedule& probes = {},
                                          const std::filesystem::path& dir = {});

// Observations for phase_boundary from a finished sweep directory.
std::vector<BoundaryObservation> boundary_observations(const std::filesystem::path& sweep_dir);

}  // namespace plab
