#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "plab/metrics.hpp"
#include "plab/nn.hpp"
#include "plab/taskgen.hpp"

namespace plab {

// Loss level that counts as "below the plateau": alpha * ln K. A fiber of one
// has no plateau; the K = 1 convergence level stands in for ln K there.
inline constexpr double kTrivialFiberThreshold = 0.05;
double tau_threshold(int fiber_size, double alpha);

struct TauEstimate {
  std::int64_t tau_steps = -1;
  std::int64_t tau_tokens = -1;
  double alpha = 0.5;
  bool confirmed = false;
  std::int64_t raw_crossing = -1;  // first eval below threshold, confirmed or not
};

// tau = first eval step with eval_loss below threshold, confirmed by the next
// two evals also below it. batch_size only scales tau_tokens.
TauEstimate detect_tau(std::span<const MetricsRecord> stream, int fiber_size, double alpha = 0.5,
                       int batch_size = 128);

struct DeltaZOnset {
  std::int64_t onset_step = -1;
  bool found = false;
  double lead_fraction = 0.0;  // (tau - onset) / tau, valid when found and tau confirmed
};

inline constexpr double kDeltaZOnsetLevel = 0.1;
inline constexpr int kDeltaZOnsetRun = 3;
DeltaZOnset detect_delta_z_onset(std::span<const MetricsRecord> stream, const TauEstimate& tau);

// Mean summed-target loss over examples, evaluated in chunks.
double mean_example_loss(Engine<float>& engine, std::span<const float> params, std::span<const Example> examples,
                         const AblationMask* mask = nullptr);
double mean_example_loss(const ModelState& model, std::span<const Example> examples,
                         const AblationMask* mask = nullptr);

// Loss with selectors permuted across the batch minus the clean loss.
double delta_z(Engine<float>& engine, std::span<const float> params, std::span<const Example> batch,
               std::uint64_t seed);
double delta_z(const ModelState& model, std::span<const Example> batch, std::uint64_t seed);

struct GroupSnapshot {
  std::int64_t step = 0;
  int sampled_groups = 0;
  double frac_ge_80 = 0.0;
  double frac_100 = 0.0;
  double mean_accuracy = 0.0;
};

// Greedy decoding of every fiber member of n_sample randomly chosen groups.
GroupSnapshot group_snapshot(const ModelState& model, const Dataset& ds, std::int64_t step, int n_sample,
                             std::uint64_t seed);

struct HessianProbe {
  std::int64_t step = 0;
  double lambda_max = 0.0;
  double lambda_min = 0.0;
  double anisotropy = 0.0;
  double residual_max = 0.0;
  double residual_min = 0.0;
  int iters = 50;
  int probe_batch = 512;
  bool flagged = false;  // a residual exceeded 0.1
};

// Symmetric linear operator for power iteration.
struct SymmetricOperator {
  std::size_t dim = 0;
  std::function<std::vector<double>(std::span<const double>)> apply;
};

struct PowerResult {
  double eigenvalue = 0.0;
  double residual = 0.0;  // |Av - lambda v| / |v|
  std::vector<double> vector;
};

// Power iteration from a seeded unit Gaussian start; shift s iterates on
// (s I - A) and reports the eigenvalue of A.
PowerResult power_iteration(const SymmetricOperator& op, int iters, std::uint64_t seed,
                            std::optional<double> shift = std::nullopt);

// lambda_max by power iteration, lambda_min by iterating on c I - H with
// c = 1.05 lambda_max.
HessianProbe hessian_extremes(const SymmetricOperator& op, int iters, std::uint64_t seed);
HessianProbe hessian_extremes(const ModelState& model, const Dataset& ds, std::uint64_t seed, int iters = 50,
                              int probe_batch = 512, std::int64_t step = 0);

enum class Phase { pre, mid, post };
std::string_view to_string(Phase p);
Phase phase_from_string(std::string_view s);

struct HeadDelta {
  int layer = 0;
  int head = 0;
  double delta_loss = 0.0;
};

struct AblationReport {
  Phase phase = Phase::pre;
  std::int64_t step = 0;
  double baseline_loss = 0.0;
  std::vector<HeadDelta> heads;

  double max_delta() const;
};

// Zero-ablates each head in turn on the dataset's eval set.
AblationReport ablate_heads(const ModelState& model, const Dataset& ds, Phase phase, std::int64_t step = 0,
                            std::uint64_t eval_seed = 42);

struct DirectionConsistency {
  std::int64_t step = 0;
  std::optional<double> cosine;  // missing when a displacement is zero
};

// Cosine between consecutive displacements of a checkpoint sequence taken at
// a fixed interval. The record's step is the middle checkpoint.
std::vector<DirectionConsistency> direction_consistency(std::span<const std::int64_t> steps,
                                                        std::span<const std::vector<float>> thetas);

// Streaming form used during training; keeps two parameter vectors.
class DirectionTracker {
 public:
  void push(std::int64_t step, std::span<const float> theta);
  const std::vector<DirectionConsistency>& results() const { return results_; }

 private:
  std::vector<float> last_theta_;
  std::vector<double> last_delta_;
  std::int64_t last_step_ = -1;
  bool have_theta_ = false;
  bool have_delta_ = false;
  std::vector<DirectionConsistency> results_;
};

struct DissipationResult {
  double Q = 0.0;
  std::int64_t window_lo = 0;
  std::int64_t window_hi = 0;
  int measurements = 0;
  bool partial = false;  // stream does not cover the window
};

// Q = sum over evals in [tau/2, 2 tau] of lr_now * grad_norm^2 * eval cadence.
DissipationResult dissipation(std::span<const MetricsRecord> stream, std::int64_t tau_steps, double eta);

// The examples used for evaluation: all of them for D <= 4096, otherwise a
// seeded subsample of 4096.
inline constexpr std::size_t kEvalCap = 4096;
std::vector<std::size_t> eval_indices(const Dataset& ds, std::uint64_t seed);
std::vector<Example> eval_examples(const Dataset& ds, std::uint64_t seed);

}  // namespace plab
