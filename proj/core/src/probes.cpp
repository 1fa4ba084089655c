#include "plab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "plab/rng.hpp"

namespace plab {

namespace {

constexpr std::size_t kChunk = 512;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Indices of a seeded sample of k distinct elements of [0, n), sorted.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, std::uint64_t seed,
                                                    std::string_view tag) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (k >= n) return idx;
  Rng rng(seed, tag);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.below(n - i)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

double tau_threshold(int fiber_size, double alpha) {
  if (fiber_size <= 1) return alpha * kTrivialFiberThreshold / 0.5;
  return alpha * std::log(static_cast<double>(fiber_size));
}

TauEstimate detect_tau(std::span<const MetricsRecord> stream, int fiber_size, double alpha, int batch_size) {
  TauEstimate est;
  est.alpha = alpha;
  const double thr = tau_threshold(fiber_size, alpha);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (!(stream[i].eval_loss < thr)) continue;
    if (est.raw_crossing < 0) est.raw_crossing = stream[i].step;
    if (i + 2 < stream.size() && stream[i + 1].eval_loss < thr && stream[i + 2].eval_loss < thr) {
      est.tau_steps = stream[i].step;
      est.tau_tokens = est.tau_steps * batch_size;
      est.confirmed = true;
      break;
    }
  }
  return est;
}

DeltaZOnset detect_delta_z_onset(std::span<const MetricsRecord> stream, const TauEstimate& tau) {
  DeltaZOnset out;
  int run = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    run = stream[i].delta_z > kDeltaZOnsetLevel ? run + 1 : 0;
    if (run == kDeltaZOnsetRun) {
      out.onset_step = stream[i + 1 - kDeltaZOnsetRun].step;
      out.found = true;
      break;
    }
  }
  if (out.found && tau.confirmed && tau.tau_steps > 0) {
    out.lead_fraction = static_cast<double>(tau.tau_steps - out.onset_step) / static_cast<double>(tau.tau_steps);
  }
  return out;
}

double mean_example_loss(Engine<float>& engine, std::span<const float> params, std::span<const Example> examples,
                         const AblationMask* mask) {
  if (examples.empty()) throw std::invalid_argument("mean_example_loss: no examples");
  double total = 0.0;
  std::vector<double> per;
  for (std::size_t lo = 0; lo < examples.size(); lo += kChunk) {
    const auto part = examples.subspan(lo, std::min(kChunk, examples.size() - lo));
    const TokenBatch batch = make_batch(part);
    Engine<float>::Request req;
    req.per_example = &per;
    req.mask = mask;
    engine.run(params, batch, req);
    for (double x : per) total += x;
  }
  return total / static_cast<double>(examples.size());
}

double mean_example_loss(const ModelState& model, std::span<const Example> examples, const AblationMask* mask) {
  Engine<float> engine(model.arch);
  return mean_example_loss(engine, model.params, examples, mask);
}

double delta_z(Engine<float>& engine, std::span<const float> params, std::span<const Example> batch,
               std::uint64_t seed) {
  if (batch.size() < 2) throw std::invalid_argument("delta_z needs a batch of at least 2 examples");
  const std::vector<Example> shuffled = shuffle_selectors(batch, seed);
  return mean_example_loss(engine, params, shuffled) - mean_example_loss(engine, params, batch);
}

double delta_z(const ModelState& model, std::span<const Example> batch, std::uint64_t seed) {
  Engine<float> engine(model.arch);
  return delta_z(engine, model.params, batch, seed);
}

GroupSnapshot group_snapshot(const ModelState& model, const Dataset& ds, std::int64_t step, int n_sample,
                             std::uint64_t seed) {
  if (n_sample < 1 || n_sample > ds.n_groups()) {
    throw std::invalid_argument("group_snapshot: n_sample must lie in [1, n_b]");
  }
  std::vector<const Example*> base(static_cast<std::size_t>(ds.n_groups()), nullptr);
  for (const Example& ex : ds.examples) {
    if (!base[static_cast<std::size_t>(ex.group_id)]) base[static_cast<std::size_t>(ex.group_id)] = &ex;
  }
  const auto groups = sample_without_replacement(static_cast<std::size_t>(ds.n_groups()),
                                                 static_cast<std::size_t>(n_sample), seed, "group-snapshot");

  // One clean example per fiber member of every sampled group.
  std::vector<Example> queries;
  std::vector<int> owner;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const Example* b = base[groups[gi]];
    if (!b) throw std::invalid_argument("group_snapshot: group without examples");
    for (const FiberEntry& f : ds.fiber_index[groups[gi]]) {
      Example q = *b;
      q.z = f.z;
      q.z2 = f.z2;
      q.a = f.a;
      q.corrupted = false;
      tokenize(q, b->direction);
      queries.push_back(std::move(q));
      owner.push_back(static_cast<int>(gi));
    }
  }

  // Greedy decoding: fill target positions left to right from the model's
  // own argmax predictions.
  Engine<float> engine(model.arch);
  std::vector<float> logits;
  std::vector<int> correct(queries.size(), 1);
  const int vocab = model.arch.vocab_size;
  for (std::size_t lo = 0; lo < queries.size(); lo += kChunk) {
    const std::size_t hi = std::min(queries.size(), lo + kChunk);
    std::vector<Example> work(queries.begin() + static_cast<std::ptrdiff_t>(lo),
                              queries.begin() + static_cast<std::ptrdiff_t>(hi));
    const int t_len = static_cast<int>(work.front().token_seq.size());
    for (int t = 1; t < t_len; ++t) {
      if (!work.front().loss_mask[static_cast<std::size_t>(t)]) continue;
      const TokenBatch batch = make_batch(work);
      Engine<float>::Request req;
      req.logits = &logits;
      engine.run(model.params, batch, req);
      for (std::size_t s = 0; s < work.size(); ++s) {
        const float* row = logits.data() + (s * static_cast<std::size_t>(t_len) + static_cast<std::size_t>(t - 1)) *
                                               static_cast<std::size_t>(vocab);
        const int pred = static_cast<int>(std::max_element(row, row + vocab) - row);
        if (pred != queries[lo + s].token_seq[static_cast<std::size_t>(t)]) correct[lo + s] = 0;
        work[s].token_seq[static_cast<std::size_t>(t)] = pred;
      }
    }
  }

  std::vector<int> hits(groups.size(), 0), total(groups.size(), 0);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    hits[static_cast<std::size_t>(owner[i])] += correct[i];
    total[static_cast<std::size_t>(owner[i])] += 1;
  }
  GroupSnapshot snap;
  snap.step = step;
  snap.sampled_groups = n_sample;
  int ge80 = 0, full = 0;
  double acc_sum = 0.0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double acc = static_cast<double>(hits[g]) / total[g];
    acc_sum += acc;
    if (acc >= 0.8) ++ge80;
    if (hits[g] == total[g]) ++full;
  }
  snap.frac_ge_80 = static_cast<double>(ge80) / n_sample;
  snap.frac_100 = static_cast<double>(full) / n_sample;
  snap.mean_accuracy = acc_sum / n_sample;
  return snap;
}

PowerResult power_iteration(const SymmetricOperator& op, int iters, std::uint64_t seed, std::optional<double> shift) {
  if (iters < 1) throw std::invalid_argument("power_iteration: iters must be >= 1");
  Rng rng(seed, "power-iteration", shift ? 1 : 0);
  std::vector<double> v(op.dim);
  for (double& x : v) x = rng.normal();
  double nv = std::sqrt(dot(v, v));
  for (double& x : v) x /= nv;

  PowerResult out;
  std::vector<double> av;
  for (int it = 0; it < iters; ++it) {
    av = op.apply(v);
    const double lambda = dot(v, av);
    double r2 = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double r = av[i] - lambda * v[i];
      r2 += r * r;
    }
    out.eigenvalue = lambda;
    out.residual = std::sqrt(r2);
    out.vector = v;
    if (it + 1 == iters) break;
    // Next iterate: A v, or (s I - A) v under a shift.
    std::vector<double>& w = av;
    if (shift) {
      for (std::size_t i = 0; i < v.size(); ++i) w[i] = *shift * v[i] - av[i];
    }
    const double nw = std::sqrt(dot(w, w));
    if (nw == 0.0) break;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] / nw;
  }
  return out;
}

HessianProbe hessian_extremes(const SymmetricOperator& op, int iters, std::uint64_t seed) {
  HessianProbe p;
  p.iters = iters;
  const PowerResult top = power_iteration(op, iters, seed);
  const double c = 1.05 * std::abs(top.eigenvalue);
  const PowerResult bottom = power_iteration(op, iters, seed, c);
  p.lambda_max = top.eigenvalue;
  p.lambda_min = std::min(bottom.eigenvalue, top.eigenvalue);
  p.residual_max = top.residual;
  p.residual_min = bottom.residual;
  p.anisotropy = p.lambda_min == 0.0 ? std::numeric_limits<double>::infinity()
                                      : std::abs(p.lambda_max / p.lambda_min);
  p.flagged = p.residual_max > 0.1 || p.residual_min > 0.1;
  return p;
}

HessianProbe hessian_extremes(const ModelState& model, const Dataset& ds, std::uint64_t seed, int iters,
                              int probe_batch, std::int64_t step) {
  if (!model.all_finite()) throw std::invalid_argument("hessian_extremes: model has non-finite parameters");
  if (probe_batch < 1) throw std::invalid_argument("hessian_extremes: probe_batch must be positive");
  const auto idx = sample_without_replacement(ds.size(), static_cast<std::size_t>(probe_batch), seed, "hessian-batch");
  HessianOperator H(model, make_batch(ds, idx));
  SymmetricOperator op{H.dim(), [&H](std::span<const double> v) { return H.apply(v); }};
  HessianProbe p = hessian_extremes(op, iters, seed);
  p.step = step;
  p.probe_batch = static_cast<int>(idx.size());
  return p;
}

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::pre: return "pre";
    case Phase::mid: return "mid";
    case Phase::post: return "post";
  }
  return "?";
}

Phase phase_from_string(std::string_view s) {
  if (s == "pre") return Phase::pre;
  if (s == "mid") return Phase::mid;
  if (s == "post") return Phase::post;
  throw std::invalid_argument("unknown phase '" + std::string(s) + "'");
}

double AblationReport::max_delta() const {
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& h : heads) m = std::max(m, h.delta_loss);
  return m;
}

AblationReport ablate_heads(const ModelState& model, const Dataset& ds, Phase phase, std::int64_t step,
                            std::uint64_t eval_seed) {
  if (model.arch.family != Family::transformer) {
    throw std::invalid_argument("ablate_heads: architecture family " + std::string(to_string(model.arch.family)) +
                                " has no attention heads");
  }
  const std::vector<Example> eval = eval_examples(ds, eval_seed);
  Engine<float> engine(model.arch);
  AblationReport rep;
  rep.phase = phase;
  rep.step = step;
  rep.baseline_loss = mean_example_loss(engine, model.params, eval);
  for (int l = 0; l < model.arch.n_layers; ++l) {
    for (int h = 0; h < model.arch.n_heads; ++h) {
      AblationMask mask;
      mask.zeroed_heads.insert({l, h});
      const double loss = mean_example_loss(engine, model.params, eval, &mask);
      rep.heads.push_back({l, h, loss - rep.baseline_loss});
    }
  }
  return rep;
}

std::vector<DirectionConsistency> direction_consistency(std::span<const std::int64_t> steps,
                                                        std::span<const std::vector<float>> thetas) {
  if (steps.size() != thetas.size()) throw std::invalid_argument("direction_consistency: size mismatch");
  if (thetas.size() < 3) throw std::invalid_argument("direction_consistency: need at least 3 checkpoints");
  DirectionTracker tracker;
  for (std::size_t i = 0; i < thetas.size(); ++i) tracker.push(steps[i], thetas[i]);
  return tracker.results();
}

void DirectionTracker::push(std::int64_t step, std::span<const float> theta) {
  if (have_theta_) {
    if (theta.size() != last_theta_.size()) throw std::invalid_argument("DirectionTracker: dimension changed");
    std::vector<double> delta(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
      delta[i] = static_cast<double>(theta[i]) - static_cast<double>(last_theta_[i]);
    }
    if (have_delta_) {
      const double na = std::sqrt(dot(delta, delta));
      const double nb = std::sqrt(dot(last_delta_, last_delta_));
      DirectionConsistency rec;
      rec.step = last_step_;
      if (na > 0.0 && nb > 0.0) rec.cosine = dot(delta, last_delta_) / (na * nb);
      results_.push_back(rec);
    }
    last_delta_ = std::move(delta);
    have_delta_ = true;
  }
  last_theta_.assign(theta.begin(), theta.end());
  last_step_ = step;
  have_theta_ = true;
}

DissipationResult dissipation(std::span<const MetricsRecord> stream, std::int64_t tau_steps, double eta) {
  if (tau_steps < 0) throw std::invalid_argument("dissipation: tau must be confirmed");
  DissipationResult out;
  out.window_lo = tau_steps / 2;
  out.window_hi = 2 * tau_steps;
  // Each measurement stands for the steps since the previous one.
  for (std::size_t i = 1; i < stream.size(); ++i) {
    const std::int64_t s = stream[i].step;
    if (s <= out.window_lo || s > out.window_hi) continue;
    const double lr = eta > 0.0 ? eta : stream[i].lr_now;
    const auto cadence = static_cast<double>(s - stream[i - 1].step);
    out.Q += lr * stream[i].grad_norm * stream[i].grad_norm * cadence;
    ++out.measurements;
  }
  out.partial = stream.empty() || stream.front().step > out.window_lo || stream.back().step < out.window_hi;
  return out;
}

std::vector<std::size_t> eval_indices(const Dataset& ds, std::uint64_t seed) {
  return sample_without_replacement(ds.size(), kEvalCap, seed, "eval-subset");
}

std::vector<Example> eval_examples(const Dataset& ds, std::uint64_t seed) {
  std::vector<Example> out;
  for (std::size_t i : eval_indices(ds, seed)) out.push_back(ds.examples[i]);
  return out;
}

}  // namespace plab
