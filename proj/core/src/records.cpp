#include "plab/records.hpp"

#include "json.hpp"

namespace plab {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

json parse(std::string_view s) { return json::parse(s); }

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string to_json(const TaskSpec& x) {
  ojson j;
  j["n_b"] = x.n_b;
  j["K"] = x.K;
  j["len_b"] = x.len_b;
  j["len_a"] = x.len_a;
  j["len_z"] = x.len_z;
  j["alphabet_size"] = x.alphabet_size;
  j["noise_rate"] = x.noise_rate;
  j["direction"] = std::string(to_string(x.direction));
  j["seed"] = x.seed;
  return j.dump();
}

TaskSpec task_spec_from_json(std::string_view s) {
  const json j = parse(s);
  TaskSpec x;
  maybe(j, "n_b", x.n_b);
  maybe(j, "K", x.K);
  maybe(j, "len_b", x.len_b);
  maybe(j, "len_a", x.len_a);
  maybe(j, "len_z", x.len_z);
  maybe(j, "alphabet_size", x.alphabet_size);
  maybe(j, "noise_rate", x.noise_rate);
  if (j.contains("direction")) x.direction = direction_from_string(j.at("direction").get<std::string>());
  maybe(j, "seed", x.seed);
  return x;
}

std::string to_json(const HierarchicalTaskSpec& x) {
  ojson j;
  j["n_b"] = x.n_b;
  j["K1"] = x.K1;
  j["K2"] = x.K2;
  j["len_b"] = x.len_b;
  j["len_a"] = x.len_a;
  j["len_z1"] = x.len_z1;
  j["len_z2"] = x.len_z2;
  j["seed"] = x.seed;
  return j.dump();
}

HierarchicalTaskSpec hierarchical_spec_from_json(std::string_view s) {
  const json j = parse(s);
  HierarchicalTaskSpec x;
  maybe(j, "n_b", x.n_b);
  maybe(j, "K1", x.K1);
  maybe(j, "K2", x.K2);
  maybe(j, "len_b", x.len_b);
  maybe(j, "len_a", x.len_a);
  maybe(j, "len_z1", x.len_z1);
  maybe(j, "len_z2", x.len_z2);
  maybe(j, "seed", x.seed);
  return x;
}

std::string to_json(const ArchDescriptor& x) {
  ojson j;
  j["family"] = std::string(to_string(x.family));
  j["n_layers"] = x.n_layers;
  j["d_model"] = x.d_model;
  j["n_heads"] = x.n_heads;
  j["d_mlp"] = x.d_mlp;
  j["vocab_size"] = x.vocab_size;
  j["max_seq_len"] = x.max_seq_len;
  j["param_count"] = ParamLayout(x).total();
  return j.dump();
}

ArchDescriptor arch_from_json(std::string_view s) {
  const json j = parse(s);
  ArchDescriptor x;
  if (j.contains("family")) x.family = family_from_string(j.at("family").get<std::string>());
  maybe(j, "n_layers", x.n_layers);
  maybe(j, "d_model", x.d_model);
  maybe(j, "n_heads", x.n_heads);
  maybe(j, "d_mlp", x.d_mlp);
  maybe(j, "vocab_size", x.vocab_size);
  maybe(j, "max_seq_len", x.max_seq_len);
  return x;
}

std::string to_json(const TrainConfig& x) {
  ojson j;
  j["lr"] = x.lr;
  j["batch_size"] = x.batch_size;
  j["max_steps"] = x.max_steps;
  j["warmup_steps"] = x.warmup_steps;
  j["beta1"] = x.beta1;
  j["beta2"] = x.beta2;
  j["weight_decay"] = x.weight_decay;
  j["eps"] = x.eps;
  j["eval_every"] = x.eval_every;
  j["checkpoint_every"] = x.checkpoint_every;
  j["seed"] = x.seed;
  return j.dump();
}

TrainConfig train_config_from_json(std::string_view s) {
  const json j = parse(s);
  TrainConfig x;
  maybe(j, "lr", x.lr);
  maybe(j, "batch_size", x.batch_size);
  maybe(j, "max_steps", x.max_steps);
  maybe(j, "warmup_steps", x.warmup_steps);
  maybe(j, "beta1", x.beta1);
  maybe(j, "beta2", x.beta2);
  maybe(j, "weight_decay", x.weight_decay);
  maybe(j, "eps", x.eps);
  maybe(j, "eval_every", x.eval_every);
  maybe(j, "checkpoint_every", x.checkpoint_every);
  maybe(j, "seed", x.seed);
  return x;
}

std::string to_json(const ProbeSchedule& x) {
  ojson j;
  j["alpha"] = x.alpha;
  j["tau_events"] = x.tau_events;
  j["snapshot_every"] = x.snapshot_every;
  j["stop_after_tau"] = x.stop_after_tau;
  j["early_stop_loss"] = x.early_stop_loss;
  j["early_stop_evals"] = x.early_stop_evals;
  j["direction_every"] = x.direction_every;
  return j.dump();
}

ProbeSchedule probe_schedule_from_json(std::string_view s) {
  const json j = parse(s);
  ProbeSchedule x;
  maybe(j, "alpha", x.alpha);
  maybe(j, "tau_events", x.tau_events);
  maybe(j, "snapshot_every", x.snapshot_every);
  maybe(j, "stop_after_tau", x.stop_after_tau);
  maybe(j, "early_stop_loss", x.early_stop_loss);
  maybe(j, "early_stop_evals", x.early_stop_evals);
  maybe(j, "direction_every", x.direction_every);
  return x;
}

std::string to_json(const TauEstimate& x) {
  ojson j;
  j["tau_steps"] = x.tau_steps;
  j["tau_tokens"] = x.tau_tokens;
  j["alpha"] = x.alpha;
  j["confirmed"] = x.confirmed;
  j["raw_crossing"] = x.raw_crossing;
  return j.dump();
}

TauEstimate tau_from_json(std::string_view s) {
  const json j = parse(s);
  TauEstimate x;
  maybe(j, "tau_steps", x.tau_steps);
  maybe(j, "tau_tokens", x.tau_tokens);
  maybe(j, "alpha", x.alpha);
  maybe(j, "confirmed", x.confirmed);
  maybe(j, "raw_crossing", x.raw_crossing);
  return x;
}

std::string to_json(const DeltaZOnset& x) {
  ojson j;
  j["onset_step"] = x.onset_step;
  j["found"] = x.found;
  j["lead_fraction"] = x.lead_fraction;
  return j.dump();
}

std::string to_json(const GroupSnapshot& x) {
  ojson j;
  j["step"] = x.step;
  j["sampled_groups"] = x.sampled_groups;
  j["frac_ge_80"] = x.frac_ge_80;
  j["frac_100"] = x.frac_100;
  j["mean_accuracy"] = x.mean_accuracy;
  return j.dump();
}

std::string to_json(const HessianProbe& x) {
  ojson j;
  j["step"] = x.step;
  j["lambda_max"] = x.lambda_max;
  j["lambda_min"] = x.lambda_min;
  j["anisotropy"] = x.anisotropy;
  j["residual_max"] = x.residual_max;
  j["residual_min"] = x.residual_min;
  j["iters"] = x.iters;
  j["probe_batch"] = x.probe_batch;
  j["flagged"] = x.flagged;
  j["hvp_eps0"] = kHvpEps0;
  j["shift_factor"] = 1.05;
  return j.dump();
}

std::string to_json(const AblationReport& x) {
  ojson j;
  j["phase"] = std::string(to_string(x.phase));
  j["step"] = x.step;
  j["baseline_loss"] = x.baseline_loss;
  ojson heads = ojson::array();
  for (const auto& h : x.heads) {
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"delta_loss", h.delta_loss}});
  }
  j["heads"] = std::move(heads);
  return j.dump();
}

std::string to_json(const DirectionConsistency& x) {
  ojson j;
  j["step"] = x.step;
  if (x.cosine) {
    j["cosine"] = *x.cosine;
  } else {
    j["cosine"] = nullptr;
  }
  return j.dump();
}

DirectionConsistency direction_from_json(std::string_view s) {
  const json j = parse(s);
  DirectionConsistency x;
  x.step = j.at("step").get<std::int64_t>();
  if (!j.at("cosine").is_null()) x.cosine = j.at("cosine").get<double>();
  return x;
}

std::string to_json(const DissipationResult& x) {
  ojson j;
  j["Q"] = x.Q;
  j["window_lo"] = x.window_lo;
  j["window_hi"] = x.window_hi;
  j["measurements"] = x.measurements;
  j["partial"] = x.partial;
  return j.dump();
}

}  // namespace plab
