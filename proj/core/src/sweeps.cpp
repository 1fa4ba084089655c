#include "plab/sweeps.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "plab/io.hpp"
#include "plab/records.hpp"

namespace plab {

namespace fs = std::filesystem;

namespace {

constexpr std::pair<SweepFamily, std::string_view> kFamilies[] = {
    {SweepFamily::d_sweep, "d_sweep"},
    {SweepFamily::fixed_d_control, "fixed_d_control"},
    {SweepFamily::batch_sweep, "batch_sweep"},
    {SweepFamily::lr_sweep, "lr_sweep"},
    {SweepFamily::noise_sweep, "noise_sweep"},
    {SweepFamily::selector_sweep, "selector_sweep"},
    {SweepFamily::arch_sweep, "arch_sweep"},
    {SweepFamily::phase_boundary, "phase_boundary"},
    {SweepFamily::asymmetry, "asymmetry"},
    {SweepFamily::hierarchical, "hierarchical"},
    {SweepFamily::multi_seed, "multi_seed"},
};

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw std::invalid_argument("plan: empty element in list '" + v + "'");
    out.push_back(item);
  }
  return out;
}

int to_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  const long long x = std::stoll(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("plan: " + key + " expects an integer, got '" + v + "'");
  return static_cast<int>(x);
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  const double x = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("plan: " + key + " expects a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("plan: " + key + " expects true/false, got '" + v + "'");
}

// Applies one scalar assignment. task.D is handled by the caller.
void apply_key(GridPoint& p, const std::string& key, const std::string& v) {
  auto hier = [&]() -> HierarchicalTaskSpec& {
    if (!p.hierarchy) p.hierarchy = HierarchicalTaskSpec{};
    return *p.hierarchy;
  };
  if (key == "task.n_b") p.task.n_b = to_int(key, v);
  else if (key == "task.K") p.task.K = to_int(key, v);
  else if (key == "task.len_b") p.task.len_b = to_int(key, v);
  else if (key == "task.len_a") p.task.len_a = to_int(key, v);
  else if (key == "task.len_z") p.task.len_z = to_int(key, v);
  else if (key == "task.alphabet_size") p.task.alphabet_size = to_int(key, v);
  else if (key == "task.noise") p.task.noise_rate = to_double(key, v);
  else if (key == "task.direction") p.task.direction = direction_from_string(v);
  else if (key == "hier.n_b") hier().n_b = to_int(key, v);
  else if (key == "hier.K1") hier().K1 = to_int(key, v);
  else if (key == "hier.K2") hier().K2 = to_int(key, v);
  else if (key == "hier.len_b") hier().len_b = to_int(key, v);
  else if (key == "hier.len_a") hier().len_a = to_int(key, v);
  else if (key == "hier.len_z1") hier().len_z1 = to_int(key, v);
  else if (key == "hier.len_z2") hier().len_z2 = to_int(key, v);
  else if (key == "arch.family") p.arch.family = family_from_string(v);
  else if (key == "arch.n_layers") p.arch.n_layers = to_int(key, v);
  else if (key == "arch.d_model") p.arch.d_model = to_int(key, v);
  else if (key == "arch.n_heads") p.arch.n_heads = to_int(key, v);
  else if (key == "arch.d_mlp") p.arch.d_mlp = to_int(key, v);
  else if (key == "arch.max_seq_len") p.arch.max_seq_len = to_int(key, v);
  else if (key == "train.lr") p.train.lr = to_double(key, v);
  else if (key == "train.batch_size") p.train.batch_size = to_int(key, v);
  else if (key == "train.max_steps") p.train.max_steps = to_int(key, v);
  else if (key == "train.warmup_steps") p.train.warmup_steps = to_int(key, v);
  else if (key == "train.beta1") p.train.beta1 = to_double(key, v);
  else if (key == "train.beta2") p.train.beta2 = to_double(key, v);
  else if (key == "train.weight_decay") p.train.weight_decay = to_double(key, v);
  else if (key == "train.eps") p.train.eps = to_double(key, v);
  else if (key == "train.eval_every") p.train.eval_every = to_int(key, v);
  else if (key == "train.checkpoint_every") p.train.checkpoint_every = to_int(key, v);
  else if (key == "probes.alpha") p.probes.alpha = to_double(key, v);
  else if (key == "probes.tau_events") p.probes.tau_events = to_bool(key, v);
  else if (key == "probes.snapshot_every") p.probes.snapshot_every = to_int(key, v);
  else if (key == "probes.stop_after_tau") p.probes.stop_after_tau = to_double(key, v);
  else if (key == "probes.early_stop_loss") p.probes.early_stop_loss = to_double(key, v);
  else if (key == "probes.early_stop_evals") p.probes.early_stop_evals = to_int(key, v);
  else if (key == "probes.direction_every") p.probes.direction_every = to_int(key, v);
  else throw std::invalid_argument("plan: unknown key '" + key + "'");
}

struct Block {
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;
};

std::string short_key(const std::string& key) {
  const auto dot = key.rfind('.');
  return dot == std::string::npos ? key : key.substr(dot + 1);
}

void expand_block(const Block& globals, const Block& block, std::vector<GridPoint>& out) {
  // Section keys override global keys of the same name.
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;
  for (const auto& e : globals.entries) {
    const bool overridden = std::any_of(block.entries.begin(), block.entries.end(),
                                        [&](const auto& b) { return b.first == e.first; });
    if (!overridden) entries.push_back(e);
  }
  entries.insert(entries.end(), block.entries.begin(), block.entries.end());

  std::vector<std::size_t> idx(entries.size(), 0);
  while (true) {
    GridPoint p;
    std::optional<double> D;
    std::string label;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const auto& [key, values] = entries[i];
      const std::string& v = values[idx[i]];
      if (values.size() > 1) label += (label.empty() ? "" : ",") + short_key(key) + "=" + v;
      if (key == "task.D") D = to_double(key, v);
      else apply_key(p, key, v);
    }
    if (D) {
      if (p.hierarchy) {
        p.hierarchy->n_b = static_cast<int>(std::lround(*D / (p.hierarchy->K1 * p.hierarchy->K2)));
      } else {
        p.task.n_b = static_cast<int>(std::lround(*D / p.task.K));
      }
    }
    p.label = label;
    out.push_back(p);
    // Odometer, last axis fastest.
    std::size_t k = entries.size();
    while (k > 0) {
      --k;
      if (++idx[k] < entries[k].second.size()) break;
      idx[k] = 0;
      if (k == 0) return;
    }
    if (entries.empty()) return;
  }
}

std::string sanitize(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') o += c;
    else if (c == '=') o += '-';
    else o += '_';
  }
  return o;
}

std::string fmt_value(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", x);
  return buf;
}

}  // namespace

std::string_view to_string(SweepFamily f) {
  for (const auto& [k, v] : kFamilies) {
    if (k == f) return v;
  }
  return "?";
}

SweepFamily sweep_family_from_string(std::string_view s) {
  for (const auto& [k, v] : kFamilies) {
    if (v == s) return k;
  }
  throw std::invalid_argument("unknown sweep family '" + std::string(s) + "'");
}

SweepPlan parse_plan(const std::string& text) {
  SweepPlan plan;
  Block globals;
  std::vector<Block> sections;
  bool seeds_set = false;
  std::stringstream ss(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line == "[point]") {
      sections.emplace_back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("plan line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw std::invalid_argument("plan line " + std::to_string(line_no) + ": empty key or value");
    }
    try {
      if (key == "name") {
        plan.name = value;
      } else if (key == "family") {
        plan.family = sweep_family_from_string(value);
      } else if (key == "seeds") {
        plan.seeds.clear();
        for (const auto& s : split_list(value)) plan.seeds.push_back(std::stoull(s));
        seeds_set = true;
      } else {
        // Validate the key with a throwaway point.
        GridPoint probe;
        for (const auto& v : split_list(value)) {
          if (key != "task.D") apply_key(probe, key, v);
        }
        Block& target = sections.empty() ? globals : sections.back();
        target.entries.emplace_back(key, split_list(value));
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("plan line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!seeds_set && plan.family == SweepFamily::multi_seed) plan.seeds = {7, 42, 123};
  if (plan.seeds.empty()) throw std::invalid_argument("plan: seeds must not be empty");
  if (sections.empty()) {
    if (!globals.entries.empty()) expand_block({}, globals, plan.grid);
  } else {
    for (const auto& s : sections) expand_block(globals, s, plan.grid);
  }
  return plan;
}

SweepPlan load_plan(const fs::path& path) { return parse_plan(read_file(path)); }

std::string plan_to_text(const SweepPlan& plan) {
  std::ostringstream os;
  os << "name = " << plan.name << "\n";
  os << "family = " << to_string(plan.family) << "\n";
  os << "seeds = ";
  for (std::size_t i = 0; i < plan.seeds.size(); ++i) os << (i ? ", " : "") << plan.seeds[i];
  os << "\n";
  for (const auto& p : plan.grid) {
    os << "\n[point]\n";
    const auto& t = p.task;
    os << "task.n_b = " << t.n_b << "\ntask.K = " << t.K << "\ntask.len_b = " << t.len_b << "\ntask.len_a = " << t.len_a
       << "\ntask.len_z = " << t.len_z << "\ntask.alphabet_size = " << t.alphabet_size
       << "\ntask.noise = " << fmt_value(t.noise_rate) << "\ntask.direction = " << to_string(t.direction) << "\n";
    if (p.hierarchy) {
      const auto& h = *p.hierarchy;
      os << "hier.n_b = " << h.n_b << "\nhier.K1 = " << h.K1 << "\nhier.K2 = " << h.K2 << "\nhier.len_b = " << h.len_b
         << "\nhier.len_a = " << h.len_a << "\nhier.len_z1 = " << h.len_z1 << "\nhier.len_z2 = " << h.len_z2 << "\n";
    }
    const auto& a = p.arch;
    os << "arch.family = " << to_string(a.family) << "\narch.n_layers = " << a.n_layers << "\narch.d_model = "
       << a.d_model << "\narch.n_heads = " << a.n_heads << "\narch.d_mlp = " << a.d_mlp
       << "\narch.max_seq_len = " << a.max_seq_len << "\n";
    const auto& c = p.train;
    os << "train.lr = " << fmt_value(c.lr) << "\ntrain.batch_size = " << c.batch_size << "\ntrain.max_steps = "
       << c.max_steps << "\ntrain.warmup_steps = " << c.warmup_steps << "\ntrain.beta1 = " << fmt_value(c.beta1)
       << "\ntrain.beta2 = " << fmt_value(c.beta2) << "\ntrain.weight_decay = " << fmt_value(c.weight_decay)
       << "\ntrain.eps = " << fmt_value(c.eps) << "\ntrain.eval_every = " << c.eval_every
       << "\ntrain.checkpoint_every = " << c.checkpoint_every << "\n";
    const auto& q = p.probes;
    os << "probes.alpha = " << fmt_value(q.alpha) << "\nprobes.tau_events = " << (q.tau_events ? "true" : "false")
       << "\nprobes.snapshot_every = " << q.snapshot_every << "\nprobes.stop_after_tau = " << fmt_value(q.stop_after_tau)
       << "\nprobes.early_stop_loss = " << fmt_value(q.early_stop_loss)
       << "\nprobes.early_stop_evals = " << q.early_stop_evals << "\nprobes.direction_every = " << q.direction_every
       << "\n";
  }
  return os.str();
}

std::vector<RunSpec> expand_runs(const SweepPlan& plan) {
  std::vector<RunSpec> out;
  std::set<std::string> ids;
  for (std::size_t i = 0; i < plan.grid.size(); ++i) {
    for (std::uint64_t seed : plan.seeds) {
      RunSpec r;
      r.point = i;
      r.seed = seed;
      r.config = plan.grid[i];
      r.config.task.seed = seed;
      if (r.config.hierarchy) r.config.hierarchy->seed = seed;
      r.config.train.seed = seed;
      char prefix[16];
      std::snprintf(prefix, sizeof(prefix), "%03zu", i);
      r.id = std::string(prefix) + (r.config.label.empty() ? "" : "_" + sanitize(r.config.label)) + "_s" +
             std::to_string(seed);
      if (!ids.insert(r.id).second) throw std::invalid_argument("plan: duplicate run id " + r.id);
      out.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

void write_sweep_manifest(const fs::path& dir, const SweepPlan& plan, const std::vector<ManifestEntry>& entries) {
  nlohmann::ordered_json j;
  j["name"] = plan.name;
  j["family"] = std::string(to_string(plan.family));
  j["runs"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    j["runs"].push_back({{"id", e.id},
                         {"label", e.label},
                         {"seed", e.seed},
                         {"dir", e.dir},
                         {"status", e.status},
                         {"message", e.message}});
  }
  write_file_atomic(dir / "manifest.json", j.dump(1) + "\n");
}

std::string record_status(const fs::path& run_dir) {
  const auto r = nlohmann::json::parse(read_file(run_dir / "record.json"));
  return r.at("status").get<std::string>();
}

Dataset make_dataset(const GridPoint& p) {
  Dataset ds = p.hierarchy ? generate_hierarchical(*p.hierarchy) : generate(p.task);
  return ds;
}

}  // namespace

SweepResult run_sweep(const SweepPlan& plan, const fs::path& dir, int parallelism, bool resume) {
  if (parallelism < 1) throw std::invalid_argument("run_sweep: parallelism must be >= 1");
  for (const auto& p : plan.grid) {
    p.arch.validate();
    p.train.validate();
    if (p.hierarchy) p.hierarchy->validate();
    else p.task.validate();
  }
  const std::vector<RunSpec> runs = expand_runs(plan);
  fs::create_directories(dir / "runs");
  write_file_atomic(dir / "plan.txt", plan_to_text(plan));

  SweepResult result;
  result.dir = dir;
  std::vector<std::size_t> todo;
  const bool transfer = plan.family == SweepFamily::asymmetry;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    ManifestEntry e;
    e.id = runs[i].id;
    e.label = runs[i].config.label;
    e.seed = runs[i].seed;
    e.dir = "runs/" + runs[i].id;
    e.status = "pending";
    const fs::path rd = dir / e.dir;
    const fs::path marker = transfer ? rd / "scratch" : rd;
    const bool done = transfer ? run_is_complete(rd / "pretrain") && run_is_complete(rd / "finetune") &&
                                     run_is_complete(rd / "scratch")
                               : run_is_complete(rd);
    if (resume && done) {
      e.status = record_status(marker);
    } else {
      todo.push_back(i);
    }
    result.entries.push_back(e);
  }

  std::mutex mu;
  write_sweep_manifest(dir, plan, result.entries);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      const RunSpec& spec = runs[todo[k]];
      ManifestEntry& entry = result.entries[todo[k]];
      std::string status, message;
      try {
        const fs::path rd = dir / entry.dir;
        const Dataset ds = make_dataset(spec.config);
        if (transfer) {
          const Dataset fwd = with_direction(ds, Direction::forward);
          const Dataset bwd = with_direction(ds, Direction::backward);
          RunOptions o;
          o.run_dir = rd;
          const TransferResult t = transfer_train(fwd, bwd, spec.config.arch, spec.config.train, spec.config.probes, o);
          status = std::string(to_string(t.scratch.status));
        } else {
          RunOptions o;
          o.run_dir = rd;
          const RunRecord rec = train(ds, spec.config.arch, spec.config.train, spec.config.probes, o);
          status = std::string(to_string(rec.status));
          message = rec.failure;
        }
      } catch (const std::exception& e) {
        status = "error";
        message = e.what();
      }
      std::lock_guard<std::mutex> lock(mu);
      entry.status = status;
      entry.message = message;
      ++result.trained;
      write_sweep_manifest(dir, plan, result.entries);
    }
  };
  const int n_threads = std::min<int>(parallelism, static_cast<int>(std::max<std::size_t>(todo.size(), 1)));
  std::vector<std::thread> threads;
  for (int t = 1; t < n_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  write_sweep_manifest(dir, plan, result.entries);
  return result;
}

std::vector<ManifestEntry> read_manifest(const fs::path& sweep_dir) {
  const auto j = nlohmann::json::parse(read_file(sweep_dir / "manifest.json"));
  std::vector<ManifestEntry> out;
  for (const auto& r : j.at("runs")) {
    ManifestEntry e;
    e.id = r.at("id").get<std::string>();
    e.label = r.at("label").get<std::string>();
    e.seed = r.at("seed").get<std::uint64_t>();
    e.dir = r.at("dir").get<std::string>();
    e.status = r.at("status").get<std::string>();
    e.message = r.value("message", "");
    out.push_back(e);
  }
  return out;
}

SweepPlan read_sweep_plan(const fs::path& sweep_dir) { return load_plan(sweep_dir / "plan.txt"); }

SweepPlan default_plan(SweepFamily family, bool full) {
  SweepPlan plan;
  plan.family = family;
  plan.name = std::string(to_string(family)) + (full ? "-full" : "-desk");
  const int n_b = full ? 1000 : 200;
  GridPoint base;
  base.task.n_b = n_b;
  base.train.max_steps = full ? 50000 : 20000;
  base.probes.stop_after_tau = 2.0;
  auto add = [&](GridPoint p, const std::string& label) {
    p.label = label;
    plan.grid.push_back(p);
  };
  switch (family) {
    case SweepFamily::d_sweep:
      for (int K : {3, 5, 7, 10, 13, 17, 20, 25, 30, 36}) {
        GridPoint p = base;
        p.task.K = K;
        add(p, "K=" + std::to_string(K));
      }
      break;
    case SweepFamily::fixed_d_control: {
      const int D = full ? 10000 : 2000;
      for (int K : {5, 10, 20, 36}) {
        GridPoint p = base;
        p.task.K = K;
        p.task.n_b = static_cast<int>(std::lround(static_cast<double>(D) / K));
        add(p, "K=" + std::to_string(K));
      }
      break;
    }
    case SweepFamily::batch_sweep:
      for (int B : {32, 64, 128, 256, 512}) {
        GridPoint p = base;
        p.task.K = full ? 20 : 10;
        p.train.batch_size = B;
        p.train.max_steps = full ? 100000 : 40000;
        add(p, "batch_size=" + std::to_string(B));
      }
      break;
    case SweepFamily::lr_sweep:
      for (double lr : {3e-4, 5e-4, 1e-3, 2e-3}) {
        GridPoint p = base;
        p.task.K = full ? 20 : 10;
        p.train.lr = lr;
        add(p, "lr=" + fmt_value(lr));
      }
      break;
    case SweepFamily::noise_sweep:
      for (double q : {0.0, 0.1, 0.2}) {
        GridPoint p = base;
        p.task.K = full ? 20 : 10;
        p.task.noise_rate = q;
        p.train.max_steps = full ? 100000 : 40000;
        add(p, "noise=" + fmt_value(q));
      }
      break;
    case SweepFamily::selector_sweep:
      for (int lz : {1, 2, 3, 4}) {
        GridPoint p = base;
        p.task.K = 10;
        p.task.len_z = lz;
        p.arch.max_seq_len = 20;
        add(p, "len_z=" + std::to_string(lz));
      }
      break;
    case SweepFamily::arch_sweep:
      for (Family f : {Family::transformer, Family::gated_mlp, Family::rnn, Family::linear}) {
        for (int K : {3, 5, 10, 20}) {
          GridPoint p = base;
          p.arch.family = f;
          p.task.K = K;
          if (f == Family::linear) p.train.max_steps = full ? 30000 : 10000;
          add(p, "family=" + std::string(to_string(f)) + ",K=" + std::to_string(K));
        }
      }
      break;
    case SweepFamily::phase_boundary:
      plan.seeds = {7, 42, 123};
      for (int K : {5, 10, 20, 36}) {
        for (double lr : {1e-3, 1.5e-3, 2e-3, 3e-3, 4e-3, 5e-3, 7e-3, 1e-2, 1.5e-2}) {
          GridPoint p = base;
          p.task.K = K;
          p.train.lr = lr;
          p.train.max_steps = full ? 50000 : 20000;
          p.probes.tau_events = false;
          p.probes.stop_after_tau = 0.0;
          p.probes.direction_every = 0;
          // Converged runs stop early; the classification only needs loss < 0.1.
          p.probes.early_stop_loss = kConvergedLoss;
          p.probes.early_stop_evals = 1;
          add(p, "K=" + std::to_string(K) + ",lr=" + fmt_value(lr));
        }
      }
      break;
    case SweepFamily::asymmetry:
      for (int K : full ? std::vector<int>{5, 10, 20, 36} : std::vector<int>{5, 10}) {
        GridPoint p = base;
        p.task.K = K;
        add(p, "K=" + std::to_string(K));
      }
      break;
    case SweepFamily::hierarchical: {
      GridPoint p = base;
      HierarchicalTaskSpec h;
      h.n_b = n_b;
      h.K1 = 5;
      h.K2 = 4;
      p.hierarchy = h;
      p.arch.max_seq_len = 20;
      add(p, "");
      break;
    }
    case SweepFamily::multi_seed: {
      plan.seeds = {7, 42, 123};
      const std::vector<std::pair<int, std::vector<double>>> rows = {
          {5, {5e-3, 7e-3, 1e-2}}, {10, {3e-3, 5e-3, 7e-3}}, {20, {2e-3, 3e-3}}, {36, {1e-3}}};
      for (const auto& [K, lrs] : rows) {
        for (double lr : lrs) {
          GridPoint p = base;
          p.task.K = K;
          p.train.lr = lr;
          add(p, "K=" + std::to_string(K) + ",lr=" + fmt_value(lr));
        }
      }
      break;
    }
  }
  return plan;
}

bool converged(const RunRecord& rec) {
  if (rec.status == RunStatus::failed) return false;
  return std::any_of(rec.metrics.begin(), rec.metrics.end(),
                     [](const MetricsRecord& r) { return r.eval_loss < kConvergedLoss; });
}

PhaseBoundaryResult phase_boundary(const std::vector<BoundaryObservation>& obs, int resamples, std::uint64_t seed) {
  std::map<int, std::map<double, std::vector<bool>>> table;
  for (const auto& o : obs) table[o.K][o.lr].push_back(o.converged);
  PhaseBoundaryResult res;
  std::vector<std::pair<double, double>> pts;
  for (const auto& [K, by_lr] : table) {
    BoundaryRow row;
    row.K = K;
    std::optional<double> first_fail;
    for (const auto& [lr, conv] : by_lr) {
      if (conv.size() < 2) throw std::invalid_argument("phase_boundary: need at least 2 seeds per (K, lr)");
      const bool all = std::all_of(conv.begin(), conv.end(), [](bool b) { return b; });
      if (all) {
        if (first_fail) row.monotonicity_violation = true;
        row.max_all_succeed = lr;
      } else if (!first_fail) {
        first_fail = lr;
      }
    }
    row.min_any_fail = first_fail;
    row.undefined = !row.max_all_succeed.has_value();
    row.open_above = !row.min_any_fail.has_value();
    // With a violation the largest success can sit above the first failure;
    // the bracket then uses the first failure above the largest success.
    if (row.max_all_succeed && row.monotonicity_violation) {
      row.min_any_fail.reset();
      for (const auto& [lr, conv] : by_lr) {
        if (lr > *row.max_all_succeed && !std::all_of(conv.begin(), conv.end(), [](bool b) { return b; })) {
          row.min_any_fail = lr;
          break;
        }
      }
      row.open_above = !row.min_any_fail.has_value();
    }
    if (row.max_all_succeed && row.min_any_fail) {
      row.eta_star = std::sqrt(*row.max_all_succeed * *row.min_any_fail);
      pts.emplace_back(static_cast<double>(K), *row.eta_star);
    }
    res.rows.push_back(row);
  }
  if (pts.size() >= 3) res.fit = fit_power_law(pts, resamples, seed);
  return res;
}

std::vector<BoundaryObservation> boundary_observations(const fs::path& sweep_dir) {
  std::vector<BoundaryObservation> out;
  for (const auto& e : read_manifest(sweep_dir)) {
    if (e.status == "pending" || e.status == "error") continue;
    const RunRecord rec = load_run(sweep_dir / e.dir);
    out.push_back({rec.task.K, rec.config.lr, e.seed, converged(rec)});
  }
  return out;
}

AsymmetryRow asymmetry_row(int K, const TransferResult& t, double alpha) {
  AsymmetryRow row;
  row.K = K;
  const TauEstimate fwd = detect_tau(t.pretrain.metrics, K, alpha, t.pretrain.config.batch_size);
  const TauEstimate bwd = detect_tau(t.scratch.metrics, K, alpha, t.scratch.config.batch_size);
  if (fwd.confirmed) row.tau_fwd = fwd.tau_steps;
  if (bwd.confirmed) row.tau_bwd = bwd.tau_steps;
  if (fwd.confirmed && bwd.confirmed && bwd.tau_steps > 0) {
    row.ratio = static_cast<double>(fwd.tau_steps) / static_cast<double>(bwd.tau_steps);
  }
  if (t.ratio_defined) row.transfer_ratio = t.ratio;
  return row;
}

std::vector<AsymmetryRow> asymmetry_suite(const std::vector<int>& Ks, const TaskSpec& base, const ArchDescriptor& arch,
                                          const TrainConfig& cfg, const ProbeSchedule& probes, const fs::path& dir) {
  std::vector<AsymmetryRow> rows;
  for (int K : Ks) {
    TaskSpec t = base;
    t.K = K;
    t.direction = Direction::backward;
    const Dataset bwd = generate(t);
    const Dataset fwd = with_direction(bwd, Direction::forward);
    RunOptions o;
    if (!dir.empty()) o.run_dir = dir / ("K" + std::to_string(K));
    rows.push_back(asymmetry_row(K, transfer_train(fwd, bwd, arch, cfg, probes, o), probes.alpha));
  }
  return rows;
}

}  // namespace plab
