#include "plab/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "plab/rng.hpp"

namespace plab {

std::string_view to_string(Direction d) { return d == Direction::backward ? "backward" : "forward"; }

Direction direction_from_string(std::string_view s) {
  if (s == "backward") return Direction::backward;
  if (s == "forward") return Direction::forward;
  throw std::invalid_argument("unknown direction: " + std::string(s));
}

namespace {

// alphabet^len, saturating at 2^62.
std::uint64_t space_size(int alphabet, int len) {
  std::uint64_t s = 1;
  for (int i = 0; i < len; ++i) {
    if (s > (std::uint64_t{1} << 62) / static_cast<std::uint64_t>(alphabet)) return std::uint64_t{1} << 62;
    s *= static_cast<std::uint64_t>(alphabet);
  }
  return s;
}

// Index -> string, most significant symbol first, so index order is
// lexicographic order.
std::string index_to_string(std::uint64_t idx, int len, int alphabet) {
  std::string s(static_cast<std::size_t>(len), '0');
  for (int i = len - 1; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = kAlphabet[idx % static_cast<std::uint64_t>(alphabet)];
    idx /= static_cast<std::uint64_t>(alphabet);
  }
  return s;
}

std::vector<std::string> sample_distinct(std::int64_t count, int len, int alphabet, Rng& rng) {
  const std::uint64_t space = space_size(alphabet, len);
  std::vector<std::uint64_t> picks;
  picks.reserve(static_cast<std::size_t>(count));
  if (space <= 4 * static_cast<std::uint64_t>(count) && space <= 50'000'000ULL) {
    std::vector<std::uint64_t> all(space);
    std::iota(all.begin(), all.end(), 0);
    for (std::int64_t i = 0; i < count; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(space - static_cast<std::uint64_t>(i));
      std::swap(all[static_cast<std::size_t>(i)], all[j]);
      picks.push_back(all[static_cast<std::size_t>(i)]);
    }
  } else {
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(static_cast<std::size_t>(count) * 2);
    while (static_cast<std::int64_t>(picks.size()) < count) {
      const std::uint64_t x = rng.below(space);
      if (seen.insert(x).second) picks.push_back(x);
    }
  }
  std::vector<std::string> out;
  out.reserve(picks.size());
  for (auto p : picks) out.push_back(index_to_string(p, len, alphabet));
  return out;
}

void append_symbols(std::vector<std::int32_t>& seq, const std::string& s) {
  for (char c : s) seq.push_back(symbol_to_token(c));
}

void check(bool ok, const std::string& what) {
  if (!ok) throw InfeasibleSpec("infeasible task spec: " + what);
}

}  // namespace

double TaskSpec::plateau_benchmark() const { return std::log(static_cast<double>(K)); }

void TaskSpec::validate() const {
  check(n_b >= 1, "n_b must be >= 1");
  check(K >= 1, "K must be >= 1");
  check(len_b >= 1 && len_a >= 1 && len_z >= 1, "string lengths must be >= 1");
  check(alphabet_size >= 2 && alphabet_size <= kAlphabetSize, "alphabet_size must be in [2, 36]");
  check(noise_rate >= 0.0 && noise_rate < 1.0, "noise rate must lie in [0, 1)");
  check(noise_rate == 0.0 || K > 1, "label noise needs K > 1 (no alternative candidate in a fiber of one)");
  check(static_cast<std::uint64_t>(n_b) <= space_size(alphabet_size, len_b),
        "n_b = " + std::to_string(n_b) + " exceeds alphabet_size^len_b distinct base strings");
  check(static_cast<std::uint64_t>(D()) <= space_size(alphabet_size, len_a),
        "n_b * K = " + std::to_string(D()) + " exceeds alphabet_size^len_a (global target uniqueness)");
  check(static_cast<std::uint64_t>(K) <= space_size(alphabet_size, len_z),
        "K = " + std::to_string(K) + " exceeds alphabet_size^len_z (selectors cannot index the fiber)");
}

double HierarchicalTaskSpec::plateau_benchmark() const { return std::log(static_cast<double>(K1) * K2); }
double HierarchicalTaskSpec::intermediate_benchmark() const { return std::log(static_cast<double>(K2)); }

void HierarchicalTaskSpec::validate() const {
  check(n_b >= 1, "n_b must be >= 1");
  check(K1 >= 1 && K2 >= 1, "fan-outs must be >= 1");
  check(len_b >= 1 && len_a >= 1 && len_z1 >= 1 && len_z2 >= 1, "string lengths must be >= 1");
  check(static_cast<std::uint64_t>(n_b) <= space_size(kAlphabetSize, len_b), "n_b exceeds 36^len_b");
  check(static_cast<std::uint64_t>(D()) <= space_size(kAlphabetSize, len_a),
        "n_b * K1 * K2 exceeds 36^len_a (global target uniqueness)");
  check(static_cast<std::uint64_t>(K1) <= space_size(kAlphabetSize, len_z1), "K1 exceeds 36^len_z1");
  check(static_cast<std::uint64_t>(K2) <= space_size(kAlphabetSize, len_z2), "K2 exceeds 36^len_z2");
}

double Dataset::plateau_benchmark() const {
  return hierarchy ? hierarchy->plateau_benchmark() : spec.plateau_benchmark();
}

int Dataset::target_len() const {
  if (hierarchy) return hierarchy->len_a;
  return spec.direction == Direction::backward ? spec.len_a : spec.len_b;
}

void tokenize(Example& ex, Direction dir) {
  ex.direction = dir;
  auto& seq = ex.token_seq;
  seq.clear();
  seq.push_back(kBos);
  const std::string& src = dir == Direction::backward ? ex.b : ex.a;
  const std::string& dst = dir == Direction::backward ? ex.a : ex.b;
  append_symbols(seq, src);
  seq.push_back(kSep);
  append_symbols(seq, ex.z);
  seq.push_back(kSep);
  if (!ex.z2.empty()) {
    append_symbols(seq, ex.z2);
    seq.push_back(kSep);
  }
  const std::size_t first_target = seq.size();
  append_symbols(seq, dst);
  ex.loss_mask.assign(seq.size(), 0);
  std::fill(ex.loss_mask.begin() + static_cast<std::ptrdiff_t>(first_target), ex.loss_mask.end(), 1);
}

Dataset generate(const TaskSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  Rng b_rng(spec.seed, "base-strings");
  Rng a_rng(spec.seed, "targets");
  const auto bs = sample_distinct(spec.n_b, spec.len_b, spec.alphabet_size, b_rng);
  const auto as = sample_distinct(spec.D(), spec.len_a, spec.alphabet_size, a_rng);
  ds.examples.reserve(static_cast<std::size_t>(spec.D()));
  ds.fiber_index.resize(static_cast<std::size_t>(spec.n_b));
  for (int g = 0; g < spec.n_b; ++g) {
    std::vector<std::string> zs;
    for (int j = 0; j < spec.K; ++j) zs.push_back(index_to_string(static_cast<std::uint64_t>(j), spec.len_z, spec.alphabet_size));
    Rng z_rng(spec.seed, "selectors", static_cast<std::uint64_t>(g));
    z_rng.shuffle(std::span<std::string>(zs));
    for (int j = 0; j < spec.K; ++j) {
      Example ex;
      ex.b = bs[static_cast<std::size_t>(g)];
      ex.z = zs[static_cast<std::size_t>(j)];
      ex.a = as[static_cast<std::size_t>(g) * spec.K + j];
      ex.group_id = g;
      tokenize(ex, spec.direction);
      ds.fiber_index[static_cast<std::size_t>(g)].push_back({ex.z, "", ex.a});
      ds.examples.push_back(std::move(ex));
    }
  }
  if (spec.noise_rate > 0.0) {
    ds = apply_label_noise(ds, spec.noise_rate, spec.seed);
  }
  return ds;
}

Dataset apply_label_noise(const Dataset& ds, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("label noise rate must lie in [0, 1)");
  Dataset out = ds;
  if (p == 0.0) return out;
  if (ds.fiber_size() <= 1) {
    throw InfeasibleSpec("label noise needs fibers with more than one candidate (K = 1)");
  }
  out.spec.noise_rate = p;
  Rng rng(seed, "label-noise");
  for (auto& ex : out.examples) {
    if (!rng.bernoulli(p)) continue;
    const auto& fiber = out.fiber_index[static_cast<std::size_t>(ex.group_id)];
    // Pick uniformly among the fiber's other targets.
    std::size_t own = 0;
    while (own < fiber.size() && !(fiber[own].z == ex.z && fiber[own].z2 == ex.z2)) ++own;
    std::size_t pick = rng.below(fiber.size() - 1);
    if (pick >= own) ++pick;
    ex.a = fiber[pick].a;
    ex.corrupted = true;
    tokenize(ex, ex.direction);
  }
  return out;
}

Dataset generate_hierarchical(const HierarchicalTaskSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.hierarchy = spec;
  ds.spec.n_b = spec.n_b;
  ds.spec.K = spec.fiber_size();
  ds.spec.len_b = spec.len_b;
  ds.spec.len_a = spec.len_a;
  ds.spec.len_z = spec.len_z1;
  ds.spec.seed = spec.seed;
  Rng b_rng(spec.seed, "base-strings");
  Rng a_rng(spec.seed, "targets");
  const auto bs = sample_distinct(spec.n_b, spec.len_b, kAlphabetSize, b_rng);
  const auto as = sample_distinct(spec.D(), spec.len_a, kAlphabetSize, a_rng);
  ds.fiber_index.resize(static_cast<std::size_t>(spec.n_b));
  const int k = spec.fiber_size();
  for (int g = 0; g < spec.n_b; ++g) {
    std::vector<std::string> z1s;
    for (int i = 0; i < spec.K1; ++i) z1s.push_back(index_to_string(static_cast<std::uint64_t>(i), spec.len_z1, kAlphabetSize));
    Rng z1_rng(spec.seed, "selectors", static_cast<std::uint64_t>(g));
    z1_rng.shuffle(std::span<std::string>(z1s));
    for (int i = 0; i < spec.K1; ++i) {
      std::vector<std::string> z2s;
      for (int j = 0; j < spec.K2; ++j) z2s.push_back(index_to_string(static_cast<std::uint64_t>(j), spec.len_z2, kAlphabetSize));
      Rng z2_rng(spec.seed, "selectors-2", static_cast<std::uint64_t>(g) * 1'000'003ULL + static_cast<std::uint64_t>(i));
      z2_rng.shuffle(std::span<std::string>(z2s));
      for (int j = 0; j < spec.K2; ++j) {
        Example ex;
        ex.b = bs[static_cast<std::size_t>(g)];
        ex.z = z1s[static_cast<std::size_t>(i)];
        ex.z2 = z2s[static_cast<std::size_t>(j)];
        ex.a = as[static_cast<std::size_t>(g) * k + static_cast<std::size_t>(i) * spec.K2 + j];
        ex.group_id = g;
        tokenize(ex, Direction::backward);
        ds.fiber_index[static_cast<std::size_t>(g)].push_back({ex.z, ex.z2, ex.a});
        ds.examples.push_back(std::move(ex));
      }
    }
  }
  return ds;
}

Dataset with_direction(const Dataset& ds, Direction dir) {
  if (ds.hierarchy) throw std::invalid_argument("direction change is defined for flat tasks only");
  Dataset out = ds;
  out.spec.direction = dir;
  for (auto& ex : out.examples) tokenize(ex, dir);
  return out;
}

std::vector<Example> shuffle_selectors(std::span<const Example> batch, std::uint64_t seed) {
  if (batch.size() < 2) throw std::invalid_argument("selector shuffle needs a batch of at least 2 examples");
  std::vector<std::size_t> perm(batch.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed, "z-shuffle");
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<Example> out(batch.begin(), batch.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].z = batch[perm[i]].z;
    out[i].z2 = batch[perm[i]].z2;
    tokenize(out[i], out[i].direction);
  }
  return out;
}

namespace {

double conditional_entropy(const Dataset& ds, bool with_z) {
  std::map<std::string, std::map<std::string, std::int64_t>> counts;
  for (const auto& ex : ds.examples) {
    std::string key = ex.b;
    if (with_z) key += "|" + ex.z + "|" + ex.z2;
    ++counts[key][ex.a];
  }
  const double total = static_cast<double>(ds.examples.size());
  double h = 0.0;
  for (const auto& [key, dist] : counts) {
    std::int64_t nx = 0;
    for (const auto& [a, c] : dist) nx += c;
    for (const auto& [a, c] : dist) {
      const double p = static_cast<double>(c) / static_cast<double>(nx);
      h -= (static_cast<double>(c) / total) * std::log(p);
    }
  }
  return h;
}

}  // namespace

double empirical_entropy_a_given_b(const Dataset& ds) { return conditional_entropy(ds, false); }
double empirical_entropy_a_given_bz(const Dataset& ds) { return conditional_entropy(ds, true); }

TokenBatch make_batch(std::span<const Example> examples) {
  TokenBatch b;
  b.n = static_cast<int>(examples.size());
  if (examples.empty()) return b;
  b.seq_len = static_cast<int>(examples.front().token_seq.size());
  b.tokens.reserve(examples.size() * static_cast<std::size_t>(b.seq_len));
  b.loss_mask.reserve(b.tokens.capacity());
  for (const auto& ex : examples) {
    if (static_cast<int>(ex.token_seq.size()) != b.seq_len) throw std::invalid_argument("ragged batch");
    b.tokens.insert(b.tokens.end(), ex.token_seq.begin(), ex.token_seq.end());
    b.loss_mask.insert(b.loss_mask.end(), ex.loss_mask.begin(), ex.loss_mask.end());
  }
  return b;
}

TokenBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  TokenBatch b;
  b.n = static_cast<int>(indices.size());
  b.seq_len = ds.seq_len();
  b.tokens.reserve(indices.size() * static_cast<std::size_t>(b.seq_len));
  b.loss_mask.reserve(b.tokens.capacity());
  for (auto i : indices) {
    const auto& ex = ds.examples.at(i);
    b.tokens.insert(b.tokens.end(), ex.token_seq.begin(), ex.token_seq.end());
    b.loss_mask.insert(b.loss_mask.end(), ex.loss_mask.begin(), ex.loss_mask.end());
  }
  return b;
}

void write_dataset(std::ostream& os, const Dataset& ds) {
  const auto& s = ds.spec;
  os << "#plab-dataset v1";
  if (ds.hierarchy) {
    const auto& h = *ds.hierarchy;
    os << " kind=hierarchical n_b=" << h.n_b << " K1=" << h.K1 << " K2=" << h.K2 << " len_b=" << h.len_b
       << " len_a=" << h.len_a << " len_z1=" << h.len_z1 << " len_z2=" << h.len_z2 << " seed=" << h.seed;
    if (s.noise_rate > 0) os << " noise=" << s.noise_rate;
  } else {
    os << " kind=flat n_b=" << s.n_b << " K=" << s.K << " len_b=" << s.len_b << " len_a=" << s.len_a
       << " len_z=" << s.len_z << " alphabet_size=" << s.alphabet_size << " noise=" << s.noise_rate
       << " direction=" << to_string(s.direction) << " seed=" << s.seed;
  }
  os << '\n';
  for (const auto& ex : ds.examples) {
    os << ex.group_id << '\t' << ex.b << '\t' << ex.z;
    if (!ex.z2.empty()) os << '.' << ex.z2;
    os << '\t' << ex.a << '\n';
  }
}

Dataset read_dataset(std::istream& is) {
  std::string header;
  if (!std::getline(is, header) || header.rfind("#plab-dataset v1", 0) != 0) {
    throw std::runtime_error("not a plab dataset file (missing '#plab-dataset v1' header)");
  }
  std::map<std::string, std::string> kv;
  std::istringstream hs(header.substr(16));
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::runtime_error("malformed dataset header field: " + tok);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error("dataset header lacks field " + k);
    return it->second;
  };
  Dataset ds;
  if (get("kind") == "hierarchical") {
    HierarchicalTaskSpec h;
    h.n_b = std::stoi(get("n_b"));
    h.K1 = std::stoi(get("K1"));
    h.K2 = std::stoi(get("K2"));
    h.len_b = std::stoi(get("len_b"));
    h.len_a = std::stoi(get("len_a"));
    h.len_z1 = std::stoi(get("len_z1"));
    h.len_z2 = std::stoi(get("len_z2"));
    h.seed = std::stoull(get("seed"));
    ds = generate_hierarchical(h);
    if (kv.count("noise")) ds = apply_label_noise(ds, std::stod(kv["noise"]), h.seed);
  } else {
    TaskSpec s;
    s.n_b = std::stoi(get("n_b"));
    s.K = std::stoi(get("K"));
    s.len_b = std::stoi(get("len_b"));
    s.len_a = std::stoi(get("len_a"));
    s.len_z = std::stoi(get("len_z"));
    s.alphabet_size = std::stoi(get("alphabet_size"));
    s.noise_rate = std::stod(get("noise"));
    s.direction = direction_from_string(get("direction"));
    s.seed = std::stoull(get("seed"));
    ds = generate(s);
  }
  std::string line;
  std::size_t i = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (i >= ds.examples.size()) throw std::runtime_error("dataset file has more lines than its header implies");
    const auto& ex = ds.examples[i];
    std::ostringstream expect;
    expect << ex.group_id << '\t' << ex.b << '\t' << ex.z;
    if (!ex.z2.empty()) expect << '.' << ex.z2;
    expect << '\t' << ex.a;
    if (line != expect.str()) {
      throw std::runtime_error("dataset line " + std::to_string(i + 2) + " does not match its header: '" + line + "'");
    }
    ++i;
  }
  if (i != ds.examples.size()) throw std::runtime_error("dataset file is truncated");
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_dataset(os, ds);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_dataset(is);
}

}  // namespace plab
