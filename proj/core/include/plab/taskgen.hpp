#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "plab/tokens.hpp"

namespace plab {

enum class Direction { backward, forward };

std::string_view to_string(Direction d);
Direction direction_from_string(std::string_view s);

// Raised when a task spec cannot be realised (uniqueness bounds, fan-out).
class InfeasibleSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TaskSpec {
  int n_b = 1000;
  int K = 10;
  int len_b = 6;
  int len_a = 4;
  int len_z = 2;
  int alphabet_size = kAlphabetSize;
  double noise_rate = 0.0;
  Direction direction = Direction::backward;
  std::uint64_t seed = 42;

  std::int64_t D() const { return static_cast<std::int64_t>(n_b) * K; }
  // H(A | B) of the clean task, nats.
  double plateau_benchmark() const;
  // H(A | B, z) of the clean task.
  double conditional_benchmark() const { return 0.0; }

  // Throws InfeasibleSpec naming the violated bound.
  void validate() const;

  bool operator==(const TaskSpec&) const = default;
};

struct HierarchicalTaskSpec {
  int n_b = 1000;
  int K1 = 5;
  int K2 = 4;
  int len_b = 6;
  int len_a = 4;
  int len_z1 = 2;
  int len_z2 = 2;
  std::uint64_t seed = 42;

  int fiber_size() const { return K1 * K2; }
  std::int64_t D() const { return static_cast<std::int64_t>(n_b) * K1 * K2; }
  // ln(K1 K2), ln(K2) once z1 is resolved, and 0.
  double plateau_benchmark() const;
  double intermediate_benchmark() const;
  void validate() const;
};

struct Example {
  std::string b;
  std::string z;
  std::string z2;  // second-level selector, hierarchical tasks only
  std::string a;
  int group_id = 0;
  bool corrupted = false;  // target replaced by label noise
  Direction direction = Direction::backward;
  std::vector<std::int32_t> token_seq;
  std::vector<std::uint8_t> loss_mask;
};

struct FiberEntry {
  std::string z;
  std::string z2;
  std::string a;
};

struct Dataset {
  TaskSpec spec;
  std::optional<HierarchicalTaskSpec> hierarchy;
  std::vector<Example> examples;
  std::vector<std::vector<FiberEntry>> fiber_index;  // clean targets per group

  std::size_t size() const { return examples.size(); }
  int n_groups() const { return static_cast<int>(fiber_index.size()); }
  int fiber_size() const { return hierarchy ? hierarchy->fiber_size() : spec.K; }
  int seq_len() const { return examples.empty() ? 0 : static_cast<int>(examples.front().token_seq.size()); }
  double plateau_benchmark() const;
  // Number of target positions per example.
  int target_len() const;
};

// Token layouts:
//   backward     [BOS, B, SEP, z, SEP, A]       targets = A
//   forward      [BOS, A, SEP, z, SEP, B]       targets = B
//   hierarchical [BOS, B, SEP, z1, SEP, z2, SEP, A]
void tokenize(Example& ex, Direction dir);

Dataset generate(const TaskSpec& spec);
Dataset apply_label_noise(const Dataset& ds, double p, std::uint64_t seed);
Dataset generate_hierarchical(const HierarchicalTaskSpec& spec);

// Same map f seen from the other side: swaps the direction of every example
// while keeping (B, z, A) triples.
Dataset with_direction(const Dataset& ds, Direction dir);

// Permutes selectors (both levels together for hierarchical data) across the
// batch with a uniform random permutation. Requires at least two examples.
std::vector<Example> shuffle_selectors(std::span<const Example> batch, std::uint64_t seed);

// Count-based conditional entropies (nats) over the dataset's examples.
double empirical_entropy_a_given_b(const Dataset& ds);
double empirical_entropy_a_given_bz(const Dataset& ds);

TokenBatch make_batch(std::span<const Example> examples);
TokenBatch make_batch(const Dataset& ds, std::span<const std::size_t> indices);

// Line format: a header "#plab-dataset v1 key=value ..." then one example per
// line, group_id<TAB>B<TAB>z<TAB>A (z is "z1.z2" for hierarchical data).
void write_dataset(std::ostream& os, const Dataset& ds);
// Parses and regenerates from the header; fails if any line disagrees.
Dataset read_dataset(std::istream& is);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace plab
