#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "plab/taskgen.hpp"

using namespace plab;

namespace {

// Count-based H(A | key) over the examples, written independently of the library.
double count_entropy(const Dataset& ds, bool with_z) {
  std::map<std::string, std::map<std::string, int>> counts;
  for (const auto& e : ds.examples) counts[with_z ? e.b + "|" + e.z + "|" + e.z2 : e.b][e.a]++;
  double h = 0.0;
  const double n = static_cast<double>(ds.size());
  for (const auto& [_, row] : counts) {
    double tot = 0.0;
    for (const auto& [__, c] : row) tot += c;
    for (const auto& [__, c] : row) h -= (c / n) * std::log(c / tot);
  }
  return h;
}

TaskSpec spec(int n_b, int K, std::uint64_t seed = 42) {
  TaskSpec t;
  t.n_b = n_b;
  t.K = K;
  t.seed = seed;
  return t;
}

}  // namespace

TEST(Taskgen, DefaultSizeAndBenchmark) {
  const Dataset ds = generate(spec(1000, 10));
  EXPECT_EQ(ds.size(), 10000u);
  EXPECT_NEAR(ds.plateau_benchmark(), 2.302585, 1e-6);
  EXPECT_EQ(ds.spec.conditional_benchmark(), 0.0);
}

TEST(Taskgen, SingleExample) {
  const Dataset ds = generate(spec(1, 1));
  EXPECT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.plateau_benchmark(), 0.0);
}

TEST(Taskgen, EntropyOracleIsExact) {
  const Dataset ds = generate(spec(50, 4));
  ASSERT_EQ(ds.size(), 200u);
  EXPECT_NEAR(count_entropy(ds, false), std::log(4.0), 1e-12);
  EXPECT_NEAR(empirical_entropy_a_given_b(ds), std::log(4.0), 1e-12);
  EXPECT_NEAR(count_entropy(ds, true), 0.0, 1e-15);
  EXPECT_NEAR(empirical_entropy_a_given_bz(ds), 0.0, 1e-15);
}

TEST(Taskgen, FiberStructure) {
  const Dataset ds = generate(spec(80, 7));
  std::set<std::string> bs, as;
  std::map<int, std::set<std::string>> zs, fiber_as;
  for (const auto& e : ds.examples) {
    as.insert(e.a);
    bs.insert(e.b);
    zs[e.group_id].insert(e.z);
    fiber_as[e.group_id].insert(e.a);
    EXPECT_EQ(e.b.size(), 6u);
    EXPECT_EQ(e.a.size(), 4u);
    EXPECT_EQ(e.z.size(), 2u);
  }
  EXPECT_EQ(as.size(), ds.size());  // globally unique targets
  EXPECT_EQ(bs.size(), 80u);
  for (const auto& [g, s] : zs) {
    EXPECT_EQ(s.size(), 7u);
    EXPECT_EQ(fiber_as[g].size(), 7u);
  }
  ASSERT_EQ(ds.n_groups(), 80);
  for (const auto& f : ds.fiber_index) EXPECT_EQ(f.size(), 7u);
}

TEST(Taskgen, TokenLayoutBackwardAndForward) {
  const Dataset ds = generate(spec(3, 2));
  const Example& e = ds.examples[0];
  ASSERT_EQ(e.token_seq.size(), 15u);
  EXPECT_EQ(e.token_seq[0], kBos);
  EXPECT_EQ(e.token_seq[7], kSep);
  EXPECT_EQ(e.token_seq[10], kSep);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(e.token_seq[11 + i], symbol_to_token(e.a[i]));
  int targets = 0;
  for (std::size_t i = 0; i < e.loss_mask.size(); ++i) {
    targets += e.loss_mask[i];
    EXPECT_EQ(e.loss_mask[i] != 0, i >= 11);
  }
  EXPECT_EQ(targets, 4);

  const Dataset fwd = with_direction(ds, Direction::forward);
  const Example& f = fwd.examples[0];
  EXPECT_EQ(f.token_seq[0], kBos);
  EXPECT_EQ(f.token_seq[5], kSep);
  EXPECT_EQ(f.token_seq[8], kSep);
  for (int i = 0; i < 6; ++i) EXPECT_EQ(f.token_seq[9 + i], symbol_to_token(e.b[i]));
  int ftargets = 0;
  for (auto m : f.loss_mask) ftargets += m;
  EXPECT_EQ(ftargets, 6);
  EXPECT_EQ(fwd.target_len(), 6);
}

TEST(Taskgen, Deterministic) {
  std::ostringstream a, b, c;
  write_dataset(a, generate(spec(40, 5, 9)));
  write_dataset(b, generate(spec(40, 5, 9)));
  write_dataset(c, generate(spec(40, 5, 10)));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(Taskgen, SerializationRoundTrip) {
  TaskSpec t = spec(30, 4, 3);
  t.noise_rate = 0.25;
  const Dataset ds = generate(t);
  std::ostringstream os;
  write_dataset(os, ds);
  std::istringstream is(os.str());
  const Dataset back = read_dataset(is);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.examples[i].a, ds.examples[i].a);
    EXPECT_EQ(back.examples[i].token_seq, ds.examples[i].token_seq);
  }
  // One header plus one line per example.
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(ds.size()) + 1);

  std::string tampered = os.str();
  tampered[tampered.size() - 2] = tampered[tampered.size() - 2] == 'a' ? 'b' : 'a';
  std::istringstream bad(tampered);
  EXPECT_THROW(read_dataset(bad), std::exception);
}

TEST(Taskgen, InfeasibleSpecsNameTheBound) {
  try {
    generate(spec(100000000, 10));
    FAIL();
  } catch (const InfeasibleSpec& e) {
    EXPECT_NE(std::string(e.what()).find("uniqueness"), std::string::npos);
  }
  TaskSpec t = spec(10, 2000);  // more selectors than 36^2
  EXPECT_THROW(generate(t), InfeasibleSpec);
  TaskSpec k1 = spec(10, 1);
  k1.noise_rate = 0.1;
  EXPECT_THROW(generate(k1), std::invalid_argument);
}

TEST(LabelNoise, ZeroRateIsIdentity) {
  const Dataset ds = generate(spec(40, 5));
  const Dataset same = apply_label_noise(ds, 0.0, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(same.examples[i].a, ds.examples[i].a);
}

TEST(LabelNoise, BinomialCountAndFiberMembership) {
  const Dataset ds = generate(spec(1000, 20));
  const Dataset noisy = apply_label_noise(ds, 0.2, 77);
  int corrupted = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Example& e = noisy.examples[i];
    EXPECT_EQ(e.b, ds.examples[i].b);
    EXPECT_EQ(e.z, ds.examples[i].z);
    if (e.a != ds.examples[i].a) {
      ++corrupted;
      EXPECT_TRUE(e.corrupted);
    }
    bool member = false;
    for (const auto& f : ds.fiber_index[static_cast<std::size_t>(e.group_id)]) member |= f.a == e.a;
    EXPECT_TRUE(member);
  }
  const double D = 20000, p = 0.2;
  EXPECT_LE(std::abs(corrupted - D * p), 3 * std::sqrt(D * p * (1 - p)));
}

TEST(Hierarchical, BenchmarksAndFanOut) {
  HierarchicalTaskSpec h;
  h.n_b = 30;
  EXPECT_NEAR(h.plateau_benchmark(), std::log(20.0), 1e-12);
  EXPECT_NEAR(h.plateau_benchmark(), 2.996, 1e-3);
  EXPECT_NEAR(h.intermediate_benchmark(), std::log(4.0), 1e-12);
  HierarchicalTaskSpec one;
  one.n_b = 5;
  one.K1 = one.K2 = 1;
  EXPECT_EQ(one.plateau_benchmark(), 0.0);

  HierarchicalTaskSpec s;
  s.n_b = 20;
  s.K1 = 2;
  s.K2 = 3;
  const Dataset ds = generate_hierarchical(s);
  ASSERT_EQ(ds.size(), 120u);
  std::map<int, std::set<std::string>> targets, keys;
  for (const auto& e : ds.examples) {
    targets[e.group_id].insert(e.a);
    keys[e.group_id].insert(e.z + "." + e.z2);
    ASSERT_EQ(e.token_seq.size(), 18u);
    EXPECT_EQ(e.token_seq[13], kSep);
  }
  for (const auto& [g, t] : targets) {
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(keys[g].size(), 6u);
  }
  EXPECT_NEAR(count_entropy(ds, false), std::log(6.0), 1e-12);
  EXPECT_NEAR(count_entropy(ds, true), 0.0, 1e-15);
}

TEST(ShuffleSelectors, PreservesMultisetAndIsReproducible) {
  const Dataset ds = generate(spec(30, 5));
  std::vector<Example> batch(ds.examples.begin(), ds.examples.begin() + 40);
  const auto a = shuffle_selectors(batch, 5);
  const auto b = shuffle_selectors(batch, 5);
  std::multiset<std::string> before, after;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    before.insert(batch[i].z);
    after.insert(a[i].z);
    EXPECT_EQ(a[i].b, batch[i].b);
    EXPECT_EQ(a[i].a, batch[i].a);
    EXPECT_EQ(a[i].z, b[i].z);
  }
  EXPECT_EQ(before, after);
  std::vector<Example> one(ds.examples.begin(), ds.examples.begin() + 1);
  EXPECT_THROW(shuffle_selectors(one, 1), std::invalid_argument);
}

TEST(ShuffleSelectors, PairSwapsHalfTheTime) {
  const Dataset ds = generate(spec(2, 2));
  std::vector<Example> pair{ds.examples[0], ds.examples[1]};
  ASSERT_NE(pair[0].z, pair[1].z);
  int swaps = 0;
  const int n = 4000;
  for (int s = 0; s < n; ++s) swaps += shuffle_selectors(pair, static_cast<std::uint64_t>(s))[0].z == pair[1].z;
  EXPECT_NEAR(swaps / static_cast<double>(n), 0.5, 4 * std::sqrt(0.25 / n));
}
