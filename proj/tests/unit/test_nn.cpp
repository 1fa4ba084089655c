#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "plab/io.hpp"
#include "plab/nn.hpp"
#include "plab/taskgen.hpp"

using namespace plab;

namespace {

ArchDescriptor tiny(Family f) {
  ArchDescriptor a;
  a.family = f;
  a.n_layers = 2;
  a.d_model = 8;
  a.n_heads = 2;
  a.d_mlp = 16;
  return a;
}

Dataset small_ds(int K = 3) {
  TaskSpec t;
  t.n_b = 6;
  t.K = K;
  return generate(t);
}

TokenBatch first(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return make_batch(ds, idx);
}

std::vector<double> perturbed(const ModelState& m, double sd, std::uint64_t seed) {
  std::vector<double> th(m.params.begin(), m.params.end());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& x : th) x += nd(rng);
  return th;
}

class AllFamilies : public ::testing::TestWithParam<Family> {};

}  // namespace

TEST(Arch, DefaultTransformerParamCount) {
  const ArchDescriptor a;
  const std::size_t n = ParamLayout(a).total();
  const std::size_t d = 128, v = 38, t = 16, m = 512;
  const std::size_t layer = 2 * d + 4 * d * d + 4 * d + 2 * d + (d * m + m) + (m * d + d);
  EXPECT_EQ(n, v * d + t * d + 4 * layer + 2 * d + (d * v + v));
  EXPECT_EQ(n, 805158u);
  EXPECT_EQ(init(a, 1).param_count(), n);
}

TEST(Arch, LinearHasTwoMatricesPlusEmbeddings) {
  const ParamLayout l(tiny(Family::linear));
  int matrices = 0;
  for (const auto& s : l.slots()) matrices += s.rows > 1 && s.cols > 1 ? 1 : 0;
  // a (position, token) embedding table, the linear map and the unembedding
  EXPECT_EQ(matrices, 3);
  for (const auto& s : l.slots()) EXPECT_EQ(s.name.find("ln"), std::string::npos);
}

TEST(Arch, ValidationAndText) {
  ArchDescriptor bad = tiny(Family::transformer);
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  const ArchDescriptor a = tiny(Family::rnn);
  EXPECT_EQ(ArchDescriptor::from_text(a.to_text()), a);
}

TEST(Init, DeterministicAndFinite) {
  const ArchDescriptor a = tiny(Family::transformer);
  const ModelState x = init(a, 5), y = init(a, 5), z = init(a, 6);
  EXPECT_EQ(x.params, y.params);
  EXPECT_NE(x.params, z.params);
  EXPECT_TRUE(x.all_finite());
}

TEST_P(AllFamilies, GradientMatchesFiniteDifferences) {
  const ArchDescriptor a = tiny(GetParam());
  const Dataset ds = small_ds();
  const TokenBatch b = first(ds, 5);
  const ModelState m = init(a, 2);
  std::vector<double> th = perturbed(m, 0.3, 17);
  std::vector<double> g(th.size());
  loss_and_gradient_f64(a, th, b, g);

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> pick(0, th.size() - 1);
  const double eps = 1e-4;
  int checked = 0;
  double worst = 0.0;
  for (int i = 0; i < 250; ++i) {
    const std::size_t k = pick(rng);
    const double x0 = th[k];
    th[k] = x0 + eps;
    const double lp = loss_f64(a, th, b);
    th[k] = x0 - eps;
    const double lm = loss_f64(a, th, b);
    th[k] = x0;
    const double fd = (lp - lm) / (2 * eps);
    // Coordinates with negligible gradient are compared in absolute terms.
    const double scale = std::max({std::abs(fd), std::abs(g[k]), 1e-3});
    worst = std::max(worst, std::abs(fd - g[k]) / scale);
    ++checked;
  }
  EXPECT_GE(checked, 200);
  EXPECT_LT(worst, 1e-5);
}

TEST_P(AllFamilies, FloatAndDoubleAgree) {
  const ArchDescriptor a = tiny(GetParam());
  const Dataset ds = small_ds();
  const TokenBatch b = first(ds, 6);
  const ModelState m = init(a, 4);
  const std::vector<float> gf = backward(m, b);
  std::vector<double> th(m.params.begin(), m.params.end()), gd(th.size());
  const double ld = loss_and_gradient_f64(a, th, b, gd);
  EXPECT_NEAR(forward(m, b).loss, ld, 1e-4 * std::max(1.0, ld));
  double num = 0, den = 0;
  for (std::size_t i = 0; i < gd.size(); ++i) {
    num += (gf[i] - gd[i]) * (gf[i] - gd[i]);
    den += gd[i] * gd[i];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-4);
}

TEST_P(AllFamilies, DuplicatedBatchGivesSameGradient) {
  const ArchDescriptor a = tiny(GetParam());
  const Dataset ds = small_ds();
  std::vector<std::size_t> idx{0, 4, 7}, twice{0, 4, 7, 0, 4, 7};
  const ModelState m = init(a, 8);
  std::vector<double> th = perturbed(m, 0.2, 1), g1(th.size()), g2(th.size());
  loss_and_gradient_f64(a, th, make_batch(ds, idx), g1);
  loss_and_gradient_f64(a, th, make_batch(ds, twice), g2);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-12 * std::max(1.0, std::abs(g1[i])));
}

TEST_P(AllFamilies, Causality) {
  const ArchDescriptor a = tiny(GetParam());
  const Dataset ds = small_ds();
  TokenBatch b = first(ds, 2);
  const ModelState m = init(a, 9);
  ModelState mm = m;
  for (auto& p : mm.params) p *= 10.0f;  // larger weights make any leak visible
  const ForwardResult r0 = forward(mm, b);
  const int t = 8;
  for (int pos = t + 1; pos < b.seq_len; ++pos) b.tokens[static_cast<std::size_t>(pos)] = (b.tokens[pos] + 5) % kAlphabetSize;
  const ForwardResult r1 = forward(mm, b);
  for (int pos = 0; pos <= t; ++pos) {
    for (int v = 0; v < r0.vocab; ++v) EXPECT_EQ(r0.logit(0, pos, v), r1.logit(0, pos, v));
  }
}

INSTANTIATE_TEST_SUITE_P(Families, AllFamilies,
                         ::testing::Values(Family::transformer, Family::gated_mlp, Family::rnn, Family::linear),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(Forward, LossIsMeanOfPerExample) {
  const ArchDescriptor a = tiny(Family::transformer);
  const Dataset ds = small_ds();
  const ForwardResult r = forward(init(a, 1), first(ds, 7));
  ASSERT_EQ(r.per_example_loss.size(), 7u);
  const double m = std::accumulate(r.per_example_loss.begin(), r.per_example_loss.end(), 0.0) / 7.0;
  EXPECT_NEAR(r.loss, m, 1e-12);
  for (double l : r.per_example_loss) EXPECT_GE(l, 0.0);
}

TEST(Forward, UniformLogitsGiveLenATimesLnVocab) {
  ArchDescriptor a = tiny(Family::transformer);
  ModelState m = init(a, 1);
  // Zero unembedding weights and bias make every logit 0.
  const ParamLayout l(a);
  for (const auto& s : l.slots()) {
    if (s.name.rfind("unembed", 0) == 0) std::fill_n(m.params.begin() + static_cast<long>(s.offset), s.size(), 0.0f);
  }
  const ForwardResult r = forward(m, first(small_ds(10), 5));
  EXPECT_NEAR(r.loss, 4.0 * std::log(38.0), 1e-5);
}

TEST(Forward, EmptyMaskMatchesNoMask) {
  const ArchDescriptor a = tiny(Family::transformer);
  const ModelState m = init(a, 3);
  const TokenBatch b = first(small_ds(), 4);
  const AblationMask empty;
  const ForwardResult x = forward(m, b), y = forward(m, b, &empty);
  EXPECT_EQ(x.logits, y.logits);
  EXPECT_EQ(x.loss, y.loss);
}

TEST(Forward, AblationChangesOutputNotParams) {
  const ArchDescriptor a = tiny(Family::transformer);
  ModelState m = init(a, 3);
  for (auto& p : m.params) p *= 20.0f;
  const auto before = m.params;
  const TokenBatch b = first(small_ds(), 4);
  AblationMask mask;
  mask.zeroed_heads.insert({0, 1});
  const ForwardResult x = forward(m, b), y = forward(m, b, &mask);
  EXPECT_NE(x.loss, y.loss);
  EXPECT_EQ(m.params, before);
  AblationMask bad;
  bad.zeroed_heads.insert({2, 0});
  EXPECT_THROW(forward(m, b, &bad), std::invalid_argument);
}

TEST(Forward, RejectsBadTokens) {
  const ArchDescriptor a = tiny(Family::transformer);
  TokenBatch b = first(small_ds(), 2);
  b.tokens[3] = 99;
  EXPECT_THROW(forward(init(a, 1), b), std::invalid_argument);
  TokenBatch empty;
  EXPECT_THROW(backward(init(a, 1), empty), std::invalid_argument);
}

TEST(Hvp, LinearAndSymmetric) {
  const ArchDescriptor a = tiny(Family::transformer);
  ModelState m = init(a, 4);
  {
    const auto th = perturbed(m, 0.2, 2);
    for (std::size_t i = 0; i < th.size(); ++i) m.params[i] = static_cast<float>(th[i]);
  }
  const TokenBatch b = first(small_ds(), 6);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  std::vector<double> u(m.param_count()), v(m.param_count()), v3(m.param_count());
  for (auto& x : u) x = nd(rng);
  for (auto& x : v) x = nd(rng);
  for (std::size_t i = 0; i < v.size(); ++i) v3[i] = 3.0 * v[i];

  const auto hv = hvp(m, b, v), hu = hvp(m, b, u), hv3 = hvp(m, b, v3);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < hv.size(); ++i) {
    num += (hv3[i] - 3 * hv[i]) * (hv3[i] - 3 * hv[i]);
    den += 9 * hv[i] * hv[i];
  }
  EXPECT_LT(std::sqrt(num / den), 1e-3);
  const double uhv = std::inner_product(u.begin(), u.end(), hv.begin(), 0.0);
  const double vhu = std::inner_product(v.begin(), v.end(), hu.begin(), 0.0);
  EXPECT_LT(std::abs(uhv - vhu) / std::max(std::abs(uhv), std::abs(vhu)), 1e-3);

  std::vector<double> zero(m.param_count(), 0.0);
  EXPECT_THROW(hvp(m, b, zero), std::invalid_argument);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const ModelState m = init(tiny(Family::gated_mlp), 12);
  const std::vector<std::uint8_t> bytes = encode_checkpoint(m);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "PLAB1");
  const ModelState back = decode_checkpoint(bytes);
  EXPECT_EQ(back.arch, m.arch);
  EXPECT_EQ(back.params, m.params);
  std::vector<std::uint8_t> bad = bytes;
  bad[bad.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(bad), std::runtime_error);
  EXPECT_THROW(decode_checkpoint(std::span(bytes).first(20)), std::runtime_error);
}
