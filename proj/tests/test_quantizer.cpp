#include <gtest/gtest.h>

#include <cmath>

#include "fdm/quantizer.hpp"
#include "support/gradcheck.hpp"

namespace fdm {
namespace {

using testing::random_tensor;

Codebook<double> random_codebook(std::size_t n, std::size_t c, Rng& rng) {
  return Codebook<double>(random_tensor({n, c}, rng));
}

int brute_force_index(std::span<const double> v, const Codebook<double>& cb) {
  int best = 0;
  double best_d = 1e300;
  for (std::size_t i = 0; i < cb.size(); ++i) {
    double d = 0;
    for (std::size_t j = 0; j < v.size(); ++j) d += (v[j] - cb.entries[i * cb.dim() + j]) * (v[j] - cb.entries[i * cb.dim() + j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

TEST(NearestCode, MemberMapsToItself) {
  Rng rng(1);
  auto cb = random_codebook(8, 5, rng);
  auto r = nearest_code(cb.entry(3), cb);
  EXPECT_EQ(r.index, 3);
  EXPECT_EQ(r.sq_distance, 0.0);
}

TEST(NearestCode, TwoPointCodebook) {
  Codebook<double> cb(TensorD({2, 2}, {0, 0, 1, 1}));
  std::vector<double> v{0.2, 0.2};
  EXPECT_EQ(nearest_code<double>(v, cb).index, 0);
}

TEST(NearestCode, TiesGoToLowestIndex) {
  Codebook<double> cb(TensorD({3, 1}, {1, -1, 1}));
  std::vector<double> v{0.0};
  EXPECT_EQ(nearest_code<double>(v, cb).index, 0);
}

TEST(NearestCode, ChannelMismatchIsConfigError) {
  Codebook<double> cb(TensorD({2, 3}));
  std::vector<double> v{0.0, 1.0};
  EXPECT_THROW(nearest_code<double>(v, cb), ConfigError);
}

class BruteForce : public ::testing::TestWithParam<std::size_t> {};

TEST_P(BruteForce, ThousandVectorsMatchExhaustiveScan) {
  const std::size_t n = GetParam(), c = 16;
  Rng rng(10 + n);
  auto cb = random_codebook(n, c, rng);
  for (int t = 0; t < 1000; ++t) {
    const auto v = random_tensor({c}, rng);
    ASSERT_EQ(nearest_code<double>(v.data(), cb).index, brute_force_index(v.data(), cb)) << "vector " << t;
  }
}

INSTANTIATE_TEST_SUITE_P(CodebookSizes, BruteForce, ::testing::Values(4, 64, 512));

TEST(QuantizeMap, FixedPointWhenEveryPatchIsACode) {
  Rng rng(2);
  auto cb = random_codebook(6, 4, rng);
  TensorD f({1, 4, 2, 3});
  for (std::size_t i = 0; i < 6; ++i) set_patch_vector<double>(f, 0, i, cb.entry(5 - i));
  auto q = quantize_map(f, cb);
  EXPECT_EQ(q.features.vec(), f.vec());
  EXPECT_EQ(q.indices, (std::vector<int>{5, 4, 3, 2, 1, 0}));
}

TEST(QuantizeMap, IdempotentExactly) {
  Rng rng(3);
  auto cb = random_codebook(64, 8, rng);
  auto f = random_tensor({3, 8, 4, 4}, rng);
  auto q1 = quantize_map(f, cb);
  auto q2 = quantize_map(q1.features, cb);
  EXPECT_EQ(q1.features.vec(), q2.features.vec());
  EXPECT_EQ(q1.indices, q2.indices);
}

TEST(QuantizeMap, PerPatchIndicesAndMinimality) {
  Rng rng(4);
  auto cb = random_codebook(4, 3, rng);
  auto f = random_tensor({1, 3, 2, 2}, rng);
  auto q = quantize_map(f, cb);
  for (std::size_t p = 0; p < 4; ++p) {
    const auto v = patch_vector(f, 0, p);
    EXPECT_EQ(q.indices[p], brute_force_index(v, cb));
    const auto fq = patch_vector(q.features, 0, p);
    double dq = 0;
    for (std::size_t j = 0; j < 3; ++j) dq += (v[j] - fq[j]) * (v[j] - fq[j]);
    for (std::size_t e = 0; e < cb.size(); ++e) {
      double de = 0;
      for (std::size_t j = 0; j < 3; ++j) de += (v[j] - cb.entry(e)[j]) * (v[j] - cb.entry(e)[j]);
      EXPECT_LE(dq, de);
    }
  }
}

TEST(QuantizeMap, ChannelMismatchIsConfigError) {
  Rng rng(5);
  auto cb = random_codebook(4, 3, rng);
  EXPECT_THROW(quantize_map(TensorD({1, 2, 2, 2}), cb), ConfigError);
}

// Loss g(f_q) = sum(w * f_q^2). Through the straight-through estimator the
// gradient reaching f must equal dg/dc evaluated at c = f_q in a graph where
// c is an independent leaf.
TEST(StraightThrough, GradientMatchesSubstitutionGraph) {
  Rng rng(6);
  auto cb = random_codebook(16, 4, rng);
  cb.entries.set_requires_grad(true);
  auto f = random_tensor({2, 4, 3, 3}, rng);
  auto w = random_tensor({2, 4, 3, 3}, rng);
  f.set_requires_grad(true);

  Tape<double> tape;
  auto step = quantize(tape, tape.parameter(f), cb);
  Var loss = sum(tape, mul(tape, tape.constant(w), mul(tape, step.straight_through, step.straight_through)));
  tape.backward(loss);

  auto c = quantize_map(f, cb).features;
  c.set_requires_grad(true);
  Tape<double> sub;
  Var cv = sub.parameter(c);
  sub.backward(sum(sub, mul(sub, sub.constant(w), mul(sub, cv, cv))));

  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(f.grad()[i], c.grad()[i]);
  for (double g : cb.entries.grad()) EXPECT_EQ(g, 0.0);
}

TEST(StraightThrough, ForwardValueIsQuantized) {
  Rng rng(7);
  auto cb = random_codebook(8, 4, rng);
  auto f = random_tensor({1, 4, 2, 2}, rng);
  Tape<double> tape;
  auto step = quantize(tape, tape.constant(f), cb);
  EXPECT_EQ(tape.value(step.straight_through).vec(), quantize_map(f, cb).features.vec());
  EXPECT_EQ(tape.value(step.codes).vec(), quantize_map(f, cb).features.vec());
}

TEST(VqLosses, ZeroWhenEqual) {
  Tape<double> tape;
  Var f = tape.constant(TensorD({1, 2, 1, 1}, {0.5, -0.5}));
  auto l = vq_losses(tape, f, f);
  EXPECT_EQ(tape.value(l.codebook)[0], 0.0);
  EXPECT_EQ(tape.value(l.commitment)[0], 0.0);
}

TEST(VqLosses, ScalarCase) {
  Tape<double> tape;
  auto l = vq_losses(tape, tape.constant(TensorD({1}, {1.0})), tape.constant(TensorD({1}, {0.0})), 0.25);
  EXPECT_DOUBLE_EQ(tape.value(l.codebook)[0], 1.0);
  EXPECT_DOUBLE_EQ(tape.value(l.commitment)[0], 0.25);
}

TEST(VqLosses, CommitmentGradientFlowsOnlyIntoEncoder) {
  Rng rng(8);
  auto f = random_tensor({1, 3, 2, 2}, rng);
  auto codes = random_tensor({1, 3, 2, 2}, rng);
  f.set_requires_grad(true);
  codes.set_requires_grad(true);
  Tape<double> tape;
  auto l = vq_losses(tape, tape.parameter(f), tape.parameter(codes), 0.25);
  tape.backward(l.commitment);
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_NEAR(f.grad()[i], 2 * 0.25 * (f[i] - codes[i]) / 12.0, 1e-15);
    EXPECT_EQ(codes.grad()[i], 0.0);
  }
  const auto r = testing::grad_check({f}, [&](Tape<double>& t, const std::vector<Var>& v) {
    return vq_losses(t, v[0], t.constant(codes.detached()), 0.25).commitment;
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(VqLosses, CodebookLossMovesOnlyCodes) {
  Rng rng(9);
  auto f = random_tensor({1, 3, 2, 2}, rng);
  auto codes = random_tensor({1, 3, 2, 2}, rng);
  f.set_requires_grad(true);
  codes.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(vq_losses(tape, tape.parameter(f), tape.parameter(codes)).codebook);
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(f.grad()[i], 0.0);
    EXPECT_NEAR(codes.grad()[i], 2 * (codes[i] - f[i]) / 12.0, 1e-15);
  }
}

TEST(CodeIndices, MatchManualEncodeThenNearest) {
  ModelConfig cfg = ModelConfig::desk();
  cfg.image_size = 8;
  Rng rng(11);
  Encoder<double> enc(cfg, rng);
  Codebook<double> cb(cfg.codebook_n, cfg.channels, rng);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  const auto idx = code_indices_of(x, enc, cb);
  const auto f = enc.encode_value(x);
  ASSERT_EQ(idx.size(), 2u * 4u);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 4; ++p) {
      EXPECT_EQ(idx[b * 4 + p], brute_force_index(patch_vector(f, b, p), cb));
      EXPECT_GE(idx[b * 4 + p], 0);
      EXPECT_LT(idx[b * 4 + p], static_cast<int>(cfg.codebook_n));
    }
}

TEST(CodeIndices, ConstantImageGivesConstantGrid) {
  ModelConfig cfg = ModelConfig::desk();
  Rng rng(12);
  Encoder<double> enc(cfg, rng);
  Codebook<double> cb(cfg.codebook_n, cfg.channels, rng);
  const auto idx = code_indices_of(TensorD({1, 3, 32, 32}, 0.4), enc, cb);
  for (int i : idx) EXPECT_EQ(i, idx[0]);
}

}  // namespace
}  // namespace fdm
