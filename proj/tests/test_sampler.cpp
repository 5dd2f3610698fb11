#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fdm/sampler.hpp"
#include "support/gradcheck.hpp"

namespace fdm {
namespace {

using testing::random_tensor;

ModelConfig tiny(std::size_t image = 8) {
  ModelConfig c;
  c.image_size = image;
  c.patch_size = 4;
  c.channels = 4;
  c.codebook_n = 8;
  c.sampler = {8, 1, 2};
  return c;
}

TEST(SamplerLogits, AllMaskedDependsOnlyOnPositions) {
  Rng rng(1);
  Sampler<double> s(tiny(), rng);
  const std::vector<std::uint8_t> none(4, 0);
  Tape<double> tape(false);
  const auto a = tape.value(s.logits(tape, tape.constant(random_tensor({1, 4, 2, 2}, rng)), none)).vec();
  const auto b = tape.value(s.logits(tape, tape.constant(random_tensor({1, 4, 2, 2}, rng)), none)).vec();
  EXPECT_EQ(a, b);
}

TEST(SamplerLogits, FiniteAndShaped) {
  Rng rng(2);
  Sampler<double> s(tiny(16), rng);
  Tape<double> tape(false);
  std::vector<std::uint8_t> vis(2 * 16);
  for (std::size_t i = 0; i < vis.size(); ++i) vis[i] = i % 3 != 0;
  const auto& l = tape.value(s.logits(tape, tape.constant(random_tensor({2, 4, 4, 4}, rng)), vis));
  EXPECT_EQ(l.shape(), (Shape{32, 8}));
  EXPECT_TRUE(l.all_finite());
}

TEST(SamplerLogits, ShapeMismatchIsConfigError) {
  Rng rng(3);
  Sampler<double> s(tiny(), rng);
  Tape<double> tape(false);
  EXPECT_THROW(s.logits(tape, tape.constant(TensorD({1, 5, 2, 2})), std::vector<std::uint8_t>(4, 1)), ConfigError);
  EXPECT_THROW(s.logits(tape, tape.constant(TensorD({1, 4, 2, 2})), std::vector<std::uint8_t>(3, 1)), ConfigError);
}

std::vector<double> ln(const std::vector<double>& x, const TensorD& g, const TensorD& s) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mu) / std::sqrt(var + 1e-5) * g[j] + s[j];
  return out;
}

std::vector<double> lin(const Linear<double>& l, const std::vector<double>& in) {
  std::vector<double> out(l.out_features());
  for (std::size_t o = 0; o < out.size(); ++o) {
    double s = l.bias[o];
    for (std::size_t i = 0; i < in.size(); ++i) s += in[i] * l.weight[i * out.size() + o];
    out[o] = s;
  }
  return out;
}

// With one token, softmax attention returns the value projection unchanged.
TEST(SamplerLogits, SingleTokenMatchesHandComposition) {
  Rng rng(4);
  Sampler<double> s(tiny(4), rng);
  for (auto* t : {&s.blocks[0].ln1_gain, &s.blocks[0].ln1_shift, &s.lnf_gain, &s.lnf_shift})
    for (auto& v : t->data()) v = rng.normal();
  auto f = random_tensor({1, 4, 1, 1}, rng);
  for (std::uint8_t visible : {0, 1}) {
    Tape<double> tape(false);
    const auto got = tape.value(s.logits(tape, tape.constant(f), {visible})).vec();

    std::vector<double> x = visible ? lin(s.token_proj, f.vec()) : s.mask_embedding.vec();
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += s.positions[j];
    const auto& b = s.blocks[0];
    auto att = lin(b.wo, lin(b.wv, ln(x, b.ln1_gain, b.ln1_shift)));
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += att[j];
    auto hid = lin(b.ff1, ln(x, b.ln2_gain, b.ln2_shift));
    for (auto& v : hid) v = std::max(v, 0.0);
    auto ff = lin(b.ff2, hid);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += ff[j];
    const auto want = lin(s.head, ln(x, s.lnf_gain, s.lnf_shift));
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got[j], want[j], 1e-10);
  }
}

TEST(SamplerLogits, GradientCheck) {
  Rng rng(5);
  auto cfg = tiny();
  cfg.sampler = {4, 1, 2};
  cfg.channels = 3;
  Sampler<double> s(cfg, rng);
  const std::vector<std::uint8_t> vis{1, 0, 1, 0};
  const auto r = testing::grad_check({random_tensor({1, 3, 2, 2}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
    Var l = s.logits(t, v[0], vis);
    return sum(t, mul(t, l, l));
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(CodeLoss, UniformLogitsGiveLogN) {
  Tape<double> tape;
  const TensorD pm({1, 1, 2, 2}, {0, 1, 0, 0});
  Var l = code_classification_loss(tape, tape.constant(TensorD({4, 8})), {3, 1, 0, 7}, pm);
  EXPECT_NEAR(tape.value(l)[0], std::log(8.0), 1e-12);
}

TEST(CodeLoss, LargeMarginGoesToZero) {
  TensorD logits({2, 4});
  logits[0 * 4 + 2] = 60;
  logits[1 * 4 + 0] = 60;
  Tape<double> tape;
  Var l = code_classification_loss(tape, tape.constant(logits), {2, 0}, TensorD({1, 1, 1, 2}));
  EXPECT_LT(tape.value(l)[0], 1e-20);
}

TEST(CodeLoss, MatchesScalarSoftmaxNll) {
  Rng rng(6);
  auto logits = random_tensor({6, 5}, rng, 2.0);
  const std::vector<int> targets{0, 4, 2, 2, 1, 3};
  const TensorD pm({1, 1, 2, 3}, {0, 1, 0, 0, 1, 0});
  Tape<double> tape;
  const double got = tape.value(code_classification_loss(tape, tape.constant(logits), targets, pm))[0];
  double want = 0;
  int n = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (pm[r] != 0) continue;
    double z = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(logits[r * 5 + j]);
    want += -std::log(std::exp(logits[r * 5 + targets[r]]) / z);
    ++n;
  }
  EXPECT_NEAR(got, want / n, 1e-12);
  const auto g = testing::grad_check({logits}, [&](Tape<double>& t, const std::vector<Var>& v) {
    return code_classification_loss(t, v[0], targets, pm);
  });
  EXPECT_LT(g.max_rel_error, 1e-6);
}

TEST(CodeLoss, NoMaskedPositionsGivesZero) {
  Tape<double> tape;
  Var l = code_classification_loss(tape, tape.constant(TensorD({2, 3}, 1.0)), {0, 1}, TensorD({1, 1, 1, 2}, 1.0));
  EXPECT_EQ(tape.value(l)[0], 0.0);
}

TEST(CodeLoss, OutOfRangeTargetIsContractError) {
  Tape<double> tape;
  EXPECT_THROW(code_classification_loss(tape, tape.constant(TensorD({1, 3})), {3}, TensorD({1, 1, 1, 1})),
               ContractError);
}

TEST(TopK, KOneIsArgmax) {
  Rng rng(7);
  const std::vector<double> l{0.1, 2.0, -1.0, 1.9};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(top_k_sample<double>(l, 1, 1.0, rng), 1);
}

TEST(TopK, UniformFrequenciesWithinThreeSigma) {
  Rng rng(8);
  const std::size_t n = 8, draws = 10000;
  const std::vector<double> l(n, 0.0);
  std::vector<int> counts(n);
  for (std::size_t i = 0; i < draws; ++i) ++counts[top_k_sample<double>(l, n, 1.0, rng)];
  const double p = 1.0 / n, mu = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  double chi2 = 0;
  for (int c : counts) {
    EXPECT_LT(std::abs(c - mu), 3 * sigma);
    chi2 += (c - mu) * (c - mu) / mu;
  }
  EXPECT_LT(chi2, 24.32);  // chi-square 7 dof, p = 0.001
}

TEST(TopK, TruncationAndSoftmaxRatio) {
  Rng rng(9);
  const std::vector<double> l{1.0, 0.0, -1.0};
  const std::size_t draws = 20000;
  std::vector<int> counts(3);
  for (std::size_t i = 0; i < draws; ++i) ++counts[top_k_sample<double>(l, 2, 1.0, rng)];
  EXPECT_EQ(counts[2], 0);
  const double p0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  EXPECT_LT(std::abs(counts[0] - draws * p0), 3 * std::sqrt(draws * p0 * (1 - p0)));

  const std::vector<double> wide{10.0, 0.0, -10.0};
  int twos = 0;
  for (int i = 0; i < 5000; ++i) twos += top_k_sample<double>(wide, 2, 1.0, rng) == 2;
  EXPECT_EQ(twos, 0);
}

TEST(TopK, InvalidArgumentsAreContractErrors) {
  Rng rng(10);
  const std::vector<double> l{1.0, 2.0};
  EXPECT_THROW(top_k_sample<double>(l, 0, 1.0, rng), ContractError);
  EXPECT_THROW(top_k_sample<double>(l, 3, 1.0, rng), ContractError);
  EXPECT_THROW(top_k_sample<double>(l, 1, 0.0, rng), ContractError);
}

struct SamplingFixture : ::testing::Test {
  ModelConfig cfg = tiny(16);
  Rng rng{11};
  Sampler<double> sampler{cfg, rng};
  Codebook<double> cb{cfg.codebook_n, cfg.channels, rng};
  TensorD f = random_tensor({1, 4, 4, 4}, rng);
  TensorD pm = TensorD({1, 1, 4, 4}, {1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1});
};

TEST_F(SamplingFixture, NoMaskedPatchesLeavesFeaturesUnchanged) {
  auto r = sample_inpaint(f, TensorD({1, 1, 4, 4}, 1.0), sampler, cb, {8, 1.0, FillOrder::raster, 3});
  EXPECT_EQ(r.features.vec(), f.vec());
  EXPECT_TRUE(r.visit_order.empty());
}

TEST_F(SamplingFixture, MaskedPatchesBecomeCodesVisibleUntouched) {
  for (FillOrder order : {FillOrder::raster, FillOrder::confidence}) {
    auto r = sample_inpaint(f, pm, sampler, cb, {8, 1.0, order, 4});
    ASSERT_EQ(r.visit_order.size(), 4u);
    for (std::size_t p = 0; p < 16; ++p) {
      const auto v = patch_vector(r.features, 0, p);
      if (pm[p] != 0) {
        EXPECT_EQ(v, patch_vector(f, 0, p));
        EXPECT_EQ(r.indices[p], -1);
      } else {
        ASSERT_GE(r.indices[p], 0);
        const auto e = cb.entry(static_cast<std::size_t>(r.indices[p]));
        EXPECT_EQ(v, std::vector<double>(e.begin(), e.end()));
      }
    }
  }
}

TEST_F(SamplingFixture, RasterOrderVisitsRowMajor) {
  auto r = sample_inpaint(f, pm, sampler, cb, {8, 1.0, FillOrder::raster, 5});
  EXPECT_EQ(r.visit_order, (std::vector<int>{5, 6, 9, 10}));
}

TEST_F(SamplingFixture, SeedDeterminesOutput) {
  const SampleConfig a{8, 1.0, FillOrder::raster, 6};
  EXPECT_EQ(sample_inpaint(f, pm, sampler, cb, a).indices, sample_inpaint(f, pm, sampler, cb, a).indices);
  int differ = 0;
  for (std::uint64_t s = 0; s < 20; ++s)
    differ += sample_inpaint(f, pm, sampler, cb, {8, 1.0, FillOrder::raster, s}).indices !=
              sample_inpaint(f, pm, sampler, cb, {8, 1.0, FillOrder::raster, s + 100}).indices;
  EXPECT_GE(differ, 18);
}

TEST_F(SamplingFixture, KOneIsDeterministicAcrossSeeds) {
  EXPECT_EQ(sample_inpaint(f, pm, sampler, cb, {1, 1.0, FillOrder::raster, 1}).indices,
            sample_inpaint(f, pm, sampler, cb, {1, 1.0, FillOrder::raster, 2}).indices);
}

}  // namespace
}  // namespace fdm
