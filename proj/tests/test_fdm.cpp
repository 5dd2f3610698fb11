#include <gtest/gtest.h>

#include <cmath>

#include "fdm/fdm.hpp"
#include "support/gradcheck.hpp"

namespace fdm {
namespace {

using testing::random_tensor;

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.channels = 6;
  c.codebook_n = 16;
  c.encoder_blocks = 2;
  c.fdm_blocks = 2;
  return c;
}

TensorD random_mask(Shape s, Rng& rng, double p_visible) {
  TensorD m(std::move(s));
  for (auto& v : m.data()) v = rng.uniform() < p_visible ? 1.0 : 0.0;
  return m;
}

TEST(FdmPredict, ZeroInitialisedOutputGivesZeroError) {
  Rng rng(1);
  FdmNet<double> net(small_config(), rng);
  auto fq = random_tensor({2, 6, 4, 4}, rng);
  auto pm = random_mask({2, 1, 4, 4}, rng, 0.5);
  const auto e = net.predict_value(fq, pm);
  EXPECT_EQ(e.shape(), fq.shape());
  for (double v : e.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(dequantize_value(fq, e, pm).vec(), fq.vec());
}

TEST(FdmPredict, ShapeMismatchIsConfigError) {
  Rng rng(2);
  FdmNet<double> net(small_config(), rng);
  EXPECT_THROW(net.predict_value(TensorD({1, 5, 4, 4}), TensorD({1, 1, 4, 4})), ConfigError);
  EXPECT_THROW(net.predict_value(TensorD({1, 6, 4, 4}), TensorD({1, 1, 2, 2})), ConfigError);
}

// On a 1x1 grid every 3x3 conv reduces to its centre tap.
TEST(FdmPredict, SingleCellMatchesHandComposition) {
  auto cfg = small_config();
  Rng rng(3);
  FdmNet<double> net(cfg, rng);
  for (auto* t : {&net.output.weight, &net.output.bias})
    for (auto& v : t->data()) v = rng.normal() * 0.3;
  const std::size_t c = cfg.channels;
  auto fq = random_tensor({1, c, 1, 1}, rng);
  for (double m : {0.0, 1.0}) {
    const auto got = net.predict_value(fq, TensorD({1, 1, 1, 1}, m));
    auto conv = [](const Conv2d<double>& l, const std::vector<double>& in) {
      const std::size_t k = l.kernel(), centre = k / 2;
      std::vector<double> out(l.out_channels());
      for (std::size_t o = 0; o < out.size(); ++o) {
        double s = l.bias[o];
        for (std::size_t i = 0; i < in.size(); ++i) s += l.weight[((o * in.size() + i) * k + centre) * k + centre] * in[i];
        out[o] = s;
      }
      return out;
    };
    auto x = fq.vec();
    x.push_back(m);
    auto h = conv(net.input, x);
    for (const auto& b : net.blocks) {
      auto t = conv(b.conv3, h);
      for (auto& v : t) v = std::max(v, 0.0);
      auto u = conv(b.conv1, t);
      for (std::size_t j = 0; j < c; ++j) h[j] = std::max(h[j] + u[j], 0.0);
    }
    const auto want = conv(net.output, h);
    for (std::size_t j = 0; j < c; ++j) EXPECT_NEAR(got[j], want[j], 1e-12);
  }
}

TEST(Dequantize, Limits) {
  Rng rng(4);
  auto fq = random_tensor({1, 3, 2, 2}, rng), e = random_tensor({1, 3, 2, 2}, rng);
  EXPECT_EQ(dequantize_value(fq, e, TensorD({1, 1, 2, 2}, 1.0)).vec(), fq.vec());
  const auto all = dequantize_value(fq, e, TensorD({1, 1, 2, 2}, 0.0));
  for (std::size_t i = 0; i < fq.size(); ++i) EXPECT_EQ(all[i], fq[i] + e[i]);
}

TEST(Dequantize, VisiblePositionsBitExactAndMatchesTapeVersion) {
  Rng rng(5);
  auto fq = random_tensor({2, 3, 3, 3}, rng), e = random_tensor({2, 3, 3, 3}, rng);
  auto pm = random_mask({2, 1, 3, 3}, rng, 0.5);
  const auto v = dequantize_value(fq, e, pm);
  Tape<double> tape(false);
  const auto t = tape.value(dequantize(tape, tape.constant(fq), tape.constant(e), pm)).detached();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 9; ++i) {
        const std::size_t k = (b * 3 + c) * 9 + i;
        const double m = pm[b * 9 + i];
        if (m == 1.0) {
          EXPECT_EQ(v[k], fq[k]);
          EXPECT_EQ(t[k], fq[k]);
        } else {
          EXPECT_EQ(v[k], fq[k] + e[k]);
          EXPECT_NEAR(t[k], fq[k] + e[k] * (1 - m), 1e-15);
        }
      }
}

struct BatchFixture : ::testing::Test {
  ModelConfig cfg = small_config();
  Rng rng{6};
  Encoder<double> enc{cfg, rng};
  Codebook<double> cb{cfg.codebook_n, cfg.channels, rng};
};

TEST_F(BatchFixture, AllVisibleTargetIsZero) {
  auto b = fdm_training_batch(random_tensor({2, 3, 16, 16}, rng), TensorD({2, 1, 16, 16}, 1.0), enc, cb);
  for (double v : b.target.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(b.input.vec(), b.ideal.vec());
}

TEST_F(BatchFixture, FeaturesAlreadyCodesGiveZeroTarget) {
  // Zero weights make every patch encode to zero; a zero codebook entry
  // makes that exactly representable.
  enc.visit("", [](const std::string&, TensorD& t) { t.fill(0.0); });
  for (std::size_t j = 0; j < cb.dim(); ++j) cb.entries[j] = 0.0;
  Rng r2(7);
  auto b = fdm_training_batch(random_tensor({1, 3, 16, 16}, r2), random_mask({1, 1, 16, 16}, r2, 0.5), enc, cb);
  for (double v : b.target.data()) EXPECT_EQ(v, 0.0);
}

TEST_F(BatchFixture, TargetMatchesPerPatchOracle) {
  auto x = random_tensor({2, 3, 16, 16}, rng);
  auto m = random_mask({2, 1, 16, 16}, rng, 0.95);
  auto b = fdm_training_batch(x, m, enc, cb);
  const auto f = enc.encode_value(x);
  const std::size_t c = cfg.channels;
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t py = 0; py < 4; ++py)
      for (std::size_t px = 0; px < 4; ++px) {
        bool visible = true;
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t xx = 0; xx < 4; ++xx) visible = visible && m[(bi * 16 + py * 4 + y) * 16 + px * 4 + xx] == 1.0;
        const std::size_t p = py * 4 + px;
        const auto v = patch_vector(f, bi, p);
        const auto code = cb.entry(static_cast<std::size_t>(nearest_code<double>(v, cb).index));
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double t = b.target[(bi * c + ch) * 16 + p];
          const double in = b.input[(bi * c + ch) * 16 + p];
          if (visible) {
            EXPECT_EQ(t, 0.0);
            EXPECT_EQ(in, v[ch]);
          } else {
            EXPECT_NEAR(t, v[ch] - code[ch], 1e-6);
            EXPECT_EQ(in, code[ch]);
          }
        }
      }
}

TEST_F(BatchFixture, PaperLiteralVariantKeepsVisibleFeatures) {
  auto x = random_tensor({1, 3, 16, 16}, rng);
  auto m = random_mask({1, 1, 16, 16}, rng, 0.95);
  auto b = fdm_training_batch(x, m, enc, cb, FdmTarget::paper_literal, FdmInput::quantized);
  for (std::size_t i = 0; i < b.target.size(); ++i) {
    const double md = b.patch_mask[i % 16];
    EXPECT_EQ(b.target[i], b.ideal[i] * md - b.quantized[i] * (1 - md));
    EXPECT_EQ(b.input[i], b.quantized[i]);
  }
}

TEST(LossQe, PerfectPredictionIsZero) {
  Rng rng(8);
  auto t = random_tensor({1, 3, 2, 2}, rng);
  Tape<double> tape;
  EXPECT_EQ(tape.value(loss_qe(tape, tape.constant(t), tape.constant(t), TensorD({1, 1, 2, 2}, 0.0)))[0], 0.0);
}

TEST(LossQe, ZeroPredictionIsMeanAbsTargetOverMasked) {
  Rng rng(9);
  auto t = random_tensor({2, 3, 2, 2}, rng);
  auto pm = TensorD({2, 1, 2, 2}, {0, 1, 1, 0, 1, 1, 1, 0});
  Tape<double> tape;
  const double got = tape.value(loss_qe(tape, tape.constant(TensorD(t.shape())), tape.constant(t), pm))[0];
  double s = 0;
  int n = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 4; ++i)
        if (pm[b * 4 + i] == 0) {
          s += std::abs(t[(b * 3 + c) * 4 + i]);
          ++n;
        }
  EXPECT_NEAR(got, s / n, 1e-15);
}

TEST(LossQe, NothingMaskedGivesZero) {
  Rng rng(10);
  Tape<double> tape;
  Var l = loss_qe(tape, tape.constant(random_tensor({1, 2, 2, 2}, rng)), tape.constant(random_tensor({1, 2, 2, 2}, rng)),
                  TensorD({1, 1, 2, 2}, 1.0));
  EXPECT_EQ(tape.value(l)[0], 0.0);
}

TEST(LossQe, GradientIsSignOverCountOnMaskedOnly) {
  Rng rng(11);
  auto pred = random_tensor({1, 2, 2, 2}, rng), target = random_tensor({1, 2, 2, 2}, rng);
  const TensorD pm({1, 1, 2, 2}, {0, 1, 0, 1});
  pred.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(loss_qe(tape, tape.parameter(pred), tape.constant(target), pm));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t k = c * 4 + i;
      const double want = pm[i] == 0 ? (pred[k] > target[k] ? 1.0 : -1.0) / 4.0 : 0.0;
      EXPECT_DOUBLE_EQ(pred.grad()[k], want);
    }
  const auto r = testing::grad_check({pred}, [&](Tape<double>& t, const std::vector<Var>& v) {
    return loss_qe(t, v[0], t.constant(target), pm);
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(FdmPredict, GradientCheckThroughDequantize) {
  auto cfg = small_config();
  cfg.channels = 2;
  cfg.fdm_blocks = 1;
  Rng rng(12);
  FdmNet<double> net(cfg, rng);
  for (auto& v : net.output.weight.data()) v = rng.normal() * 0.5;
  const TensorD pm({1, 1, 2, 2}, {0, 1, 0, 0});
  auto target = random_tensor({1, 2, 2, 2}, rng);
  const auto r = testing::grad_check({random_tensor({1, 2, 2, 2}, rng)}, [&](Tape<double>& t, const std::vector<Var>& v) {
    Var e = net.predict(t, v[0], pm);
    Var dq = dequantize(t, v[0], e, pm);
    return mean_sq_diff(t, dq, t.constant(target));
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

}  // namespace
}  // namespace fdm
