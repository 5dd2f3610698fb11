#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>

#include "fdm/data.hpp"
#include "fdm/metrics.hpp"

namespace fdm {
namespace {

TEST(Psnr, IdenticalImagesHitCap) {
  const auto a = synth_texture(1, 0, 16);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
}

TEST(Psnr, KnownMse) {
  const TensorF a({1, 2, 2}, 0.0f), b({1, 2, 2}, 0.1f);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
}

TEST(Psnr, MatchesFormula) {
  const auto a = synth_texture(1, 1, 16), b = synth_texture(1, 2, 16);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(a.size() / s), 1e-10);
}

TEST(Mae, Simple) {
  EXPECT_DOUBLE_EQ(mae(TensorF({1, 1, 4}, {0, 0.5, 1, 0.25}), TensorF({1, 1, 4}, {1, 0.5, 0, 0.25})), 0.5);
  EXPECT_THROW(mae(TensorF({1, 1, 4}), TensorF({1, 1, 3})), ShapeError);
}

// Byte fixtures from a 64-bit LCG; reference values were computed with
// scikit-image's structural_similarity (gaussian_weights, sigma 1.5,
// population covariance, data_range 1).
std::vector<std::int64_t> lcg_bytes(std::uint64_t seed, std::size_t n) {
  std::vector<std::int64_t> out(n);
  std::uint64_t s = seed;
  for (auto& v : out) {
    s = s * 6364136223846793005ull + 1442695040888963407ull;
    v = static_cast<std::int64_t>(s >> 56);
  }
  return out;
}

std::pair<TensorF, TensorF> ssim_fixture(int k) {
  std::size_t c = 3, h = 16, w = 16;
  if (k == 1) h = 24, w = 20;
  if (k == 2) c = 1;
  if (k == 3) h = 11, w = 11;
  const std::size_t n = c * h * w;
  std::vector<std::int64_t> a, b(n);
  if (k < 4) {
    a = lcg_bytes(101 + 2 * k, n);
    b = lcg_bytes(202 + 2 * k, n);
  } else if (k < 7) {
    const std::int64_t d = std::array<std::int64_t, 3>{8, 32, 64}[k - 4];
    a = lcg_bytes(110 + k, n);
    const auto nz = lcg_bytes(300 + k, n);
    for (std::size_t i = 0; i < n; ++i) b[i] = std::clamp<std::int64_t>(a[i] + nz[i] % (2 * d + 1) - d, 0, 255);
  } else if (k == 7) {
    a = lcg_bytes(120, n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = 112 + a[i] % 33;
      b[i] = 255 - a[i];
    }
  } else if (k == 8) {
    a = lcg_bytes(121, n);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) b[(ch * h + y) * w + x] = a[(ch * h + y) * w + (x + 1) % w];
  } else if (k == 9) {
    a.resize(n);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) a[(ch * h + y) * w + x] = static_cast<std::int64_t>((16 * x + 4 * y + 20 * ch) % 256);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          b[(ch * h + y) * w + x] = (a[(ch * h + y) * w + x] + a[(ch * h + (y + h - 1) % h) * w + x]) / 2;
  } else if (k == 10) {
    a.assign(n, 64);
    b.assign(n, 192);
  } else {
    a = lcg_bytes(130, n);
    b = a;
  }
  TensorF ta(Shape{c, h, w}), tb(Shape{c, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    ta[i] = from_byte(static_cast<std::uint8_t>(a[i]));
    tb[i] = from_byte(static_cast<std::uint8_t>(b[i]));
  }
  return {ta, tb};
}

struct SsimCase {
  int k;
  double ssim, mse;
};

class SsimReference : public ::testing::TestWithParam<SsimCase> {};

TEST_P(SsimReference, MatchesScikitImage) {
  const auto c = GetParam();
  const auto [a, b] = ssim_fixture(c.k);
  EXPECT_NEAR(ssim(a, b), c.ssim, 1e-4);
  EXPECT_NEAR(mse(a, b), c.mse, 1e-9);
  EXPECT_NEAR(ssim(b, a), ssim(a, b), 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Fixtures, SsimReference,
                         ::testing::Values(SsimCase{0, -0.032569931278, 1.640392341725e-01},
                                           SsimCase{1, 0.009049156410, 1.714900495879e-01},
                                           SsimCase{2, -0.117100167030, 1.888823439549e-01},
                                           SsimCase{3, -0.056608293368, 1.794104648347e-01},
                                           SsimCase{4, 0.998087871603, 3.568939800853e-04},
                                           SsimCase{5, 0.968597968214, 5.137347011879e-03},
                                           SsimCase{6, 0.903191274071, 1.780172708681e-02},
                                           SsimCase{7, -0.477243475775, 5.536335398634e-03},
                                           SsimCase{8, -0.062635987818, 1.674506622419e-01},
                                           SsimCase{9, 0.984961197522, 6.336024549613e-03},
                                           SsimCase{10, 0.600063509890, 2.519646288715e-01},
                                           SsimCase{11, 1.000000000000, 0.000000000000e+00}));

TEST(Ssim, ConstantImagesClosedForm) {
  // Zero variance everywhere leaves only the luminance term.
  const double c1 = 1e-4, a = 0.25, b = 0.75;
  const double want = (2 * a * b + c1) / (a * a + b * b + c1);
  EXPECT_NEAR(ssim(TensorF({3, 12, 12}, 0.25f), TensorF({3, 12, 12}, 0.75f)), want, 1e-7);
}

TEST(Ssim, TooSmallIsShapeError) { EXPECT_THROW(ssim(TensorF({3, 10, 16}), TensorF({3, 10, 16})), ShapeError); }

TEST(FeatureL2, Zero) {
  const TensorF f({2, 4, 3, 3}, 0.5f);
  EXPECT_EQ(feature_l2_distance(f, f), 0.0);
}

TEST(FeatureL2, SinglePatchDiffersByUnitVector) {
  TensorF a({1, 4, 2, 2}), b({1, 4, 2, 2});
  b[2 * 4 + 3] = 1.0f;  // channel 2, patch 3
  EXPECT_DOUBLE_EQ(feature_l2_distance(a, b), 1.0 / 4.0);
}

TEST(FeatureL2, MatchesLoopOracle) {
  Rng rng(3);
  TensorF a({2, 5, 3, 2}), b({2, 5, 3, 2});
  for (auto& v : a.data()) v = static_cast<float>(rng.normal());
  for (auto& v : b.data()) v = static_cast<float>(rng.normal());
  double total = 0;
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        double s = 0;
        for (std::size_t c = 0; c < 5; ++c) {
          const std::size_t i = ((bi * 5 + c) * 3 + y) * 2 + x;
          s += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
        }
        total += std::sqrt(s);
      }
  EXPECT_NEAR(feature_l2_distance(a, b), total / 12.0, 1e-12);
}

TEST(Diversity, IdenticalSamplesScoreZero) {
  ProxyExtractor<float> pfe(7);
  const auto img = synth_texture(2, 0, 32);
  EXPECT_EQ(diversity_score([&](std::size_t) { return img; }, 3, pfe), 0.0);
}

TEST(Diversity, DistinctSamplesScorePositiveAndSymmetric) {
  ProxyExtractor<float> pfe(7);
  const auto a = synth_texture(2, 0, 32), b = synth_texture(2, 1, 32);
  const double d = perceptual_distance(a, b, pfe);
  EXPECT_GT(d, 0.0);
  EXPECT_NEAR(perceptual_distance(b, a, pfe), d, 1e-12);
  // Unit-normalised channel vectors bound each position's term by 4.
  EXPECT_LE(d, 4.0);
  EXPECT_THROW(diversity_score([&](std::size_t) { return a; }, 0, pfe), ContractError);
}

TEST(QuantizeToBytes, MatchesPngGrid) {
  const auto img = synth_texture(4, 0, 16);
  const auto q = quantize_to_bytes(img);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(q[i], from_byte(to_byte(img[i])));
}

}  // namespace
}  // namespace fdm
