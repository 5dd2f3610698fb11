#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fdm/core/tensor.hpp"
#include "fdm/losses.hpp"

namespace fdm {

// Images: [C x H x W] in [0, 1] (a leading batch dim of 1 is also accepted).

inline double mse(const TensorF& a, const TensorF& b) {
  require_shape(a.shape(), b.shape(), "mse");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

inline double mae(const TensorF& a, const TensorF& b) {
  require_shape(a.shape(), b.shape(), "mae");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

inline constexpr double kPsnrCap = 100.0;

inline double psnr(const TensorF& a, const TensorF& b) {
  const double e = mse(a, b);
  if (e <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
// K2 = 0.03, data range 1, averaged over the valid region and channels.
inline double ssim(const TensorF& a, const TensorF& b) {
  require_shape(a.shape(), b.shape(), "ssim");
  const std::size_t rank = a.rank();
  if (rank < 2) throw ShapeError("ssim: expected an image");
  const std::size_t h = a.dim(rank - 2), w = a.dim(rank - 1), planes = a.size() / (h * w);
  constexpr int r = 5;
  constexpr double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  if (h < 2 * r + 1 || w < 2 * r + 1) throw ShapeError("ssim: image smaller than the 11x11 window");
  double g[2 * r + 1], gs = 0;
  for (int i = -r; i <= r; ++i) gs += g[i + r] = std::exp(-(i * i) / (2 * sigma * sigma));
  for (double& v : g) v /= gs;

  const std::size_t oh = h - 2 * r, ow = w - 2 * r;
  // Separable valid filtering: rows first, then columns.
  auto filter = [&](const std::vector<double>& src) {
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (int k = 0; k <= 2 * r; ++k) s += g[k] * src[y * w + x + k];
        tmp[y * ow + x] = s;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0;
        for (int k = 0; k <= 2 * r; ++k) s += g[k] * tmp[(y + k) * ow + x];
        out[y * ow + x] = s;
      }
    return out;
  };

  double total = 0;
  std::vector<double> pa(h * w), pb(h * w), paa(h * w), pbb(h * w), pab(h * w);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t i = 0; i < h * w; ++i) {
      pa[i] = a[pl * h * w + i];
      pb[i] = b[pl * h * w + i];
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const auto ma = filter(pa), mb = filter(pb), saa = filter(paa), sbb = filter(pbb), sab = filter(pab);
    double s = 0;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
      s += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += s / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(planes);
}

// Mean over patches of the Euclidean norm of the per-patch feature difference.
// Feature maps are [B x C x h x w].
inline double feature_l2_distance(const TensorF& gen, const TensorF& ideal) {
  require_shape(gen.shape(), ideal.shape(), "feature_l2_distance");
  if (gen.rank() != 4) throw ShapeError("feature_l2_distance: expected [B x C x h x w]");
  const std::size_t nb = gen.dim(0), c = gen.dim(1), p = gen.dim(2) * gen.dim(3);
  double total = 0;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < p; ++i) {
      double s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = static_cast<double>(gen[(b * c + ch) * p + i]) - ideal[(b * c + ch) * p + i];
        s += d * d;
      }
      total += std::sqrt(s);
    }
  return total / static_cast<double>(nb * p);
}

// LPIPS-style distance over the proxy extractor: per stage, unit-normalize
// each position's channel vector, take the squared difference summed over
// channels and averaged over positions; then average the stages.
inline double perceptual_distance(const TensorF& a, const TensorF& b, ProxyExtractor<float>& pfe) {
  require_shape(a.shape(), b.shape(), "perceptual_distance");
  const TensorF a4 = a.rank() == 3 ? a.reshaped({1, a.dim(0), a.dim(1), a.dim(2)}) : a.detached();
  const TensorF b4 = b.rank() == 3 ? b.reshaped({1, b.dim(0), b.dim(1), b.dim(2)}) : b.detached();
  const auto fa = pfe.features_value(a4), fb = pfe.features_value(b4);
  double total = 0;
  for (std::size_t s = 0; s < fa.size(); ++s) {
    const std::size_t nb = fa[s].dim(0), c = fa[s].dim(1), p = fa[s].dim(2) * fa[s].dim(3);
    double stage = 0;
    for (std::size_t bi = 0; bi < nb; ++bi)
      for (std::size_t i = 0; i < p; ++i) {
        double na = 0, nbv = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double va = fa[s][(bi * c + ch) * p + i], vb = fb[s][(bi * c + ch) * p + i];
          na += va * va;
          nbv += vb * vb;
        }
        na = std::sqrt(na) + 1e-10;
        nbv = std::sqrt(nbv) + 1e-10;
        double d = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double diff = fa[s][(bi * c + ch) * p + i] / na - fb[s][(bi * c + ch) * p + i] / nbv;
          d += diff * diff;
        }
        stage += d;
      }
    total += stage / static_cast<double>(nb * p);
  }
  return total / static_cast<double>(fa.size());
}

// Mean perceptual distance over n_pairs pairs; generate(k) returns the k-th
// sample (pair i uses samples 2i and 2i+1).
inline double diversity_score(const std::function<TensorF(std::size_t)>& generate, std::size_t n_pairs,
                              ProxyExtractor<float>& pfe) {
  if (n_pairs == 0) throw ContractError("diversity_score: n_pairs must be positive");
  double s = 0;
  for (std::size_t i = 0; i < n_pairs; ++i) s += perceptual_distance(generate(2 * i), generate(2 * i + 1), pfe);
  return s / static_cast<double>(n_pairs);
}

// Rounds to the 8-bit grid a PNG round trip would produce.
inline TensorF quantize_to_bytes(const TensorF& img) {
  TensorF out = img.detached();
  for (auto& v : out.data()) v = static_cast<float>(std::clamp(std::floor(static_cast<double>(v) * 255.0 + 0.5), 0.0, 255.0)) / 255.0f;
  return out;
}

struct BucketMetrics {
  std::string bucket;
  std::size_t count = 0;
  double psnr = 0, ssim = 0, mae = 0;
  double feature_l2_quantized = 0, feature_l2_dequantized = 0;
  double diversity = 0;
  std::size_t diversity_count = 0;
};

struct MetricReport {
  std::vector<BucketMetrics> buckets;

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(8) << "bucket" << std::right << std::setw(7) << "count" << std::setw(10) << "psnr"
       << std::setw(9) << "ssim" << std::setw(9) << "mae" << std::setw(12) << "feat_l2_q" << std::setw(12)
       << "feat_l2_dq" << std::setw(11) << "diversity" << "\n";
    os << std::fixed;
    for (const auto& b : buckets)
      os << std::left << std::setw(8) << b.bucket << std::right << std::setw(7) << b.count << std::setw(10)
         << std::setprecision(4) << b.psnr << std::setw(9) << b.ssim << std::setw(9) << b.mae << std::setw(12)
         << b.feature_l2_quantized << std::setw(12) << b.feature_l2_dequantized << std::setw(11)
         << std::setprecision(6) << b.diversity << "\n";
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "bucket,count,psnr,ssim,mae,feature_l2_quantized,feature_l2_dequantized,diversity,diversity_count\n";
    char line[512];
    for (const auto& b : buckets) {
      std::snprintf(line, sizeof line, "%s,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%zu\n", b.bucket.c_str(), b.count, b.psnr,
                    b.ssim, b.mae, b.feature_l2_quantized, b.feature_l2_dequantized, b.diversity, b.diversity_count);
      os << line;
    }
    return os.str();
  }
};

}  // namespace fdm
