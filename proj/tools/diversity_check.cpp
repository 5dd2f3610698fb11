// Recomputes diversity scores from the PNGs written by `fdm evaluate` and
// compares them to diversity.csv. Uses its own double-precision direct
// convolution; only the proxy weights are shared with the library.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fdm/config.hpp"
#include "fdm/data.hpp"
#include "fdm/losses.hpp"

namespace fs = std::filesystem;

struct Map {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(std::size_t ch, std::size_t y, std::size_t x) { return v[(ch * h + y) * w + x]; }
  double at(std::size_t ch, std::size_t y, std::size_t x) const { return v[(ch * h + y) * w + x]; }
};

static Map conv_relu(const Map& in, const fdm::Conv2d<float>& layer) {
  const std::size_t k = layer.kernel(), s = layer.stride, p = layer.pad;
  Map out;
  out.c = layer.out_channels();
  out.h = (in.h + 2 * p - k) / s + 1;
  out.w = (in.w + 2 * p - k) / s + 1;
  out.v.assign(out.c * out.h * out.w, 0.0);
  for (std::size_t o = 0; o < out.c; ++o)
    for (std::size_t y = 0; y < out.h; ++y)
      for (std::size_t x = 0; x < out.w; ++x) {
        double acc = layer.bias[o];
        for (std::size_t i = 0; i < in.c; ++i)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(y * s + ky) - static_cast<long>(p);
              const long ix = static_cast<long>(x * s + kx) - static_cast<long>(p);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(in.h) || ix >= static_cast<long>(in.w)) continue;
              acc += static_cast<double>(layer.weight[((o * in.c + i) * k + ky) * k + kx]) *
                     in.at(i, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
        out.at(o, y, x) = acc > 0 ? acc : 0.0;
      }
  return out;
}

static std::vector<Map> features(const fdm::TensorF& img, const fdm::ProxyExtractor<float>& pfe) {
  Map x{img.dim(0), img.dim(1), img.dim(2), {}};
  for (std::size_t i = 0; i < img.size(); ++i) x.v.push_back(img[i]);
  std::vector<Map> out;
  for (const auto& s : pfe.stages) out.push_back(x = conv_relu(x, s));
  return out;
}

static double distance(const std::vector<Map>& a, const std::vector<Map>& b) {
  double total = 0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    double stage = 0;
    for (std::size_t y = 0; y < a[s].h; ++y)
      for (std::size_t x = 0; x < a[s].w; ++x) {
        double na = 0, nb = 0;
        for (std::size_t c = 0; c < a[s].c; ++c) {
          na += a[s].at(c, y, x) * a[s].at(c, y, x);
          nb += b[s].at(c, y, x) * b[s].at(c, y, x);
        }
        na = std::sqrt(na) + 1e-10;
        nb = std::sqrt(nb) + 1e-10;
        for (std::size_t c = 0; c < a[s].c; ++c) {
          const double d = a[s].at(c, y, x) / na - b[s].at(c, y, x) / nb;
          stage += d * d;
        }
      }
    total += stage / static_cast<double>(a[s].h * a[s].w);
  }
  return total / static_cast<double>(a.size());
}

int main(int argc, char** argv) {
  std::string dir;
  double tol = 1e-5;
  CLI::App app{"Out-of-process diversity recomputation"};
  app.add_option("dir", dir, "evaluate output directory")->required();
  app.add_option("--tol", tol, "absolute tolerance");
  CLI11_PARSE(app, argc, argv);

  try {
    fdm::RunConfig rc;
    rc.apply_file((fs::path(dir) / "evaluate.cfg").string());
    fdm::ProxyExtractor<float> pfe(rc.model.proxy_seed);

    std::ifstream csv(fs::path(dir) / "diversity.csv");
    if (!csv) throw fdm::IoError("cannot read " + (fs::path(dir) / "diversity.csv").string());
    std::string line;
    std::getline(csv, line);
    double worst = 0;
    std::size_t rows = 0;
    while (std::getline(csv, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string bucket, image, pairs, score;
      std::getline(ss, bucket, ',');
      std::getline(ss, image, ',');
      std::getline(ss, pairs, ',');
      std::getline(ss, score, ',');
      const std::size_t n = std::stoul(pairs), idx = std::stoul(image);
      double sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::vector<Map>> f;
        for (std::size_t k : {2 * i, 2 * i + 1}) {
          char name[64];
          std::snprintf(name, sizeof name, "%s_%03zu_s%zu.png", bucket.c_str(), idx, k);
          f.push_back(features(fdm::png_read((fs::path(dir) / "diversity" / name).string()), pfe));
        }
        sum += distance(f[0], f[1]);
      }
      const double recomputed = sum / static_cast<double>(n), reported = std::stod(score);
      const double diff = std::abs(recomputed - reported);
      worst = std::max(worst, diff);
      ++rows;
      std::printf("%s %zu reported %.12g recomputed %.12g diff %.3g\n", bucket.c_str(), idx, reported, recomputed, diff);
    }
    if (rows == 0) throw fdm::IoError("diversity.csv has no rows");
    std::printf("max abs diff %.3g over %zu records (tol %.1g): %s\n", worst, rows, tol, worst <= tol ? "PASS" : "FAIL");
    return worst <= tol ? 0 : 1;
  } catch (const fdm::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
