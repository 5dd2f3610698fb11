#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <string>
#include <vector>

#include "fdm/core/error.hpp"
#include "fdm/core/random.hpp"
#include "fdm/core/tensor.hpp"

namespace fdm {

// Images are [3 x H x W] float tensors in [0, 1]; masks are [1 x H x W] with
// 1 = visible, 0 = to be inpainted.

inline std::uint8_t to_byte(float v) {
  const double s = std::floor(static_cast<double>(v) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
}

inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

// ---------------------------------------------------------------------------
// PNG

namespace detail {

inline std::vector<std::uint8_t> png_read_raw(const std::string& path, std::uint32_t format, std::size_t& w,
                                              std::size_t& h) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) throw IoError("png_read: " + path + ": " + img.message);
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("png_read: " + path + ": " + img.message);
  }
  w = img.width;
  h = img.height;
  return buf;
}

inline void png_write_raw(const std::string& path, std::uint32_t format, std::size_t w, std::size_t h,
                          const std::vector<std::uint8_t>& buf) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("png_write: " + path + ": " + img.message);
}

}  // namespace detail

inline TensorF png_read(const std::string& path) {
  std::size_t w = 0, h = 0;
  auto buf = detail::png_read_raw(path, PNG_FORMAT_RGB, w, h);
  TensorF out(Shape{3, h, w});
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * h * w + i] = from_byte(buf[i * 3 + c]);
  return out;
}

inline void png_write(const std::string& path, const TensorF& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("png_write: expected [3 x H x W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> buf(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) buf[i * 3 + c] = to_byte(image[c * h * w + i]);
  detail::png_write_raw(path, PNG_FORMAT_RGB, w, h, buf);
}

// Masks are stored single-channel, 255 = visible; any value >= 128 reads as visible.
inline TensorF mask_read(const std::string& path) {
  std::size_t w = 0, h = 0;
  auto buf = detail::png_read_raw(path, PNG_FORMAT_GRAY, w, h);
  TensorF out(Shape{1, h, w});
  for (std::size_t i = 0; i < h * w; ++i) out[i] = buf[i] >= 128 ? 1.0f : 0.0f;
  return out;
}

inline void mask_write(const std::string& path, const TensorF& mask) {
  if (mask.rank() != 3 || mask.dim(0) != 1) throw ShapeError("mask_write: expected [1 x H x W]");
  std::vector<std::uint8_t> buf(mask.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask[i] > 0.5f ? 255 : 0;
  detail::png_write_raw(path, PNG_FORMAT_GRAY, mask.dim(2), mask.dim(1), buf);
}

// ---------------------------------------------------------------------------
// Resampling

// Half-pixel-centred bilinear resize of a [C x H x W] image.
inline TensorF resize_bilinear(const TensorF& img, std::size_t oh, std::size_t ow) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  TensorF out(Shape{c, oh, ow});
  const double sy = static_cast<double>(h) / oh, sx = static_cast<double>(w) / ow;
  for (std::size_t y = 0; y < oh; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (std::size_t x = 0; x < ow; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = img.ptr() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(ch * oh + y) * ow + x] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

// Shorter side to `size`, then a centred size x size crop.
inline TensorF resize_and_crop(const TensorF& img, std::size_t size) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  const std::size_t oh = h <= w ? size : (h * size + w / 2) / w;
  const std::size_t ow = h <= w ? (w * size + h / 2) / h : size;
  TensorF r = resize_bilinear(img, std::max(oh, size), std::max(ow, size));
  const std::size_t rh = r.dim(1), rw = r.dim(2), oy = (rh - size) / 2, ox = (rw - size) / 2;
  TensorF out(Shape{img.dim(0), size, size});
  for (std::size_t ch = 0; ch < img.dim(0); ++ch)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) out[(ch * size + y) * size + x] = r[(ch * rh + y + oy) * rw + x + ox];
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

inline TensorF synth_texture(std::uint64_t seed, std::uint64_t index, std::size_t size) {
  Rng rng(derive_seed(seed, 0x7e47u, index));
  const double n = static_cast<double>(size);
  std::vector<double> img(3 * size * size, 0.0);
  double base[3];
  for (auto& b : base) b = rng.uniform(0.25, 0.75);

  const int waves = static_cast<int>(rng.uniform_int(2, 4));
  for (int k = 0; k < waves; ++k) {
    const double theta = rng.uniform(0, 2 * std::numbers::pi);
    const double freq = rng.uniform(0.5, 3.0) * 2 * std::numbers::pi / n;
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    double amp[3];
    for (auto& a : amp) a = rng.uniform(-0.25, 0.25) / waves * 2;
    const double cx = std::cos(theta) * freq, cy = std::sin(theta) * freq;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double s = std::sin(cx * x + cy * y + phase);
        for (int c = 0; c < 3; ++c) img[(c * size + y) * size + x] += amp[c] * s;
      }
  }
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < size * size; ++i) img[c * size * size + i] += base[c];

  const int shapes = static_cast<int>(rng.uniform_int(1, 3));
  for (int k = 0; k < shapes; ++k) {
    const bool ellipse = rng.bernoulli(0.5);
    const double cx = rng.uniform(0, n), cy = rng.uniform(0, n);
    const double rx = rng.uniform(0.1, 0.35) * n, ry = rng.uniform(0.1, 0.35) * n;
    double col[3];
    for (auto& v : col) v = rng.uniform(0.05, 0.95);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        const bool inside = ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img[(c * size + y) * size + x] = col[c];
      }
  }

  // Value noise: a coarse random lattice, bilinearly interpolated.
  const std::size_t g = 5;
  std::vector<double> lattice(g * g);
  for (auto& v : lattice) v = rng.uniform(-0.04, 0.04);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = y * (g - 1) / n, fx = x * (g - 1) / n;
      const std::size_t y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
      const double ty = fy - y0, tx = fx - x0;
      const double v = lattice[y0 * g + x0] * (1 - tx) * (1 - ty) + lattice[y0 * g + x0 + 1] * tx * (1 - ty) +
                       lattice[(y0 + 1) * g + x0] * (1 - tx) * ty + lattice[(y0 + 1) * g + x0 + 1] * tx * ty;
      for (int c = 0; c < 3; ++c) img[(c * size + y) * size + x] += v;
    }

  TensorF out(Shape{3, size, size});
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(std::clamp(img[i], 0.0, 1.0));
  return out;
}

// ---------------------------------------------------------------------------
// Irregular masks

struct MaskSpec {
  double lo = 0.2;  // masked fraction in [lo, hi)
  double hi = 0.4;
  int min_strokes = 1;
  int max_strokes = 5;
  int min_steps = 10;
  int max_steps = 40;
  double min_radius = 1.0 / 16;  // brush radius as a fraction of the image side
  double max_radius = 1.0 / 8;
  std::uint64_t seed = 0;

  static MaskSpec small(std::uint64_t seed = 0) { return {0.2, 0.4, 1, 5, 10, 40, 1.0 / 16, 1.0 / 8, seed}; }
  static MaskSpec large(std::uint64_t seed = 0) { return {0.4, 0.6, 1, 5, 10, 40, 1.0 / 16, 1.0 / 8, seed}; }
};

inline double masked_fraction(const TensorF& mask) {
  double s = 0;
  for (float v : mask.data()) s += v;
  return 1.0 - s / static_cast<double>(mask.size());
}

// Union of random-walk brush strokes marks the masked (0) region. Strokes are
// added one at a time; an attempt is accepted as soon as the masked fraction
// lands in [lo, hi), and rejected if it overshoots or runs out of strokes.
inline TensorF gen_irregular_mask(const MaskSpec& spec, std::uint64_t index, std::size_t size) {
  if (!(spec.lo >= 0 && spec.lo < spec.hi && spec.hi <= 1)) throw ConfigError("mask bucket must satisfy 0 <= lo < hi <= 1");
  Rng rng(derive_seed(spec.seed, 0x3a5cu, index));
  const double n = static_cast<double>(size);
  TensorF m(Shape{1, size, size});
  for (int attempt = 0; attempt < 100; ++attempt) {
    m.fill(1.0f);
    std::size_t masked = 0;
    const int strokes = static_cast<int>(rng.uniform_int(spec.min_strokes, spec.max_strokes));
    for (int s = 0; s < strokes; ++s) {
      double x = rng.uniform(0, n), y = rng.uniform(0, n);
      double dir = rng.uniform(0, 2 * std::numbers::pi);
      const double radius = std::max(0.75, rng.uniform(spec.min_radius, spec.max_radius) * n);
      const int steps = static_cast<int>(rng.uniform_int(spec.min_steps, spec.max_steps));
      for (int k = 0; k < steps; ++k) {
        const int y0 = std::max(0, static_cast<int>(std::floor(y - radius)));
        const int y1 = std::min(static_cast<int>(size) - 1, static_cast<int>(std::ceil(y + radius)));
        const int x0 = std::max(0, static_cast<int>(std::floor(x - radius)));
        const int x1 = std::min(static_cast<int>(size) - 1, static_cast<int>(std::ceil(x + radius)));
        for (int py = y0; py <= y1; ++py)
          for (int px = x0; px <= x1; ++px) {
            const double dy = py + 0.5 - y, dx = px + 0.5 - x;
            float& v = m[static_cast<std::size_t>(py) * size + static_cast<std::size_t>(px)];
            if (dx * dx + dy * dy <= radius * radius && v != 0.0f) {
              v = 0.0f;
              ++masked;
            }
          }
        dir += rng.normal() * 0.6;
        x = std::clamp(x + std::cos(dir) * radius, 0.0, n);
        y = std::clamp(y + std::sin(dir) * radius, 0.0, n);
      }
      const double frac = static_cast<double>(masked) / (n * n);
      if (frac >= spec.hi) break;
      if (frac >= spec.lo) return m;
    }
  }
  throw ConfigError("gen_irregular_mask: no mask in [" + std::to_string(spec.lo) + ", " + std::to_string(spec.hi) +
                    ") after 100 attempts; widen the bucket or adjust brush radius / stroke counts");
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<TensorF> images;
  std::vector<std::string> names;

  std::size_t size() const { return images.size(); }
  std::size_t image_size() const { return images.empty() ? 0 : images[0].dim(1); }
};

inline Dataset make_synthetic(std::uint64_t seed, std::size_t count, std::size_t size) {
  Dataset d;
  for (std::size_t i = 0; i < count; ++i) {
    d.images.push_back(synth_texture(seed, i, size));
    char name[32];
    std::snprintf(name, sizeof name, "img_%05zu.png", i);
    d.names.emplace_back(name);
  }
  return d;
}

inline Dataset load_image_dir(const std::string& path, std::size_t size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(path)) throw IoError("load_image_dir: not a directory: " + path);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Dataset d;
  for (const auto& f : files) {
    try {
      d.images.push_back(resize_and_crop(png_read(f.string()), size));
      d.names.push_back(f.filename().string());
    } catch (const IoError&) {
      std::cerr << "warning: skipping non-image file " << f.string() << "\n";
    }
  }
  if (d.images.empty()) throw IoError("load_image_dir: no readable PNG images in " + path);
  return d;
}

// Stacks [C x H x W] tensors into [B x C x H x W].
inline TensorF stack(const std::vector<TensorF>& items, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ShapeError("stack: empty selection");
  const auto& first = items.at(idx[0]);
  Shape s{idx.size()};
  s.insert(s.end(), first.shape().begin(), first.shape().end());
  TensorF out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& t = items.at(idx[i]);
    require_shape(t.shape(), first.shape(), "stack");
    std::copy(t.data().begin(), t.data().end(), out.ptr() + i * first.size());
  }
  return out;
}

// Item b of a [B x ...] batch as a [...] tensor.
inline TensorF unstack(const TensorF& batch, std::size_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(s);
  return TensorF(s, std::vector<float>(batch.ptr() + b * n, batch.ptr() + (b + 1) * n));
}

}  // namespace fdm
