#pragma once

// Patch encoder and dual-path decoder.
//
// Images are [B x 3 x H x W] in [0, 1], masks [B x 1 x H x W] with 1 = visible,
// feature maps [B x C x H/r x W/r].

#include <string>
#include <vector>

#include "fdm/core/layers.hpp"
#include "fdm/model_config.hpp"

namespace fdm {

template <class T>
Tensor<T> apply_mask(const Tensor<T>& image, const Tensor<T>& mask) {
  if (image.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || image.dim(0) != mask.dim(0) ||
      image.dim(2) != mask.dim(2) || image.dim(3) != mask.dim(3))
    throw ShapeError("apply_mask: image " + shape_str(image.shape()) + " vs mask " + shape_str(mask.shape()));
  Tensor<T> out(image.shape());
  const std::size_t c = image.dim(1), p = image.dim(2) * image.dim(3);
  for (std::size_t b = 0; b < image.dim(0); ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < p; ++i)
        out[(b * c + ch) * p + i] = mask[b * p + i] != T{0} ? image[(b * c + ch) * p + i] : T{0};
  return out;
}

// Image pair with its masked view x_hat = x * m.
template <class T>
struct ImagePair {
  Tensor<T> image;
  Tensor<T> mask;
  Tensor<T> masked;

  ImagePair(Tensor<T> x, Tensor<T> m) : image(std::move(x)), mask(std::move(m)), masked(apply_mask(image, mask)) {}
};

// [B x 3 x H x W] -> [(B * H/r * W/r) x 3r^2]; patches in row-major grid order,
// each patch flattened as (channel, dy, dx).
template <class T>
Tensor<T> patchify(const Tensor<T>& images, std::size_t r) {
  if (images.rank() != 4) throw ShapeError("patchify: expected [B x C x H x W], got " + shape_str(images.shape()));
  const std::size_t nb = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (r == 0 || h % r != 0 || w % r != 0)
    throw ConfigError("patchify: extents " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by r=" +
                      std::to_string(r));
  const std::size_t gh = h / r, gw = w / r, len = c * r * r;
  Tensor<T> out(Shape{nb * gh * gw, len});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        T* dst = out.ptr() + ((b * gh + py) * gw + px) * len;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t dy = 0; dy < r; ++dy)
            for (std::size_t dx = 0; dx < r; ++dx)
              *dst++ = images[((b * c + ch) * h + py * r + dy) * w + px * r + dx];
      }
  return out;
}

template <class T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t batch, std::size_t channels, std::size_t h, std::size_t w,
                     std::size_t r) {
  if (r == 0 || h % r != 0 || w % r != 0) throw ConfigError("unpatchify: extents not divisible by r");
  const std::size_t gh = h / r, gw = w / r, len = channels * r * r;
  if (patches.rank() != 2 || patches.dim(0) != batch * gh * gw || patches.dim(1) != len)
    throw ShapeError("unpatchify: patches " + shape_str(patches.shape()) + " do not match target geometry");
  Tensor<T> out(Shape{batch, channels, h, w});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px) {
        const T* src = patches.ptr() + ((b * gh + py) * gw + px) * len;
        for (std::size_t ch = 0; ch < channels; ++ch)
          for (std::size_t dy = 0; dy < r; ++dy)
            for (std::size_t dx = 0; dx < r; ++dx) out[((b * channels + ch) * h + py * r + dy) * w + px * r + dx] = *src++;
      }
  return out;
}

// k x k min-pooling of a [B x 1 x H x W] mask.
template <class T>
Tensor<T> min_pool(const Tensor<T>& mask, std::size_t k) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("min_pool: expected [B x 1 x H x W] mask");
  const std::size_t nb = mask.dim(0), h = mask.dim(2), w = mask.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0)
    throw ConfigError("min_pool: extents " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                      std::to_string(k));
  const std::size_t oh = h / k, ow = w / k;
  Tensor<T> out(Shape{nb, 1, oh, ow}, T{1});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        T& o = out[(b * oh + y / k) * ow + x / k];
        o = std::min(o, mask[(b * h + y) * w + x]);
      }
  return out;
}

// Patch-level mask m_d and per-level decoder masks m_n; level 0 is full
// resolution, level n is downsampled by 2^n.
template <class T>
struct MaskPyramid {
  Tensor<T> patch;
  std::vector<Tensor<T>> levels;
};

template <class T>
MaskPyramid<T> build_mask_pyramid(const Tensor<T>& mask, std::size_t r, std::size_t levels) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("build_mask_pyramid: expected [B x 1 x H x W] mask");
  const std::size_t div = std::size_t{1} << levels;
  if (mask.dim(2) % div != 0 || mask.dim(3) % div != 0)
    throw ConfigError("build_mask_pyramid: extents not divisible by 2^" + std::to_string(levels));
  MaskPyramid<T> p;
  p.patch = min_pool(mask, r);
  p.levels.push_back(mask.detached());
  for (std::size_t n = 1; n < levels; ++n) p.levels.push_back(min_pool(p.levels.back(), 2));
  return p;
}

// f_n = f'_n * (1 - m_n) + x_hat_n * m_n
template <class T>
Var compose_level(Tape<T>& tape, Var upsampled, Var image_features, const Tensor<T>& level_mask) {
  return blend(tape, upsampled, image_features, level_mask);
}

// Residual block on token rows: y = ReLU(x + Linear(x)).
template <class T>
struct LinearResBlock {
  Linear<T> fc;

  LinearResBlock() = default;
  LinearResBlock(std::size_t c, Rng& rng) : fc(c, c, rng) {}

  Var forward(Tape<T>& tape, Var x) { return relu(tape, add(tape, x, fc.forward(tape, x))); }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) { fc.visit(prefix + ".fc", f); }
};

// Patch-local encoder: every patch is mapped independently to a C-vector.
template <class T>
struct Encoder {
  std::size_t patch_size = 0;
  Linear<T> input;
  std::vector<LinearResBlock<T>> blocks;
  Linear<T> output;

  Encoder() = default;
  Encoder(const ModelConfig& cfg, Rng& rng)
      : patch_size(cfg.patch_size), input(3 * cfg.patch_size * cfg.patch_size, cfg.channels, rng) {
    for (std::size_t i = 0; i < cfg.encoder_blocks; ++i) blocks.emplace_back(cfg.channels, rng);
    output = Linear<T>(cfg.channels, cfg.channels, rng);
  }

  // Rows [(B*P) x 3r^2] -> rows [(B*P) x C].
  Var encode_rows(Tape<T>& tape, Var patches) {
    Var h = relu(tape, input.forward(tape, patches));
    for (auto& b : blocks) h = b.forward(tape, h);
    return relu(tape, output.forward(tape, h));
  }

  // [B x 3 x H x W] masked images -> feature map [B x C x H/r x W/r].
  Var encode(Tape<T>& tape, const Tensor<T>& masked_images) {
    const std::size_t nb = masked_images.dim(0);
    const std::size_t gh = masked_images.dim(2) / patch_size, gw = masked_images.dim(3) / patch_size;
    Var rows = encode_rows(tape, tape.constant(patchify(masked_images, patch_size)));
    return rows_to_nchw(tape, rows, nb, gh, gw);
  }

  Tensor<T> encode_value(const Tensor<T>& masked_images) {
    Tape<T> tape(false);
    return tape.value(encode(tape, masked_images)).detached();
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    input.visit(prefix + ".input", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i), f);
    output.visit(prefix + ".output", f);
  }
};

template <class T>
struct DecodeTrace {
  Var output;                       // [B x 3 x H x W], unclamped
  std::vector<Var> composed;        // f_n after each upsample, coarse to fine
  std::vector<Var> image_features;  // x_hat_n used at each of those steps
};

// Feature upsampling path with per-level injection of the masked-image
// downsampling path. Block schedule: (2 res-blocks, upsample) x levels, then
// 2 res-blocks and a 3x3 conv to RGB.
template <class T>
struct Decoder {
  std::size_t levels = 0;
  std::vector<std::vector<ConvResBlock<T>>> stages;  // levels + 1 stages
  std::vector<ConvTranspose2d<T>> ups;               // coarse to fine
  std::vector<Conv2d<T>> downs;                      // downs[0] at full resolution
  Conv2d<T> to_rgb;

  Decoder() = default;
  Decoder(const ModelConfig& cfg, Rng& rng) : levels(cfg.levels()) {
    const std::size_t c = cfg.channels;
    for (std::size_t s = 0; s <= levels; ++s) {
      stages.emplace_back();
      for (std::size_t b = 0; b < cfg.decoder_blocks_per_stage; ++b) stages.back().emplace_back(c, rng);
      if (s < levels) ups.emplace_back(c, c, rng);
    }
    for (std::size_t n = 0; n < levels; ++n)
      downs.emplace_back(n == 0 ? 3 : c, c, n == 0 ? 3 : 4, n == 0 ? 1 : 2, 1, rng);
    to_rgb = Conv2d<T>(c, 3, 3, 1, 1, rng);
  }

  // Downsampled masked-image features x_hat_n, n = 0 (full) .. levels-1.
  std::vector<Var> image_path(Tape<T>& tape, const Tensor<T>& masked_images) {
    std::vector<Var> out;
    Var h = tape.constant(masked_images.detached());
    for (auto& d : downs) {
      h = relu(tape, d.forward(tape, h));
      out.push_back(h);
    }
    return out;
  }

  DecodeTrace<T> decode_traced(Tape<T>& tape, Var features, const Tensor<T>& masked_images,
                               const MaskPyramid<T>& pyramid) {
    const auto& fs = tape.shape(features);
    if (pyramid.levels.size() != levels || fs.size() != 4 || masked_images.rank() != 4 ||
        fs[2] << levels != masked_images.dim(2) || fs[3] << levels != masked_images.dim(3) ||
        pyramid.levels[0].dim(2) != masked_images.dim(2))
      throw ConfigError("decode: feature map " + shape_str(fs) + " does not match image " +
                        shape_str(masked_images.shape()) + " with " + std::to_string(levels) + " levels");
    DecodeTrace<T> trace;
    auto xs = image_path(tape, masked_images);
    Var h = features;
    for (std::size_t s = 0; s < levels; ++s) {
      for (auto& b : stages[s]) h = b.forward(tape, h);
      h = ups[s].forward(tape, h);
      const std::size_t n = levels - 1 - s;
      h = compose_level(tape, h, xs[n], pyramid.levels[n]);
      trace.composed.push_back(h);
      trace.image_features.push_back(xs[n]);
    }
    for (auto& b : stages[levels]) h = b.forward(tape, h);
    trace.output = to_rgb.forward(tape, h);
    return trace;
  }

  Var decode(Tape<T>& tape, Var features, const Tensor<T>& masked_images, const MaskPyramid<T>& pyramid) {
    return decode_traced(tape, features, masked_images, pyramid).output;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].size(); ++b)
        stages[s][b].visit(prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b), f);
    for (std::size_t i = 0; i < ups.size(); ++i) ups[i].visit(prefix + ".up" + std::to_string(i), f);
    for (std::size_t i = 0; i < downs.size(); ++i) downs[i].visit(prefix + ".down" + std::to_string(i), f);
    to_rgb.visit(prefix + ".to_rgb", f);
  }
};

}  // namespace fdm
