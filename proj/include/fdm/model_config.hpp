#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <string>

#include "fdm/core/error.hpp"

namespace fdm {

enum class FillOrder { raster, confidence };
enum class FdmTarget { masked_error, paper_literal };
enum class FdmInput { mixed, quantized };

inline std::string to_string(FillOrder o) { return o == FillOrder::raster ? "raster" : "confidence"; }
inline std::string to_string(FdmTarget t) { return t == FdmTarget::masked_error ? "masked_error" : "paper_literal"; }
inline std::string to_string(FdmInput i) { return i == FdmInput::mixed ? "mixed" : "quantized"; }

struct SamplerShape {
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
};

// Architecture hyperparameters shared by every submodel.
struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;  // r
  std::size_t channels = 32;   // C
  std::size_t codebook_n = 64;
  std::size_t encoder_blocks = 8;
  std::size_t decoder_blocks_per_stage = 2;
  std::size_t fdm_blocks = 8;
  SamplerShape sampler;
  std::uint64_t init_seed = 1234;
  std::uint64_t proxy_seed = 777;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patches() const { return grid() * grid(); }
  std::size_t levels() const { return static_cast<std::size_t>(std::countr_zero(patch_size)); }

  void validate() const {
    if (patch_size < 2 || !std::has_single_bit(patch_size))
      throw ConfigError("patch_size must be a power of two >= 2, got " + std::to_string(patch_size));
    if (image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (codebook_n < 2) throw ConfigError("codebook_n must be >= 2");
    if (channels == 0) throw ConfigError("channels must be positive");
    if (sampler.heads == 0 || sampler.d_model % sampler.heads != 0)
      throw ConfigError("sampler heads must divide d_model");
  }

  static ModelConfig desk() { return {}; }

  // 256x256 images, r = 8, C = 256, N = 512.
  static ModelConfig paper() {
    ModelConfig c;
    c.image_size = 256;
    c.patch_size = 8;
    c.channels = 256;
    c.codebook_n = 512;
    c.sampler = {512, 35, 8};
    return c;
  }
};

}  // namespace fdm
