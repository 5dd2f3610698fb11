#pragma once

// Feature dequantization: predict the quantization error of a quantized
// feature map and add it back at masked patches.

#include <string>
#include <vector>

#include "fdm/quantizer.hpp"

namespace fdm {

template <class T>
struct FdmNet {
  Conv2d<T> input;  // 1x1, (C+1) -> C
  std::vector<ConvResBlock<T>> blocks;
  Conv2d<T> output;  // 1x1, C -> C, zero-initialized

  FdmNet() = default;
  FdmNet(const ModelConfig& cfg, Rng& rng) : input(cfg.channels + 1, cfg.channels, 1, 1, 0, rng) {
    for (std::size_t i = 0; i < cfg.fdm_blocks; ++i) blocks.emplace_back(cfg.channels, rng);
    output = Conv2d<T>(cfg.channels, cfg.channels, 1, 1, 0, rng);
    output.weight.fill(T{0});
    output.bias.fill(T{0});
  }

  std::size_t channels() const { return output.out_channels(); }

  // f_q [B x C x h x w], m_d [B x 1 x h x w] -> predicted error [B x C x h x w].
  Var predict(Tape<T>& tape, Var fq, const Tensor<T>& patch_mask) {
    const auto& s = tape.shape(fq);
    if (s.size() != 4 || s[1] != channels() || patch_mask.rank() != 4 || patch_mask.dim(0) != s[0] ||
        patch_mask.dim(1) != 1 || patch_mask.dim(2) != s[2] || patch_mask.dim(3) != s[3])
      throw ConfigError("fdm_predict: features " + shape_str(s) + " and patch mask " +
                        shape_str(patch_mask.shape()) + " are inconsistent with C=" + std::to_string(channels()));
    Var h = input.forward(tape, concat_channels(tape, fq, tape.constant(patch_mask.detached())));
    for (auto& b : blocks) h = b.forward(tape, h);
    return output.forward(tape, h);
  }

  Tensor<T> predict_value(const Tensor<T>& fq, const Tensor<T>& patch_mask) {
    Tape<T> tape(false);
    return tape.value(predict(tape, tape.constant(fq.detached()), patch_mask)).detached();
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    input.visit(prefix + ".input", f);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + ".block" + std::to_string(i), f);
    output.visit(prefix + ".output", f);
  }
};

// f_dq = f_q + e * (1 - m_d)
template <class T>
Var dequantize(Tape<T>& tape, Var fq, Var error, const Tensor<T>& patch_mask) {
  return blend(tape, add(tape, fq, error), fq, patch_mask);
}

template <class T>
Tensor<T> dequantize_value(const Tensor<T>& fq, const Tensor<T>& error, const Tensor<T>& patch_mask) {
  require_shape(fq.shape(), error.shape(), "dequantize");
  const std::size_t nb = fq.dim(0), c = fq.dim(1), p = fq.dim(2) * fq.dim(3);
  Tensor<T> out = fq.detached();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < p; ++i)
        if (patch_mask[b * p + i] == T{0}) out[(b * c + ch) * p + i] += error[(b * c + ch) * p + i];
  return out;
}

template <class T>
struct FdmBatch {
  Tensor<T> input;          // f_mix (or f'_q), [B x C x h x w]
  Tensor<T> patch_mask;     // m_d
  Tensor<T> target;         // [B x C x h x w]
  Tensor<T> ideal;          // f'
  Tensor<T> quantized;      // f'_q
  std::vector<int> indices;
};

// Sampler-free training pair from unmasked images: masked patches get their
// ground-truth nearest code, so the quantization error is known exactly.
template <class T>
FdmBatch<T> fdm_training_batch(const Tensor<T>& images, const Tensor<T>& mask, Encoder<T>& encoder,
                               const Codebook<T>& cb, FdmTarget target = FdmTarget::masked_error,
                               FdmInput input = FdmInput::mixed) {
  FdmBatch<T> b;
  b.ideal = encoder.encode_value(images);
  auto q = quantize_map(b.ideal, cb);
  b.quantized = std::move(q.features);
  b.indices = std::move(q.indices);
  b.patch_mask = min_pool(mask, encoder.patch_size);
  const std::size_t nb = b.ideal.dim(0), c = b.ideal.dim(1), p = b.ideal.dim(2) * b.ideal.dim(3);
  b.input = Tensor<T>(b.ideal.shape());
  b.target = Tensor<T>(b.ideal.shape());
  for (std::size_t bi = 0; bi < nb; ++bi)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < p; ++i) {
        const std::size_t idx = (bi * c + ch) * p + i;
        const T m = b.patch_mask[bi * p + i];
        const T f = b.ideal[idx], fq = b.quantized[idx];
        b.input[idx] = input == FdmInput::mixed ? f * m + fq * (T{1} - m) : fq;
        b.target[idx] = target == FdmTarget::masked_error ? (f - fq) * (T{1} - m) : f * m - fq * (T{1} - m);
      }
  return b;
}

// Mean |prediction - target| over masked patches and all channels.
template <class T>
Var loss_qe(Tape<T>& tape, Var prediction, Var target, const Tensor<T>& patch_mask) {
  const auto& s = tape.shape(prediction);
  require_shape(s, tape.shape(target), "loss_qe");
  const std::size_t nb = s[0], c = s[1], p = s[2] * s[3];
  Tensor<T> w(s);
  std::size_t masked = 0;
  for (std::size_t bi = 0; bi < nb; ++bi)
    for (std::size_t i = 0; i < p; ++i) {
      if (patch_mask[bi * p + i] != T{0}) continue;
      ++masked;
      for (std::size_t ch = 0; ch < c; ++ch) w[(bi * c + ch) * p + i] = T{1};
    }
  if (masked == 0) return tape.constant(Tensor<T>::scalar(T{0}));
  return mean_abs_diff(tape, prediction, target, w, static_cast<T>(masked * c));
}

}  // namespace fdm
