#pragma once

#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fdm/encdec.hpp"

namespace fdm {

template <class T>
struct Codebook {
  Tensor<T> entries;  // [N x C]

  Codebook() = default;
  Codebook(std::size_t n, std::size_t c, Rng& rng) : entries(make_param<T>({n, c}, c, rng)) {
    // Encoder outputs are post-ReLU, so start the entries in the positive orthant.
    for (auto& v : entries.data()) v = std::abs(v);
  }
  explicit Codebook(Tensor<T> e) : entries(std::move(e)) {
    if (entries.rank() != 2 || entries.dim(0) < 2) throw ConfigError("codebook needs at least 2 entries");
  }

  std::size_t size() const { return entries.dim(0); }
  std::size_t dim() const { return entries.dim(1); }
  std::span<const T> entry(std::size_t i) const { return entries.data().subspan(i * dim(), dim()); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) { f(prefix + ".entries", entries); }
};

struct NearestCode {
  int index = 0;
  double sq_distance = 0.0;
};

// Exhaustive nearest entry under squared Euclidean distance; ties go to the
// lowest index.
template <class T>
NearestCode nearest_code(std::span<const T> v, const Codebook<T>& cb) {
  if (v.size() != cb.dim())
    throw ConfigError("nearest_code: vector has " + std::to_string(v.size()) + " channels, codebook has " +
                      std::to_string(cb.dim()));
  NearestCode best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < cb.size(); ++i) {
    const auto e = cb.entry(i);
    double d = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double diff = static_cast<double>(v[j]) - static_cast<double>(e[j]);
      d += diff * diff;
    }
    if (d < best.sq_distance) best = {static_cast<int>(i), d};
  }
  return best;
}

template <class T>
struct Quantized {
  Tensor<T> features;        // [B x C x h x w], every patch vector a codebook entry
  std::vector<int> indices;  // B*h*w, row-major per image
};

// Per-patch vector of a feature map, gathered across channels.
template <class T>
std::vector<T> patch_vector(const Tensor<T>& f, std::size_t b, std::size_t pos) {
  const std::size_t c = f.dim(1), p = f.dim(2) * f.dim(3);
  std::vector<T> v(c);
  for (std::size_t ch = 0; ch < c; ++ch) v[ch] = f[(b * c + ch) * p + pos];
  return v;
}

template <class T>
void set_patch_vector(Tensor<T>& f, std::size_t b, std::size_t pos, std::span<const T> v) {
  const std::size_t c = f.dim(1), p = f.dim(2) * f.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) f[(b * c + ch) * p + pos] = v[ch];
}

template <class T>
Quantized<T> quantize_map(const Tensor<T>& f, const Codebook<T>& cb) {
  if (f.rank() != 4 || f.dim(1) != cb.dim())
    throw ConfigError("quantize_map: feature map " + shape_str(f.shape()) + " does not match codebook dimension " +
                      std::to_string(cb.dim()));
  const std::size_t nb = f.dim(0), p = f.dim(2) * f.dim(3);
  Quantized<T> q{Tensor<T>(f.shape()), std::vector<int>(nb * p)};
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < p; ++i) {
      const auto v = patch_vector(f, b, i);
      const int idx = nearest_code<T>(v, cb).index;
      q.indices[b * p + i] = idx;
      set_patch_vector(q.features, b, i, cb.entry(static_cast<std::size_t>(idx)));
    }
  return q;
}

// Feature map [B x C x h x w] holding the codebook rows selected by `indices`.
template <class T>
Var lookup_codes(Tape<T>& tape, Codebook<T>& cb, const std::vector<int>& indices, std::size_t batch, std::size_t h,
                 std::size_t w) {
  return rows_to_nchw(tape, gather_rows(tape, tape.parameter(cb.entries), indices), batch, h, w);
}

template <class T>
struct QuantizeStep {
  Var straight_through;  // f_q forward, identity backward into f
  Var codes;             // f_q as a differentiable function of the codebook
  std::vector<int> indices;
};

template <class T>
QuantizeStep<T> quantize(Tape<T>& tape, Var f, Codebook<T>& cb) {
  const auto& fv = tape.value(f);
  auto q = quantize_map(fv, cb);
  QuantizeStep<T> s;
  s.codes = lookup_codes(tape, cb, q.indices, fv.dim(0), fv.dim(2), fv.dim(3));
  s.straight_through = straight_through(tape, f, std::move(q.features));
  s.indices = std::move(q.indices);
  return s;
}

template <class T>
struct VqLosses {
  Var codebook;
  Var commitment;
};

// codebook = mean |sg(f) - f_q|^2, commitment = beta * mean |f - sg(f_q)|^2
template <class T>
VqLosses<T> vq_losses(Tape<T>& tape, Var f, Var codes, T beta = T(0.25)) {
  VqLosses<T> l;
  l.codebook = mean_sq_diff(tape, stop_gradient(tape, f), codes);
  l.commitment = scale(tape, mean_sq_diff(tape, f, stop_gradient(tape, codes)), beta);
  return l;
}

// Classification targets for the sampler: nearest-code indices of the
// encoded unmasked images.
template <class T>
std::vector<int> code_indices_of(const Tensor<T>& images, Encoder<T>& encoder, const Codebook<T>& cb) {
  return quantize_map(encoder.encode_value(images), cb).indices;
}

}  // namespace fdm
