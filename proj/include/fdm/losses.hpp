#pragma once

#include <string>
#include <type_traits>
#include <vector>

#include "fdm/core/layers.hpp"
#include "fdm/model_config.hpp"

namespace fdm {

struct LossWeights {
  double gradient = 5.0;      // lambda_G
  double adversarial = 0.1;   // lambda_A
  double perceptual = 0.1;    // lambda_P
  double style = 250.0;       // lambda_S
  double qe = 1.0;            // lambda_qe
  double rec = 1.0;           // lambda_rec

  void validate() const {
    for (double v : {gradient, adversarial, perceptual, style, qe, rec})
      if (!(v >= 0)) throw ConfigError("loss weights must be non-negative");
  }
};

// Fixed random-weight conv stack (4x4, stride 2) used for perceptual, style
// and diversity features. Never trained.
template <class T>
struct ProxyExtractor {
  std::vector<Conv2d<T>> stages;

  ProxyExtractor() = default;
  explicit ProxyExtractor(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t ch[] = {3, 16, 32, 64};
    for (int s = 0; s < 3; ++s) {
      stages.emplace_back(ch[s], ch[s + 1], 4, 2, 1, rng);
      stages.back().weight.set_requires_grad(false);
      stages.back().bias.set_requires_grad(false);
    }
  }

  std::vector<Var> features(Tape<T>& tape, Var x) {
    std::vector<Var> out;
    for (auto& s : stages) out.push_back(x = relu(tape, s.forward(tape, x)));
    return out;
  }

  std::vector<Tensor<T>> features_value(const Tensor<T>& x) {
    Tape<T> tape(false);
    std::vector<Tensor<T>> out;
    for (Var v : features(tape, tape.constant(x.detached()))) out.push_back(tape.value(v).detached());
    return out;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit(prefix + ".stage" + std::to_string(i), f);
  }
};

// Patch discriminator: three 4x4 stride-2 convs and a 3x3 logit conv.
template <class T>
struct Discriminator {
  std::vector<Conv2d<T>> layers;

  Discriminator() = default;
  explicit Discriminator(Rng& rng) {
    layers.emplace_back(3, 32, 4, 2, 1, rng);
    layers.emplace_back(32, 64, 4, 2, 1, rng);
    layers.emplace_back(64, 128, 4, 2, 1, rng);
    layers.emplace_back(128, 1, 3, 1, 1, rng);
  }

  Var logits(Tape<T>& tape, Var x) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].forward(tape, x);
      if (i + 1 < layers.size()) x = leaky_relu(tape, x, T(0.2));
    }
    return x;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
  }
};

template <class T>
Var l1_loss(Tape<T>& tape, Var pred, Var target) {
  return mean_abs_diff(tape, pred, target);
}

template <class T>
Var gradient_loss(Tape<T>& tape, Var pred, Var target) {
  return add(tape, mean_abs_diff(tape, spatial_diff(tape, pred, 0), spatial_diff(tape, target, 0)),
             mean_abs_diff(tape, spatial_diff(tape, pred, 1), spatial_diff(tape, target, 1)));
}

template <class T>
Var perceptual_loss(Tape<T>& tape, const std::vector<Var>& fp, const std::vector<Var>& ft) {
  Var s = mean_abs_diff(tape, fp[0], ft[0]);
  for (std::size_t i = 1; i < fp.size(); ++i) s = add(tape, s, mean_abs_diff(tape, fp[i], ft[i]));
  return s;
}

template <class T>
Var style_loss(Tape<T>& tape, const std::vector<Var>& fp, const std::vector<Var>& ft) {
  Var s = mean_abs_diff(tape, gram(tape, fp[0]), gram(tape, ft[0]));
  for (std::size_t i = 1; i < fp.size(); ++i) s = add(tape, s, mean_abs_diff(tape, gram(tape, fp[i]), gram(tape, ft[i])));
  return s;
}

// -mean log sigmoid(z) = mean softplus(-z)
template <class T>
Var neg_log_sigmoid(Tape<T>& tape, Var z) {
  return mean(tape, softplus(tape, scale(tape, z, T{-1})));
}

// Generator side: -mean log sigmoid(D(x')).
template <class T>
Var generator_adv_loss(Tape<T>& tape, Discriminator<T>& d, Var pred) {
  return neg_log_sigmoid(tape, d.logits(tape, pred));
}

// -mean[log sigmoid(D(x)) + log(1 - sigmoid(D(x')))]; x' is detached.
template <class T>
Var discriminator_loss(Tape<T>& tape, Discriminator<T>& d, Var pred, Var real) {
  Var fake = d.logits(tape, stop_gradient(tape, pred));
  return add(tape, neg_log_sigmoid(tape, d.logits(tape, real)), mean(tape, softplus(tape, fake)));
}

template <class T>
struct RecTerms {
  Var l1, gradient, adversarial, perceptual, style, total;
  bool has_adversarial = false;
};

// L_rec = L1 + lG LG + lA LA + lP LP + lS LS. Pass d = nullptr (or lA = 0)
// to drop the adversarial term.
template <class T>
RecTerms<T> rec_loss(Tape<T>& tape, Var pred, Var target, std::type_identity_t<Discriminator<T>>* d, ProxyExtractor<T>& pfe,
                     const LossWeights& w) {
  RecTerms<T> r;
  r.l1 = l1_loss(tape, pred, target);
  r.gradient = gradient_loss(tape, pred, target);
  auto fp = pfe.features(tape, pred);
  auto ft = pfe.features(tape, target);
  r.perceptual = perceptual_loss(tape, fp, ft);
  r.style = style_loss(tape, fp, ft);
  r.total = add(tape, r.l1, scale(tape, r.gradient, T(w.gradient)));
  r.total = add(tape, r.total, scale(tape, r.perceptual, T(w.perceptual)));
  r.total = add(tape, r.total, scale(tape, r.style, T(w.style)));
  if (d && w.adversarial > 0) {
    r.adversarial = generator_adv_loss(tape, *d, pred);
    r.has_adversarial = true;
    r.total = add(tape, r.total, scale(tape, r.adversarial, T(w.adversarial)));
  } else {
    r.adversarial = tape.constant(Tensor<T>::scalar(T{0}));
  }
  return r;
}

template <class T>
Var tuning_loss(Tape<T>& tape, Var qe, Var rec, const LossWeights& w) {
  return add(tape, scale(tape, qe, T(w.qe)), scale(tape, rec, T(w.rec)));
}

}  // namespace fdm
