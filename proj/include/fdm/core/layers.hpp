#pragma once

#include <functional>
#include <optional>
#include <string>

#include "fdm/core/ops.hpp"

namespace fdm {

template <class T>
using ParamVisitor = std::function<void(const std::string&, Tensor<T>&)>;

template <class T>
Tensor<T> make_param(Shape shape, std::size_t fan_in, Rng& rng) {
  auto t = Tensor<T>::uniform_init(std::move(shape), fan_in, rng);
  t.set_requires_grad(true);
  return t;
}

// y = x W + b, W stored [in x out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(make_param<T>({in, out}, in, rng)), bias(make_param<T>({out}, in, rng)) {}

  Var forward(Tape<T>& tape, Var x) { return linear(tape, x, tape.parameter(weight), tape.parameter(bias)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;  // [out x in x k x k]
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t pad_, Rng& rng)
      : weight(make_param<T>({out, in, k, k}, in * k * k, rng)),
        bias(make_param<T>({out}, in * k * k, rng)),
        stride(stride_),
        pad(pad_) {}

  Var forward(Tape<T>& tape, Var x) {
    return conv2d(tape, x, tape.parameter(weight), tape.parameter(bias), stride, pad);
  }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }
};

// 4x4, stride 2, pad 1 upsampler.
template <class T>
struct ConvTranspose2d {
  Tensor<T> weight;  // [in x out x 4 x 4]
  Tensor<T> bias;

  ConvTranspose2d() = default;
  ConvTranspose2d(std::size_t in, std::size_t out, Rng& rng)
      : weight(make_param<T>({in, out, 4, 4}, in * 4, rng)), bias(make_param<T>({out}, in * 4, rng)) {}

  Var forward(Tape<T>& tape, Var x) {
    return conv_transpose2d(tape, x, tape.parameter(weight), tape.parameter(bias));
  }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
  std::size_t in_channels() const { return weight.dim(0); }
  std::size_t out_channels() const { return weight.dim(1); }
};

// y = ReLU(x + Conv1x1(ReLU(Conv3x3(x))))
template <class T>
struct ConvResBlock {
  Conv2d<T> conv3;
  Conv2d<T> conv1;

  ConvResBlock() = default;
  ConvResBlock(std::size_t channels, Rng& rng)
      : conv3(channels, channels, 3, 1, 1, rng), conv1(channels, channels, 1, 1, 0, rng) {}

  Var forward(Tape<T>& tape, Var x) {
    Var h = relu(tape, conv3.forward(tape, x));
    return relu(tape, add(tape, x, conv1.forward(tape, h)));
  }
  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    conv3.visit(prefix + ".conv3", f);
    conv1.visit(prefix + ".conv1", f);
  }
};

template <class T, class Module>
std::size_t count_params(Module& m) {
  std::size_t n = 0;
  m.visit("", [&](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

template <class T, class Module>
void set_trainable(Module& m, bool on) {
  m.visit("", [&](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
}

template <class T, class Module>
void collect_params(Module& m, const std::string& prefix, std::vector<std::pair<std::string, Tensor<T>*>>& out) {
  m.visit(prefix, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
}

}  // namespace fdm
