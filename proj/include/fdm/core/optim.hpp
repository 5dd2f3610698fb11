#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "fdm/core/tensor.hpp"

namespace fdm {

struct AdamConfig {
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

// First/second moment buffers for one parameter.
template <class T>
struct AdamMoments {
  std::vector<T> first;
  std::vector<T> second;
};

// One bias-corrected Adam update in place. `step` is the 1-based count of
// this update. Throws when a gradient is not finite.
template <class T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamMoments<T>& moments, std::uint64_t step, double lr,
               const AdamConfig& cfg, const std::string& name = "parameter") {
  if (param.size() != grad.size()) throw ShapeError("adam_step: gradient size mismatch for " + name);
  if (step == 0) throw ContractError("adam_step: step counter must start at 1");
  if (moments.first.size() != param.size()) {
    moments.first.assign(param.size(), T{0});
    moments.second.assign(param.size(), T{0});
  }
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw ContractError("adam_step: non-finite gradient in " + name + " at element " + std::to_string(i));
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * moments.first[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * moments.second[i] + (1.0 - cfg.beta2) * g * g;
    moments.first[i] = static_cast<T>(m);
    moments.second[i] = static_cast<T>(v);
    const double update = lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    param[i] = static_cast<T>(param[i] - update);
  }
}

// Optimizer over a fixed, named parameter set.
template <class T>
class Adam {
 public:
  using Entry = std::pair<std::string, Tensor<T>*>;

  explicit Adam(std::vector<Entry> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    moments_.resize(params_.size());
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  void step(double lr) {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      if (!p->has_grad()) continue;
      auto g = std::as_const(*p).grad();
      adam_step<T>(p->data(), g, moments_[i], step_, lr, cfg_, name);
    }
  }

  std::uint64_t steps() const { return step_; }
  const std::vector<Entry>& params() const { return params_; }
  const AdamMoments<T>& moments(std::size_t i) const { return moments_.at(i); }

 private:
  std::vector<Entry> params_;
  std::vector<AdamMoments<T>> moments_;
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
};

// Linear warmup from 0 to peak over the first `warmup_epochs`, then cosine
// decay to 0 at `total_epochs`.
struct LrSchedule {
  double peak_lr = 2e-4;
  double warmup_epochs = 1.0;
  double total_epochs = 100.0;

  double at(double epoch) const {
    if (epoch < 0.0) throw ContractError("lr schedule: negative epoch " + std::to_string(epoch));
    if (total_epochs <= warmup_epochs) throw ContractError("lr schedule: total epochs must exceed warmup");
    if (epoch < warmup_epochs) return peak_lr * epoch / warmup_epochs;
    const double progress = std::min(1.0, (epoch - warmup_epochs) / (total_epochs - warmup_epochs));
    return std::max(0.0, peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
  }
};

}  // namespace fdm
