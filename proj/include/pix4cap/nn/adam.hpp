#pragma once

#include <cmath>
#include <vector>

#include "pix4cap/nn/layers.hpp"

namespace pix4cap::nn {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Bias-corrected Adam over every parameter of a store. Parameters without a
// gradient buffer (never reached by backward) are left untouched.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(ParameterStore<T>& store) {
    const auto& params = store.all();
    if (first_.size() != params.size()) {
      first_.resize(params.size());
      second_.resize(params.size());
    }
    ++steps_;
    const double correction1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double correction2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<T> tensor = params[p].tensor;
      const auto grad = tensor.grad();
      if (grad.empty()) continue;
      auto values = tensor.mutable_values();
      auto& m = first_[p];
      auto& v = second_[p];
      if (m.empty()) {
        m.assign(values.size(), T(0));
        v.assign(values.size(), T(0));
      }
      for (std::size_t i = 0; i < values.size(); ++i) {
        const T g = grad[i];
        m[i] = static_cast<T>(config_.beta1) * m[i] + static_cast<T>(1 - config_.beta1) * g;
        v[i] = static_cast<T>(config_.beta2) * v[i] + static_cast<T>(1 - config_.beta2) * g * g;
        const T m_hat = m[i] / static_cast<T>(correction1);
        const T v_hat = v[i] / static_cast<T>(correction2);
        values[i] -= static_cast<T>(config_.learning_rate) * m_hat /
                     (std::sqrt(v_hat) + static_cast<T>(config_.epsilon));
      }
    }
  }

  long steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  long steps_ = 0;
  std::vector<std::vector<T>> first_, second_;
};

}  // namespace pix4cap::nn
