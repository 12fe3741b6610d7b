#pragma once

// Central finite-difference check of reverse-accumulation gradients.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pix4cap/nn/ops.hpp"

namespace pix4cap::nn {

struct GradMismatch {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double relative_error = 0;
};

struct GradCheckReport {
  double max_relative_error = 0;
  std::size_t checked = 0;
  std::vector<GradMismatch> failures;  // every element above tolerance
  bool passed() const { return failures.empty(); }
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
  // round-off on vanishing gradients from counting as a relative error.
  double floor = 1e-3;
  // Elements checked per input; larger inputs are sampled deterministically.
  std::size_t max_elements_per_input = 0;
};

using GradFunction = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// `fn` may return a tensor of any shape; non-scalar outputs are contracted
// with a fixed pseudo-random weight so every output element is exercised.
// `inputs` must be leaves created with requires_grad = true.
inline GradCheckReport grad_check(const GradFunction& fn, std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& options = {}) {
  std::vector<double> projection;
  const auto objective = [&](const std::vector<Tensor<double>>& in) {
    const auto out = fn(in);
    if (out.size() == 1) return out;
    if (projection.size() != out.size()) {
      std::mt19937_64 rng(0x5eed);
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      projection.resize(out.size());
      for (auto& w : projection) w = dist(rng);
    }
    return sum(mul(out, Tensor<double>::constant(out.shape(), projection)));
  };

  for (auto& in : inputs) in.zero_grad();
  backward(objective(inputs));
  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) {
    auto g = std::vector<double>(in.grad().begin(), in.grad().end());
    if (g.empty()) g.assign(in.size(), 0.0);
    analytic.push_back(std::move(g));
  }

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_values();
    std::vector<std::size_t> indices;
    const std::size_t limit = options.max_elements_per_input;
    if (limit == 0 || values.size() <= limit) {
      for (std::size_t j = 0; j < values.size(); ++j) indices.push_back(j);
    } else {
      std::mt19937_64 rng(i + 1);
      std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
      for (std::size_t j = 0; j < limit; ++j) indices.push_back(pick(rng));
    }
    for (std::size_t j : indices) {
      const double original = values[j];
      values[j] = original + options.step;
      const double up = objective(inputs).item();
      values[j] = original - options.step;
      const double down = objective(inputs).item();
      values[j] = original;
      const double numeric = (up - down) / (2 * options.step);
      const double a = analytic[i][j];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.checked;
      if (rel > options.tolerance) report.failures.push_back({i, j, a, numeric, rel});
    }
  }
  return report;
}

// Leaf tensor of uniform values in [lo, hi) for gradient checks.
inline Tensor<double> random_leaf(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = dist(rng);
  return Tensor<double>::leaf(std::move(shape), std::move(values), true);
}

}  // namespace pix4cap::nn
