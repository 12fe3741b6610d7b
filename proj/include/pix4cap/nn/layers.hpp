#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pix4cap/core/errors.hpp"
#include "pix4cap/core/rng.hpp"
#include "pix4cap/nn/ops.hpp"

namespace pix4cap::nn {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

// Owns every trainable tensor of a model, in creation order. Names are unique
// and double as checkpoint record keys.
template <class T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(derive_seed(seed, "init")) {}

  // Weights: uniform in +-1/sqrt(fan_in). Biases and norm offsets: zero.
  // Each weight draws from its own stream keyed by name, so initial values do
  // not depend on which other parameters exist.
  Tensor<T> weight(const std::string& name, Shape shape, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Rng rng(derive_seed(seed_, name));
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng));
    return add(name, std::move(shape), std::move(values));
  }
  Tensor<T> zeros(const std::string& name, Shape shape) {
    std::vector<T> values(numel(shape), T(0));
    return add(name, std::move(shape), std::move(values));
  }
  Tensor<T> ones(const std::string& name, Shape shape) {
    std::vector<T> values(numel(shape), T(1));
    return add(name, std::move(shape), std::move(values));
  }
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> values) {
    if (index_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
    auto t = Tensor<T>::leaf(std::move(shape), std::move(values), true);
    index_[name] = params_.size();
    params_.push_back({name, t});
    return t;
  }

  const std::vector<Parameter<T>>& all() const { return params_; }
  std::size_t count() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::uint64_t seed_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]; undefined when built without bias

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, bool with_bias = true)
      : weight(store.weight(name + ".weight", {in, out}, in)) {
    if (with_bias) bias = store.zeros(name + ".bias", {out});
  }
  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add_bias(y, bias) : y;
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, int width)
      : gamma(store.ones(name + ".gamma", {width})), beta(store.zeros(name + ".beta", {width})) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  int stride = 1, padding = 0;

  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel, int stride_,
         int padding_)
      : weight(store.weight(name + ".weight", {kernel, kernel, in, out}, kernel * kernel * in)),
        bias(store.zeros(name + ".bias", {out})),
        stride(stride_),
        padding(padding_) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }
};

// Fixed (4, 2, 1) transposed convolution: exact x2 upsampling.
template <class T>
struct Upsample2x {
  static constexpr int kKernel = 4, kStride = 2, kPadding = 1;
  Tensor<T> weight, bias;

  Upsample2x() = default;
  Upsample2x(ParameterStore<T>& store, const std::string& name, int in, int out)
      : weight(store.weight(name + ".weight", {in, kKernel, kKernel, out}, in * 4)),
        bias(store.zeros(name + ".bias", {out})) {}
  Tensor<T> operator()(const Tensor<T>& x) const {
    return deconv2d(x, weight, bias, kStride, kPadding);
  }
};

// conv -> per-position channel layer norm -> ReLU
template <class T>
struct ConvBlock {
  Conv2d<T> conv;
  LayerNorm<T> norm;

  ConvBlock() = default;
  ConvBlock(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel = 3,
            int stride = 1)
      : conv(store, name + ".conv", in, out, kernel, stride, kernel / 2),
        norm(store, name + ".norm", out) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return relu(norm(conv(x))); }
};

template <class T>
struct FeedForward {
  Linear<T> expand, project;

  FeedForward() = default;
  FeedForward(ParameterStore<T>& store, const std::string& name, int width, int hidden)
      : expand(store, name + ".expand", width, hidden), project(store, name + ".project", hidden, width) {}
  Tensor<T> operator()(const Tensor<T>& x) const { return project(relu(expand(x))); }
};

}  // namespace pix4cap::nn
