#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "pix4cap/nn/layers.hpp"

namespace pix4cap::nn {

// Projection matrices of one multi-head attention block. W_q, W_k, W_v are
// [C, C] and hold the n per-head [C, d] blocks side by side (d = C / n);
// W_o is [n*d, C].
template <class T>
struct AttentionWeights {
  Tensor<T> query, key, value, output;
};

// Additive mask that hides future positions: entry (i, j) is -inf for j > i.
template <class T>
std::vector<T> causal_mask(int length) {
  std::vector<T> mask(static_cast<std::size_t>(length) * length, T(0));
  for (int i = 0; i < length; ++i)
    for (int j = i + 1; j < length; ++j)
      mask[static_cast<std::size_t>(i) * length + j] = -std::numeric_limits<T>::infinity();
  return mask;
}

// Concat(h_1..h_n) W_o with h_i = softmax(Q_i K_i^T / sqrt(d)) V_i,
// Q = x_q W_q, K = x_c W_k, V = x_c W_v. Output has x_q's shape.
// When `attention` is given, the per-head [S_q, S_c] weight maps are stored there.
template <class T>
Tensor<T> multi_head_cross_attention(const Tensor<T>& x_q, const Tensor<T>& x_c,
                                     const AttentionWeights<T>& w, int heads,
                                     const std::vector<T>* mask = nullptr,
                                     std::vector<Tensor<T>>* attention = nullptr) {
  const int width = x_q.cols();
  if (heads <= 0 || width % heads != 0) {
    throw ShapeError("multi_head_cross_attention: width " + std::to_string(width) +
                     " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (x_c.cols() != width) {
    throw ShapeError("multi_head_cross_attention: query " + to_string(x_q.shape()) + " vs context " +
                     to_string(x_c.shape()));
  }
  const int head_dim = width / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(head_dim));

  const auto q = matmul(x_q, w.query);
  const auto k = matmul(x_c, w.key);
  const auto v = matmul(x_c, w.value);
  std::vector<Tensor<T>> outputs;
  outputs.reserve(static_cast<std::size_t>(heads));
  if (attention) attention->clear();
  for (int h = 0; h < heads; ++h) {
    const int start = h * head_dim;
    const auto scores = scale(matmul_transposed(slice_channels(q, start, head_dim),
                                                slice_channels(k, start, head_dim)),
                              inv_scale);
    const auto weights = softmax(scores, mask);
    if (attention) attention->push_back(weights);
    outputs.push_back(matmul(weights, slice_channels(v, start, head_dim)));
  }
  const auto merged = heads == 1 ? outputs.front() : concat_channels(outputs);
  return matmul(merged, w.output);
}

template <class T>
struct MultiHeadCrossAttention {
  AttentionWeights<T> weights;
  int heads = 1;

  MultiHeadCrossAttention() = default;
  MultiHeadCrossAttention(ParameterStore<T>& store, const std::string& name, int width, int heads_)
      : heads(heads_) {
    if (heads_ <= 0 || width % heads_ != 0) {
      throw UsageError("attention width " + std::to_string(width) + " is not divisible by " +
                       std::to_string(heads_) + " heads");
    }
    weights.query = store.weight(name + ".w_q", {width, width}, width);
    weights.key = store.weight(name + ".w_k", {width, width}, width);
    weights.value = store.weight(name + ".w_v", {width, width}, width);
    weights.output = store.weight(name + ".w_o", {width, width}, width);
  }

  Tensor<T> operator()(const Tensor<T>& x_q, const Tensor<T>& x_c, const std::vector<T>* mask = nullptr,
                       std::vector<Tensor<T>>* attention = nullptr) const {
    return multi_head_cross_attention(x_q, x_c, weights, heads, mask, attention);
  }
};

}  // namespace pix4cap::nn
