#pragma once

// Differentiable primitives. Every op takes and returns Tensor handles; the
// channel (last) dimension is the matrix column dimension for all of them.

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "pix4cap/nn/tensor.hpp"

namespace pix4cap::nn {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline Shape with_last(Shape shape, int last) {
  if (shape.empty()) return {last};
  shape.back() = last;
  return shape;
}

template <class T>
void accumulate(Node<T>* dst, const Buffer<T>& src) {
  if (!dst->requires_grad) return;
  auto& g = dst->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

template <class T>
MatMap<T> grad_matrix(Node<T>* node, int rows, int cols) {
  return {node->ensure_grad().data(), rows, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(self.parents[0].get(), self.grad);
    detail::accumulate(self.parents[1].get(), self.grad);
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    detail::accumulate(self.parents[0].get(), self.grad);
    Node<T>* rhs = self.parents[1].get();
    if (!rhs->requires_grad) return;
    auto& g = rhs->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>* pa = self.parents[0].get();
    Node<T>* pb = self.parents[1].get();
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a}, [factor](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

// x[r, c] + bias[c]
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const int rows = x.rows(), cols = x.cols();
  detail::require(static_cast<int>(bias.size()) == cols,
                  "add_bias: bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
  Buffer<T> out(x.values().begin(), x.values().end());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += bias[c];
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [rows, cols](Node<T>& self) {
    detail::accumulate(self.parents[0].get(), self.grad);
    Node<T>* pb = self.parents[1].get();
    if (!pb->requires_grad) return;
    auto& g = pb->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) g[c] += self.grad[static_cast<std::size_t>(r) * cols + c];
  });
}

// x[r, c] + column[r, 0]
template <class T>
Tensor<T> add_column(const Tensor<T>& x, const Tensor<T>& column) {
  const int rows = x.rows(), cols = x.cols();
  detail::require(column.cols() == 1 && column.rows() == rows,
                  "add_column: column " + to_string(column.shape()) + " vs input " +
                      to_string(x.shape()));
  Buffer<T> out(x.values().begin(), x.values().end());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] += column[r];
  return make_result<T>(x.shape(), std::move(out), {x, column}, [rows, cols](Node<T>& self) {
    detail::accumulate(self.parents[0].get(), self.grad);
    Node<T>* pc = self.parents[1].get();
    if (!pc->requires_grad) return;
    auto& g = pc->ensure_grad();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) g[r] += self.grad[static_cast<std::size_t>(r) * cols + c];
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.size());
  // NaN passes through so divergence stays visible downstream.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] < T(0) ? T(0) : x[i];
  return make_result<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (self.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  return make_result<T>({1}, {total}, {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// Same values, new shape. Copies; the graphs here are small enough.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  return make_result<T>(std::move(shape), Buffer<T>(x.values().begin(), x.values().end()),
                        {x}, [](Node<T>& self) { detail::accumulate(self.parents[0].get(), self.grad); });
}

// ---------------------------------------------------------------------------
// Matrix products. Leading dimensions of `a` are kept: [..., k] x [k, n] -> [..., n].

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  detail::require(b.rows() == k,
                  "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Buffer<T> out(static_cast<std::size_t>(m) * n);
  MatMap<T>(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  return make_result<T>(detail::with_last(a.shape(), n), std::move(out), {a, b},
                        [m, k, n](Node<T>& self) {
                          Node<T>* pa = self.parents[0].get();
                          Node<T>* pb = self.parents[1].get();
                          ConstMatMap<T> dy(self.grad.data(), m, n);
                          if (pa->requires_grad)
                            detail::grad_matrix(pa, m, k).noalias() +=
                                dy * ConstMatMap<T>(pb->value.data(), k, n).transpose();
                          if (pb->requires_grad)
                            detail::grad_matrix(pb, k, n).noalias() +=
                                ConstMatMap<T>(pa->value.data(), m, k).transpose() * dy;
                        });
}

// a [m, k] x b[n, k]^T -> [m, n]
template <class T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  const int m = a.rows(), k = a.cols(), n = b.rows();
  detail::require(b.cols() == k, "matmul_transposed: " + to_string(a.shape()) + " x " +
                                     to_string(b.shape()) + "^T");
  Buffer<T> out(static_cast<std::size_t>(m) * n);
  MatMap<T>(out.data(), m, n).noalias() = a.matrix() * b.matrix().transpose();
  return make_result<T>({m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& self) {
    Node<T>* pa = self.parents[0].get();
    Node<T>* pb = self.parents[1].get();
    ConstMatMap<T> dy(self.grad.data(), m, n);
    if (pa->requires_grad)
      detail::grad_matrix(pa, m, k).noalias() += dy * ConstMatMap<T>(pb->value.data(), n, k);
    if (pb->requires_grad)
      detail::grad_matrix(pb, n, k).noalias() +=
          dy.transpose() * ConstMatMap<T>(pa->value.data(), m, k);
  });
}

// ---------------------------------------------------------------------------
// Slicing and concatenation

// Concatenates along the last dimension. Leading shape taken from the first part.
template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const int rows = parts[0].rows();
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "concat_channels: row mismatch " + to_string(parts[0].shape()) +
                                          " vs " + to_string(p.shape()));
    widths.push_back(p.cols());
    total += p.cols();
  }
  Buffer<T> out(static_cast<std::size_t>(rows) * total);
  int offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    MatMap<T>(out.data(), rows, total).middleCols(offset, widths[i]) = parts[i].matrix();
    offset += widths[i];
  }
  return make_result<T>(detail::with_last(parts[0].shape(), total), std::move(out), parts,
                        [rows, total, widths](Node<T>& self) {
                          ConstMatMap<T> dy(self.grad.data(), rows, total);
                          int off = 0;
                          for (std::size_t i = 0; i < widths.size(); ++i) {
                            Node<T>* p = self.parents[i].get();
                            if (p->requires_grad)
                              detail::grad_matrix(p, rows, widths[i]) += dy.middleCols(off, widths[i]);
                            off += widths[i];
                          }
                        });
}

// Stacks two sequences [Sa, C] and [Sb, C] into [Sa + Sb, C].
template <class T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.cols(),
                  "concat_rows: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const std::size_t na = a.size();
  Buffer<T> out(a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return make_result<T>({a.rows() + b.rows(), a.cols()}, std::move(out), {a, b},
                        [na](Node<T>& self) {
                          Node<T>* pa = self.parents[0].get();
                          Node<T>* pb = self.parents[1].get();
                          if (pa->requires_grad) {
                            auto& g = pa->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                          }
                          if (pb->requires_grad) {
                            auto& g = pb->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
                          }
                        });
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int width) {
  const int rows = x.rows(), cols = x.cols();
  detail::require(start >= 0 && width > 0 && start + width <= cols,
                  "slice_channels: [" + std::to_string(start) + ", +" + std::to_string(width) +
                      ") out of " + to_string(x.shape()));
  Buffer<T> out(static_cast<std::size_t>(rows) * width);
  MatMap<T>(out.data(), rows, width) = x.matrix().middleCols(start, width);
  return make_result<T>(detail::with_last(x.shape(), width), std::move(out), {x},
                        [rows, cols, start, width](Node<T>& self) {
                          detail::grad_matrix(self.parents[0].get(), rows, cols).middleCols(start, width) +=
                              ConstMatMap<T>(self.grad.data(), rows, width);
                        });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

// Normalizes each row over the last dimension, then applies gamma/beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const int rows = x.rows(), cols = x.cols();
  detail::require(static_cast<int>(gamma.size()) == cols && static_cast<int>(beta.size()) == cols,
                  "layer_norm: affine size vs input " + to_string(x.shape()));
  Buffer<T> normed(x.size()), inv_std(static_cast<std::size_t>(rows)), out(x.size());
  for (int r = 0; r < rows; ++r) {
    const T* row = x.values().data() + static_cast<std::size_t>(r) * cols;
    T mu = 0;
    for (int c = 0; c < cols; ++c) mu += row[c];
    mu /= cols;
    T var = 0;
    for (int c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= cols;
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (int c = 0; c < cols; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * cols + c;
      normed[i] = (row[c] - mu) * is;
      out[i] = normed[i] * gamma[c] + beta[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, cols, normed = std::move(normed), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>* px = self.parents[0].get();
        Node<T>* pg = self.parents[1].get();
        Node<T>* pb = self.parents[2].get();
        const auto& gamma_v = pg->value;
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->ensure_grad();
          auto& gb = pb->ensure_grad();
          for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
              const std::size_t i = static_cast<std::size_t>(r) * cols + c;
              gg[c] += self.grad[i] * normed[i];
              gb[c] += self.grad[i];
            }
        }
        if (!px->requires_grad) return;
        auto& gx = px->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          T mean_d = 0, mean_dn = 0;
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            const T d = self.grad[i] * gamma_v[c];
            mean_d += d;
            mean_dn += d * normed[i];
          }
          mean_d /= cols;
          mean_dn /= cols;
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            const T d = self.grad[i] * gamma_v[c];
            gx[i] += inv_std[r] * (d - mean_d - normed[i] * mean_dn);
          }
        }
      });
}

// Row-wise softmax with max subtraction. `additive_mask` (same size as x) is
// added to the logits first; use -infinity to exclude an entry.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, const std::vector<T>* additive_mask = nullptr) {
  const int rows = x.rows(), cols = x.cols();
  detail::require(additive_mask == nullptr || additive_mask->size() == x.size(),
                  "softmax: mask size mismatch");
  Buffer<T> out(x.size());
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    T peak = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) {
      out[base + c] = x[base + c] + (additive_mask ? (*additive_mask)[base + c] : T(0));
      peak = std::max(peak, out[base + c]);
    }
    T total = 0;
    for (int c = 0; c < cols; ++c) {
      out[base + c] = std::exp(out[base + c] - peak);
      total += out[base + c];
    }
    for (int c = 0; c < cols; ++c) out[base + c] /= total;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, cols](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const std::size_t base = static_cast<std::size_t>(r) * cols;
      T dot = 0;
      for (int c = 0; c < cols; ++c) dot += self.grad[base + c] * self.value[base + c];
      for (int c = 0; c < cols; ++c) g[base + c] += self.value[base + c] * (self.grad[base + c] - dot);
    }
  });
}

enum class Reduction { kSum, kMean };

// Cross-entropy of row-wise softmax(logits) against integer targets.
// Targets equal to `ignore_index` contribute nothing. With kMean the sum is
// divided by the total weight of the counted rows (the row count when no
// class weights are given).
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                        Reduction reduction, int ignore_index = -1,
                        const std::vector<T>& class_weights = {}) {
  const int rows = logits.rows(), cols = logits.cols();
  detail::require(static_cast<int>(targets.size()) == rows,
                  "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                      to_string(logits.shape()) + " logits");
  detail::require(class_weights.empty() || static_cast<int>(class_weights.size()) == cols,
                  "cross_entropy: class weight count");
  Buffer<T> probs(logits.size());
  T loss = 0, denom = 0;
  for (int r = 0; r < rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * cols;
    T peak = -std::numeric_limits<T>::infinity();
    for (int c = 0; c < cols; ++c) peak = std::max(peak, logits[base + c]);
    T total = 0;
    for (int c = 0; c < cols; ++c) total += std::exp(logits[base + c] - peak);
    const T log_total = std::log(total) + peak;
    for (int c = 0; c < cols; ++c) probs[base + c] = std::exp(logits[base + c] - log_total);
    const int t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_index) continue;
    detail::require(t >= 0 && t < cols, "cross_entropy: target " + std::to_string(t) +
                                            " outside [0, " + std::to_string(cols) + ")");
    const T w = class_weights.empty() ? T(1) : class_weights[static_cast<std::size_t>(t)];
    loss += w * (log_total - logits[base + t]);
    denom += w;
  }
  const T norm = reduction == Reduction::kMean ? (denom > 0 ? T(1) / denom : T(0)) : T(1);
  return make_result<T>({1}, {loss * norm}, {logits},
                        [rows, cols, norm, ignore_index, targets, class_weights,
                         probs = std::move(probs)](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          const T up = self.grad[0] * norm;
                          for (int r = 0; r < rows; ++r) {
                            const int t = targets[static_cast<std::size_t>(r)];
                            if (t == ignore_index) continue;
                            const T w = class_weights.empty()
                                            ? T(1)
                                            : class_weights[static_cast<std::size_t>(t)];
                            const std::size_t base = static_cast<std::size_t>(r) * cols;
                            for (int c = 0; c < cols; ++c)
                              g[base + c] += up * w * (probs[base + c] - (c == t ? T(1) : T(0)));
                          }
                        });
}

// Cosine similarity between matching rows of a and b, as an [S, 1] column.
// Rows where either vector is all zero get similarity 0.
template <class T>
Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                  "cosine_rows: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const int rows = a.rows(), cols = a.cols();
  Buffer<T> out(static_cast<std::size_t>(rows)), na(out.size()), nb(out.size());
  for (int r = 0; r < rows; ++r) {
    const auto ra = a.matrix().row(r);
    const auto rb = b.matrix().row(r);
    na[r] = ra.norm();
    nb[r] = rb.norm();
    out[r] = (na[r] > 0 && nb[r] > 0) ? ra.dot(rb) / (na[r] * nb[r]) : T(0);
  }
  return make_result<T>({rows, 1}, std::move(out), {a, b},
                        [rows, cols, na = std::move(na), nb = std::move(nb)](Node<T>& self) {
                          Node<T>* pa = self.parents[0].get();
                          Node<T>* pb = self.parents[1].get();
                          for (int r = 0; r < rows; ++r) {
                            if (!(na[r] > 0 && nb[r] > 0)) continue;
                            const T cosv = self.value[r];
                            const T g = self.grad[r];
                            const std::size_t base = static_cast<std::size_t>(r) * cols;
                            // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                            if (pa->requires_grad) {
                              auto& ga = pa->ensure_grad();
                              for (int c = 0; c < cols; ++c)
                                ga[base + c] += g * (pb->value[base + c] / (na[r] * nb[r]) -
                                                     cosv * pa->value[base + c] / (na[r] * na[r]));
                            }
                            if (pb->requires_grad) {
                              auto& gb = pb->ensure_grad();
                              for (int c = 0; c < cols; ++c)
                                gb[base + c] += g * (pa->value[base + c] / (na[r] * nb[r]) -
                                                     cosv * pb->value[base + c] / (nb[r] * nb[r]));
                            }
                          }
                        });
}

// Gathers table rows: ids -> [L, C].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  const int vocab = table.rows(), width = table.cols();
  Buffer<T> out(ids.size() * static_cast<std::size_t>(width));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::require(ids[i] >= 0 && ids[i] < vocab, "embedding: id " + std::to_string(ids[i]) +
                                                       " outside [0, " + std::to_string(vocab) + ")");
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * width, width,
                out.data() + i * width);
  }
  return make_result<T>({static_cast<int>(ids.size()), width}, std::move(out), {table},
                        [ids, width](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < ids.size(); ++i)
                            for (int c = 0; c < width; ++c)
                              g[static_cast<std::size_t>(ids[i]) * width + c] += self.grad[i * width + c];
                        });
}

// ---------------------------------------------------------------------------
// Convolution
//
// Feature maps are [H, W, C]. Convolution weights are [k, k, C_in, C_out],
// which in memory is exactly the (k*k*C_in) x C_out matrix multiplied against
// the im2col patches. Output size: floor((H + 2p - k) / s) + 1.
//
// Transposed convolution weights are [C_in, k, k, C_out]. It is the adjoint of
// the convolution with the same (k, s, p), so its output size is
// (H - 1) * s - 2p + k; with the (4, 2, 1) setting used by the change head
// this is exactly 2H.

inline int conv_output_size(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

inline int deconv_output_size(int in, int kernel, int stride, int padding) {
  return (in - 1) * stride - 2 * padding + kernel;
}

namespace detail {

struct ConvGeometry {
  int height, width, channels;      // spatial input of the convolution
  int out_height, out_width;        // convolution output grid
  int kernel, stride, padding;
  int patch() const { return kernel * kernel * channels; }
};

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* cols) {
  const int patch = g.patch();
  for (int oy = 0; oy < g.out_height; ++oy)
    for (int ox = 0; ox < g.out_width; ++ox) {
      T* row = cols + (static_cast<std::size_t>(oy) * g.out_width + ox) * patch;
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride - g.padding + ky;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride - g.padding + kx;
          T* dst = row + (ky * g.kernel + kx) * g.channels;
          if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) {
            std::fill_n(dst, g.channels, T(0));
          } else {
            std::copy_n(image + (static_cast<std::size_t>(iy) * g.width + ix) * g.channels, g.channels,
                        dst);
          }
        }
      }
    }
}

// Adjoint of im2col: scatter-adds patch rows back onto the image.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* image) {
  const int patch = g.patch();
  for (int oy = 0; oy < g.out_height; ++oy)
    for (int ox = 0; ox < g.out_width; ++ox) {
      const T* row = cols + (static_cast<std::size_t>(oy) * g.out_width + ox) * patch;
      for (int ky = 0; ky < g.kernel; ++ky) {
        const int iy = oy * g.stride - g.padding + ky;
        if (iy < 0 || iy >= g.height) continue;
        for (int kx = 0; kx < g.kernel; ++kx) {
          const int ix = ox * g.stride - g.padding + kx;
          if (ix < 0 || ix >= g.width) continue;
          const T* src = row + (ky * g.kernel + kx) * g.channels;
          T* dst = image + (static_cast<std::size_t>(iy) * g.width + ix) * g.channels;
          for (int c = 0; c < g.channels; ++c) dst[c] += src[c];
        }
      }
    }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  detail::require(x.shape().size() == 3, "conv2d: input must be [H, W, C], got " + to_string(x.shape()));
  detail::require(weight.shape().size() == 4 && weight.dim(0) == weight.dim(1),
                  "conv2d: weight must be [k, k, C_in, C_out], got " + to_string(weight.shape()));
  detail::require(weight.dim(2) == x.dim(2), "conv2d: input " + to_string(x.shape()) +
                                                 " does not match weight " + to_string(weight.shape()));
  detail::require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
  const int k = weight.dim(0), cout = weight.dim(3);
  detail::require(static_cast<int>(bias.size()) == cout,
                  "conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2),
                         conv_output_size(x.dim(0), k, stride, padding),
                         conv_output_size(x.dim(1), k, stride, padding), k, stride, padding};
  detail::require(g.out_height > 0 && g.out_width > 0, "conv2d: empty output for input " + to_string(x.shape()));
  const int positions = g.out_height * g.out_width, patch = g.patch();

  Buffer<T> cols(static_cast<std::size_t>(positions) * patch);
  detail::im2col(x.values().data(), g, cols.data());
  Buffer<T> out(static_cast<std::size_t>(positions) * cout);
  MatMap<T> y(out.data(), positions, cout);
  y.noalias() = ConstMatMap<T>(cols.data(), positions, patch) * ConstMatMap<T>(weight.values().data(), patch, cout);
  y.rowwise() += ConstMatMap<T>(bias.values().data(), 1, cout).row(0);

  return make_result<T>({g.out_height, g.out_width, cout}, std::move(out), {x, weight, bias},
                        [g, positions, patch, cout, cols = std::move(cols)](Node<T>& self) {
                          Node<T>* px = self.parents[0].get();
                          Node<T>* pw = self.parents[1].get();
                          Node<T>* pb = self.parents[2].get();
                          ConstMatMap<T> dy(self.grad.data(), positions, cout);
                          if (pw->requires_grad)
                            detail::grad_matrix(pw, patch, cout).noalias() +=
                                ConstMatMap<T>(cols.data(), positions, patch).transpose() * dy;
                          if (pb->requires_grad)
                            detail::grad_matrix(pb, 1, cout) += dy.colwise().sum();
                          if (px->requires_grad) {
                            Buffer<T> dcols(static_cast<std::size_t>(positions) * patch);
                            MatMap<T>(dcols.data(), positions, patch).noalias() =
                                dy * ConstMatMap<T>(pw->value.data(), patch, cout).transpose();
                            detail::col2im(dcols.data(), g, px->ensure_grad().data());
                          }
                        });
}

template <class T>
Tensor<T> deconv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                   int padding) {
  detail::require(x.shape().size() == 3, "deconv2d: input must be [H, W, C], got " + to_string(x.shape()));
  detail::require(weight.shape().size() == 4 && weight.dim(1) == weight.dim(2),
                  "deconv2d: weight must be [C_in, k, k, C_out], got " + to_string(weight.shape()));
  detail::require(weight.dim(0) == x.dim(2), "deconv2d: input " + to_string(x.shape()) +
                                                 " does not match weight " + to_string(weight.shape()));
  detail::require(stride >= 1 && padding >= 0, "deconv2d: stride must be >= 1 and padding >= 0");
  const int cin = x.dim(2), k = weight.dim(1), cout = weight.dim(3);
  detail::require(static_cast<int>(bias.size()) == cout,
                  "deconv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  const int oh = deconv_output_size(x.dim(0), k, stride, padding);
  const int ow = deconv_output_size(x.dim(1), k, stride, padding);
  detail::require(oh > 0 && ow > 0, "deconv2d: empty output for input " + to_string(x.shape()));
  // The conv whose adjoint this is maps [oh, ow, cout] onto the input grid.
  detail::ConvGeometry g{oh, ow, cout, x.dim(0), x.dim(1), k, stride, padding};
  const int positions = x.dim(0) * x.dim(1), patch = g.patch();

  Buffer<T> cols(static_cast<std::size_t>(positions) * patch);
  MatMap<T>(cols.data(), positions, patch).noalias() =
      x.matrix() * ConstMatMap<T>(weight.values().data(), cin, patch);
  Buffer<T> out(static_cast<std::size_t>(oh) * ow * cout, T(0));
  detail::col2im(cols.data(), g, out.data());
  MatMap<T>(out.data(), oh * ow, cout).rowwise() += ConstMatMap<T>(bias.values().data(), 1, cout).row(0);

  return make_result<T>({oh, ow, cout}, std::move(out), {x, weight, bias},
                        [g, positions, patch, cin, cout, oh, ow](Node<T>& self) {
                          Node<T>* px = self.parents[0].get();
                          Node<T>* pw = self.parents[1].get();
                          Node<T>* pb = self.parents[2].get();
                          if (pb->requires_grad)
                            detail::grad_matrix(pb, 1, cout) +=
                                ConstMatMap<T>(self.grad.data(), oh * ow, cout).colwise().sum();
                          Buffer<T> dcols(static_cast<std::size_t>(positions) * patch);
                          detail::im2col(self.grad.data(), g, dcols.data());
                          ConstMatMap<T> dc(dcols.data(), positions, patch);
                          if (pw->requires_grad)
                            detail::grad_matrix(pw, cin, patch).noalias() +=
                                ConstMatMap<T>(px->value.data(), positions, cin).transpose() * dc;
                          if (px->requires_grad)
                            detail::grad_matrix(px, positions, cin).noalias() +=
                                dc * ConstMatMap<T>(pw->value.data(), cin, patch).transpose();
                        });
}

}  // namespace pix4cap::nn
