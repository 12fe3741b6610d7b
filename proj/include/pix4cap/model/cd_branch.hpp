#pragma once

// Auxiliary change-detection branch.
//
//   fuse:  X_f^i = block([X_t1^i, X_t2^i, X_t2^i - X_t1^i])    per level
//   head:  d = X_f^4; for i = 3..1: d = block([up(d), X_f^i])
//          then two x2 upsamples to full resolution and a 1x1 classifier

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "pix4cap/data/image.hpp"
#include "pix4cap/model/backbone.hpp"

namespace pix4cap::model {

template <class T>
struct FusedPyramid {
  std::array<Tensor<T>, kLevels> levels;  // same shapes as the input pyramid
};

// Intermediates of one fusion call, for inspection.
template <class T>
struct FuseTrace {
  Tensor<T> difference;  // x_t2 - x_t1
  Tensor<T> stacked;     // [x_t1, x_t2, difference] along channels
};

// Core of the fusion step with a pluggable channel reducer, so the wiring can
// be checked with hand-set weights.
template <class T>
Tensor<T> bitemporal_fuse(const Tensor<T>& x_t1, const Tensor<T>& x_t2,
                          const std::function<Tensor<T>(const Tensor<T>&)>& reduce,
                          FuseTrace<T>* trace = nullptr) {
  if (x_t1.shape() != x_t2.shape() || x_t1.shape().size() != 3)
    throw ShapeError("fusion inputs must share an [h, w, c] shape, got " + nn::to_string(x_t1.shape()) +
                     " and " + nn::to_string(x_t2.shape()));
  auto difference = nn::sub(x_t2, x_t1);
  auto stacked = nn::concat_channels<T>({x_t1, x_t2, difference});
  if (trace) *trace = {difference, stacked};
  return reduce(stacked);
}

template <class T>
class ChangeDetectionBranch {
 public:
  ChangeDetectionBranch(nn::ParameterStore<T>& store, const std::array<int, kLevels>& widths, int num_classes)
      : widths_(widths), num_classes_(num_classes) {
    if (num_classes < 2) throw UsageError("change detection needs at least 2 classes");
    for (int i = 0; i < kLevels; ++i) {
      fuse_[i] = nn::ConvBlock<T>(store, "cd.btf" + std::to_string(i + 1), 3 * widths[i], widths[i]);
    }
    for (int i = kLevels - 2; i >= 0; --i) {
      const std::string name = "cd.head.level" + std::to_string(i + 1);
      up_[i] = nn::Upsample2x<T>(store, name + ".up", widths[i + 1], widths[i]);
      up_norm_[i] = nn::LayerNorm<T>(store, name + ".up_norm", widths[i]);
      merge_[i] = nn::ConvBlock<T>(store, name + ".merge", 2 * widths[i], widths[i]);
    }
    for (int j = 0; j < 2; ++j) {
      const std::string name = "cd.head.final" + std::to_string(j + 1);
      final_up_[j] = nn::Upsample2x<T>(store, name + ".up", widths[0], widths[0]);
      final_norm_[j] = nn::LayerNorm<T>(store, name + ".norm", widths[0]);
    }
    classifier_ = nn::Conv2d<T>(store, "cd.head.classifier", widths[0], num_classes, 1, 1, 0);
  }

  Tensor<T> fuse_level(int level, const Tensor<T>& x_t1, const Tensor<T>& x_t2, FuseTrace<T>* trace = nullptr) const {
    if (level < 0 || level >= kLevels) throw ShapeError("fusion level out of range");
    if (x_t1.shape().size() != 3 || x_t1.dim(2) != widths_[level])
      throw ShapeError("level " + std::to_string(level + 1) + " expects width " + std::to_string(widths_[level]) +
                       ", got " + nn::to_string(x_t1.shape()));
    const auto& block = fuse_[level];
    return bitemporal_fuse<T>(x_t1, x_t2, [&](const Tensor<T>& x) { return block(x); }, trace);
  }

  FusedPyramid<T> fuse(const FeaturePyramid<T>& pre, const FeaturePyramid<T>& post) const {
    FusedPyramid<T> out;
    for (int i = 0; i < kLevels; ++i) out.levels[i] = fuse_level(i, pre.levels[i], post.levels[i]);
    return out;
  }

  // Logits [H, W, C] at input resolution (4x the level-1 grid).
  Tensor<T> decode(const FusedPyramid<T>& fused) const {
    for (int i = 0; i < kLevels; ++i) {
      const auto& x = fused.levels[i];
      const bool ok = x.defined() && x.shape().size() == 3 && x.dim(2) == widths_[i] &&
                      (i == 0 || (x.dim(0) * 2 == fused.levels[i - 1].dim(0) &&
                                  x.dim(1) * 2 == fused.levels[i - 1].dim(1)));
      if (!ok)
        throw ShapeError("fused level " + std::to_string(i + 1) + " has shape " +
                         (x.defined() ? nn::to_string(x.shape()) : std::string("<none>")) +
                         ", inconsistent with widths or the level above");
    }
    auto d = fused.levels[kLevels - 1];
    for (int i = kLevels - 2; i >= 0; --i) {
      auto up = nn::relu(up_norm_[i](up_[i](d)));
      d = merge_[i](nn::concat_channels<T>({up, fused.levels[i]}));
    }
    for (int j = 0; j < 2; ++j) d = nn::relu(final_norm_[j](final_up_[j](d)));
    return classifier_(d);
  }

  int num_classes() const { return num_classes_; }

 private:
  std::array<int, kLevels> widths_;
  int num_classes_;
  std::array<nn::ConvBlock<T>, kLevels> fuse_;
  std::array<nn::Upsample2x<T>, kLevels - 1> up_;
  std::array<nn::LayerNorm<T>, kLevels - 1> up_norm_;
  std::array<nn::ConvBlock<T>, kLevels - 1> merge_;
  std::array<nn::Upsample2x<T>, 2> final_up_;
  std::array<nn::LayerNorm<T>, 2> final_norm_;
  nn::Conv2d<T> classifier_;
};

// Mean per-pixel cross-entropy against a label mask. Optional class weights
// turn it into the weighted mean; empty means plain cross-entropy.
template <class T>
Tensor<T> detection_loss(const Tensor<T>& logits, const data::Mask& mask, const std::vector<T>& class_weights = {}) {
  if (logits.shape().size() != 3 || logits.dim(0) != mask.height || logits.dim(1) != mask.width)
    throw ShapeError("logits " + nn::to_string(logits.shape()) + " do not match a " + std::to_string(mask.height) +
                     "x" + std::to_string(mask.width) + " mask");
  const int classes = logits.dim(2);
  std::vector<int> targets(mask.values.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    targets[i] = mask.values[i];
    if (targets[i] >= classes)
      throw DataError("mask value " + std::to_string(targets[i]) + " is not below the class count " +
                      std::to_string(classes));
  }
  auto flat = nn::reshape(logits, {logits.dim(0) * logits.dim(1), classes});
  return nn::cross_entropy(flat, targets, nn::Reduction::kMean, -1, class_weights);
}

// Argmax over classes; class 0 is "no change".
template <class T>
data::Mask predict_mask(const Tensor<T>& logits) {
  data::Mask mask(logits.dim(0), logits.dim(1));
  const int classes = logits.dim(2);
  const auto& v = logits.values();
  for (std::size_t p = 0; p < mask.values.size(); ++p) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (v[p * classes + c] > v[p * classes + best]) best = c;
    mask.values[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

}  // namespace pix4cap::model
