#pragma once

// Shared-weight four-scale encoder.
//
//   stem:    3x3 stride-2 conv block            -> H/2
//   stage i: 3x3 stride-2 conv block (w_i), then one residual block
//            -> level i at stride 4, 8, 16, 32
//
// A conv block is conv -> channel layer norm -> ReLU. The residual block is
// relu(x + norm(conv(block(x)))); without the skip, channel layer norm lets
// early training flatten the deepest level to one image-independent map and
// the captioner loses its input. Both temporal images
// go through the very same Backbone instance, so the weights are shared by
// construction.

#include <array>
#include <string>
#include <vector>

#include "pix4cap/nn/layers.hpp"

namespace pix4cap::model {

using nn::Tensor;

inline constexpr int kLevels = 4;
inline constexpr std::array<int, kLevels> kLevelStrides{4, 8, 16, 32};

template <class T>
struct FeaturePyramid {
  std::array<Tensor<T>, kLevels> levels;  // [H/s_i, W/s_i, w_i]
};

inline void check_image_size(int height, int width) {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw ShapeError("image is " + std::to_string(height) + "x" + std::to_string(width) +
                     "; height and width must be positive multiples of 32");
  }
}

template <class T>
class Backbone {
 public:
  Backbone(nn::ParameterStore<T>& store, const std::array<int, kLevels>& widths) : widths_(widths) {
    for (int i = 1; i < kLevels; ++i)
      if (widths[i] < widths[i - 1]) throw UsageError("backbone widths must be non-decreasing");
    stem_ = nn::ConvBlock<T>(store, "backbone.stem", 3, widths[0], 3, 2);
    int in = widths[0];
    for (int i = 0; i < kLevels; ++i) {
      const std::string name = "backbone.stage" + std::to_string(i + 1);
      Stage stage;
      stage.down = nn::ConvBlock<T>(store, name + ".down", in, widths[i], 3, 2);
      stage.block1 = nn::ConvBlock<T>(store, name + ".block1", widths[i], widths[i]);
      stage.block2 = nn::ConvBlock<T>(store, name + ".block2", widths[i], widths[i]);
      stages_[i] = stage;
      in = widths[i];
    }
  }

  // image: [H, W, 3]
  FeaturePyramid<T> extract_features(const Tensor<T>& image) const {
    if (image.shape().size() != 3 || image.dim(2) != 3)
      throw ShapeError("backbone expects an [H, W, 3] image, got " + nn::to_string(image.shape()));
    check_image_size(image.dim(0), image.dim(1));
    FeaturePyramid<T> out;
    auto x = stem_(image);
    for (int i = 0; i < kLevels; ++i) {
      x = stages_[i].down(x);
      const auto& s = stages_[i];
      x = nn::relu(nn::add(x, s.block2.norm(s.block2.conv(s.block1(x)))));
      out.levels[i] = x;
    }
    return out;
  }

  const std::array<int, kLevels>& widths() const { return widths_; }

  // Identity of every weight tensor, in a fixed order.
  std::vector<const nn::Node<T>*> parameter_nodes() const {
    std::vector<const nn::Node<T>*> nodes;
    const auto add = [&](const nn::ConvBlock<T>& b) {
      for (const auto* t : {&b.conv.weight, &b.conv.bias, &b.norm.gamma, &b.norm.beta}) nodes.push_back(t->node());
    };
    add(stem_);
    for (const auto& s : stages_) {
      add(s.down);
      add(s.block1);
      add(s.block2);
    }
    return nodes;
  }

 private:
  struct Stage {
    nn::ConvBlock<T> down, block1;
    nn::ConvBlock<T> block2;  // its ReLU runs after the skip addition
  };
  std::array<int, kLevels> widths_;
  nn::ConvBlock<T> stem_;
  std::array<Stage, kLevels> stages_;
};

}  // namespace pix4cap::model
