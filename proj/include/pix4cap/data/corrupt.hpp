#pragma once

// Simulated pseudo-labels: ground-truth change masks degraded the way an
// imperfect pretrained change detector would degrade them (blobby borders,
// missed thin parts, scattered false alarms).

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>

#include "pix4cap/core/errors.hpp"
#include "pix4cap/core/rng.hpp"
#include "pix4cap/data/image.hpp"

namespace pix4cap::data {

struct CorruptionParams {
  int dilate_px = 0;
  int erode_px = 0;
  double flip_rate = 0.0;

  bool operator==(const CorruptionParams&) const = default;
};

// Named presets accepted by `synth --noise`.
inline CorruptionParams corruption_preset(const std::string& name) {
  if (name == "none") return {};
  if (name == "light") return {1, 0, 0.005};
  if (name == "heavy") return {2, 1, 0.02};
  throw UsageError("unknown noise preset '" + name + "' (expected none, light or heavy)");
}

// Square (Chebyshev) structuring element of the given radius. Pixels outside
// the image count as background for both operations.
inline Mask dilate(const Mask& in, int radius) {
  if (radius <= 0) return in;
  Mask out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      std::uint8_t v = 0;
      for (int dy = -radius; dy <= radius && !v; ++dy)
        for (int dx = -radius; dx <= radius && !v; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < in.height && xx >= 0 && xx < in.width && in.at(yy, xx)) v = 1;
        }
      out.at(y, x) = v;
    }
  return out;
}

inline Mask erode(const Mask& in, int radius) {
  if (radius <= 0) return in;
  Mask out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      std::uint8_t v = in.at(y, x);
      for (int dy = -radius; dy <= radius && v; ++dy)
        for (int dx = -radius; dx <= radius && v; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= in.height || xx < 0 || xx >= in.width || !in.at(yy, xx)) v = 0;
        }
      out.at(y, x) = v;
    }
  return out;
}

// Dilate, then erode, then flip each pixel independently with `flip_rate`.
inline Mask corrupt_mask(const Mask& gt, const CorruptionParams& params, std::uint64_t seed) {
  if (params.dilate_px < 0 || params.erode_px < 0)
    throw UsageError("corrupt_mask: dilate_px and erode_px must be >= 0");
  if (!(params.flip_rate >= 0.0 && params.flip_rate <= 1.0))
    throw UsageError("corrupt_mask: flip_rate must lie in [0, 1]");
  for (auto v : gt.values)
    if (v > 1) throw DataError("corrupt_mask: mask is not binary");

  Mask out = erode(dilate(gt, params.dilate_px), params.erode_px);
  if (params.flip_rate > 0.0) {
    Rng rng(derive_seed(seed, "corrupt_mask"));
    std::bernoulli_distribution flip(params.flip_rate);
    for (auto& v : out.values)
      if (flip(rng)) v ^= 1;
  }
  return out;
}

}  // namespace pix4cap::data
