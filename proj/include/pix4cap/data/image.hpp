#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <png.h>

#include "pix4cap/core/errors.hpp"

namespace pix4cap::data {

// H x W x 3, row-major, channel-last, values in [0, 1].
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  RgbImage() = default;
  RgbImage(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const RgbImage&) const = default;
};

// H x W labels; change masks use 0 = unchanged, 1 = changed.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count(std::uint8_t label = 1) const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), label));
  }
  bool operator==(const Mask&) const = default;
};

inline std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace detail {

inline void write_png(const std::string& path, int width, int height, std::uint32_t format,
                      const std::uint8_t* bytes) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = format;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes, 0, nullptr)) {
    throw DataError("cannot write image " + path + ": " + image.message);
  }
}

inline std::vector<std::uint8_t> read_png(const std::string& path, std::uint32_t format, int& width,
                                          int& height) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot read image " + path + ": " + image.message);
  }
  image.format = format;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError("cannot decode image " + path + ": " + image.message);
  }
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  return bytes;
}

}  // namespace detail

inline void write_rgb_png(const std::string& path, const RgbImage& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), bytes.begin(), quantize);
  detail::write_png(path, img.width, img.height, PNG_FORMAT_RGB, bytes.data());
}

inline RgbImage read_rgb_png(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = detail::read_png(path, PNG_FORMAT_RGB, w, h);
  RgbImage img(h, w);
  std::transform(bytes.begin(), bytes.end(), img.pixels.begin(),
                 [](std::uint8_t b) { return static_cast<float>(b) / 255.0f; });
  return img;
}

// Stored as 0 / 255 single-channel PNG.
inline void write_mask_png(const std::string& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.values.size());
  std::transform(mask.values.begin(), mask.values.end(), bytes.begin(),
                 [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
  detail::write_png(path, mask.width, mask.height, PNG_FORMAT_GRAY, bytes.data());
}

// Any nonzero gray level reads as changed, so externally produced masks
// (0/1 or 0/255) load unchanged.
inline Mask read_mask_png(const std::string& path) {
  int w = 0, h = 0;
  const auto bytes = detail::read_png(path, PNG_FORMAT_GRAY, w, h);
  Mask mask(h, w);
  std::transform(bytes.begin(), bytes.end(), mask.values.begin(),
                 [](std::uint8_t b) -> std::uint8_t { return b ? 1 : 0; });
  return mask;
}

}  // namespace pix4cap::data
