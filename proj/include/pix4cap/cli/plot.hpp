#pragma once

// Minimal line-chart rasterizer for training curves: axes, min/max labels and
// one polyline, drawn with a built-in 5x7 bitmap font into an RGB PNG.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "pix4cap/core/errors.hpp"
#include "pix4cap/data/image.hpp"

namespace pix4cap::cli {

namespace plot_detail {

using Glyph = std::array<std::uint8_t, 7>;  // rows top to bottom, 5 low bits each

inline const Glyph& glyph(char c) {
  static const Glyph blank{};
  static const std::pair<char, Glyph> table[] = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
      {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
      {'*', {0x00, 0x04, 0x15, 0x0E, 0x15, 0x04, 0x00}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
  };
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& [ch, g] : table)
    if (ch == u) return g;
  return blank;
}

struct Canvas {
  int width, height;
  std::vector<std::uint8_t> rgb;

  Canvas(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 255) {}

  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
  }

  // Bresenham.
  void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) return;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  // Text at scale 2: each glyph cell is 12 px wide, 14 px tall.
  void text(int x, int y, const std::string& s, std::array<std::uint8_t, 3> c) {
    for (char ch : s) {
      const auto& g = glyph(ch);
      for (int r = 0; r < 7; ++r)
        for (int col = 0; col < 5; ++col)
          if (g[r] >> (4 - col) & 1)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) set(x + 2 * col + dx, y + 2 * r + dy, c);
      x += 12;
    }
  }
};

inline constexpr int kGlyphWidth = 12;

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), std::abs(v) >= 1e4 || (v != 0 && std::abs(v) < 1e-3) ? "%.3e" : "%.4g", v);
  return buf;
}

}  // namespace plot_detail

// Renders y over x (epochs) as a PNG. Needs at least one point.
inline void render_curve(const std::string& path, const std::string& title, const std::vector<double>& x,
                         const std::vector<double>& y) {
  using namespace plot_detail;
  if (x.empty() || x.size() != y.size()) throw DataError("curve '" + title + "' has no points");
  constexpr int kWidth = 640, kHeight = 400, kLeft = 110, kRight = 20, kTop = 40, kBottom = 50;
  Canvas canvas(kWidth, kHeight);
  const std::array<std::uint8_t, 3> ink{0, 0, 0}, grid{210, 210, 210}, curve{200, 40, 40};

  auto [ymin_it, ymax_it] = std::minmax_element(y.begin(), y.end());
  double y0 = *ymin_it, y1 = *ymax_it;
  if (y1 - y0 < 1e-12) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  double x0 = x.front(), x1 = x.back();
  if (x1 - x0 < 1e-12) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  const int pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  const auto px = [&](double v) { return kLeft + static_cast<int>(std::lround((v - x0) / (x1 - x0) * pw)); };
  const auto py = [&](double v) { return kTop + ph - static_cast<int>(std::lround((v - y0) / (y1 - y0) * ph)); };

  for (int k = 1; k < 4; ++k) canvas.line(kLeft, kTop + k * ph / 4, kLeft + pw, kTop + k * ph / 4, grid);
  canvas.line(kLeft, kTop, kLeft, kTop + ph, ink);
  canvas.line(kLeft, kTop + ph, kLeft + pw, kTop + ph, ink);

  canvas.text((kWidth - kGlyphWidth * static_cast<int>(title.size())) / 2, 10, title, ink);
  const auto hi = format_value(y1), lo = format_value(y0);
  canvas.text(kLeft - 8 - kGlyphWidth * static_cast<int>(hi.size()), kTop - 7, hi, ink);
  canvas.text(kLeft - 8 - kGlyphWidth * static_cast<int>(lo.size()), kTop + ph - 7, lo, ink);
  const auto first = format_value(x.front()), last = format_value(x.back());
  canvas.text(kLeft, kTop + ph + 10, first, ink);
  canvas.text(kLeft + pw - kGlyphWidth * static_cast<int>(last.size()), kTop + ph + 10, last, ink);
  canvas.text(kLeft + pw / 2 - 2 * kGlyphWidth, kTop + ph + 28, "EPOCH", ink);

  for (std::size_t i = 0; i < x.size(); ++i) {
    const int cx = px(x[i]), cy = py(y[i]);
    if (i > 0) canvas.line(px(x[i - 1]), py(y[i - 1]), cx, cy, curve);
    for (int d = -2; d <= 2; ++d) {
      canvas.set(cx + d, cy, curve);
      canvas.set(cx, cy + d, curve);
    }
  }
  data::detail::write_png(path, kWidth, kHeight, PNG_FORMAT_RGB, canvas.rgb.data());
}

}  // namespace pix4cap::cli
