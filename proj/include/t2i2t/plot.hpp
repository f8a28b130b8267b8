#pragma once

// Minimal raster plotting for loss curves: one panel per series, titled with
// a 3x5 bitmap font. Output is an RgbImage for write_png.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "t2i2t/color_lexicon.hpp"
#include "t2i2t/image_io.hpp"

namespace t2i2t {

namespace detail {

// Rows top to bottom, 3 bits each (MSB = left column).
inline std::array<std::uint8_t, 5> glyph(char ch) {
  switch (std::toupper(static_cast<unsigned char>(ch))) {
    case '0': return {7, 5, 5, 5, 7};
    case '1': return {2, 6, 2, 2, 7};
    case '2': return {7, 1, 7, 4, 7};
    case '3': return {7, 1, 7, 1, 7};
    case '4': return {5, 5, 7, 1, 1};
    case '5': return {7, 4, 7, 1, 7};
    case '6': return {7, 4, 7, 5, 7};
    case '7': return {7, 1, 1, 1, 1};
    case '8': return {7, 5, 7, 5, 7};
    case '9': return {7, 5, 7, 1, 7};
    case 'A': return {2, 5, 7, 5, 5};
    case 'B': return {6, 5, 6, 5, 6};
    case 'C': return {3, 4, 4, 4, 3};
    case 'D': return {6, 5, 5, 5, 6};
    case 'E': return {7, 4, 6, 4, 7};
    case 'F': return {7, 4, 6, 4, 4};
    case 'G': return {3, 4, 5, 5, 3};
    case 'H': return {5, 5, 7, 5, 5};
    case 'I': return {7, 2, 2, 2, 7};
    case 'J': return {1, 1, 1, 5, 2};
    case 'K': return {5, 5, 6, 5, 5};
    case 'L': return {4, 4, 4, 4, 7};
    case 'M': return {5, 7, 7, 5, 5};
    case 'N': return {6, 5, 5, 5, 5};
    case 'O': return {2, 5, 5, 5, 2};
    case 'P': return {6, 5, 6, 4, 4};
    case 'Q': return {2, 5, 5, 6, 3};
    case 'R': return {6, 5, 6, 5, 5};
    case 'S': return {3, 4, 2, 1, 6};
    case 'T': return {7, 2, 2, 2, 2};
    case 'U': return {5, 5, 5, 5, 7};
    case 'V': return {5, 5, 5, 5, 2};
    case 'W': return {5, 5, 7, 7, 5};
    case 'X': return {5, 5, 2, 5, 5};
    case 'Y': return {5, 5, 2, 2, 2};
    case 'Z': return {7, 1, 2, 4, 7};
    case '.': return {0, 0, 0, 0, 2};
    case '-': return {0, 0, 7, 0, 0};
    case '_': return {0, 0, 0, 0, 7};
    case ':': return {0, 2, 0, 2, 0};
    case '=': return {0, 7, 0, 7, 0};
    case '+': return {0, 2, 7, 2, 0};
    case '/': return {1, 1, 2, 4, 4};
    default: return {0, 0, 0, 0, 0};
  }
}

inline void put_pixel(RgbImage& img, long x, long y, Rgb c) {
  if (x < 0 || y < 0 || std::size_t(x) >= img.width || std::size_t(y) >= img.height) return;
  std::copy(c.begin(), c.end(), img.at(std::size_t(x), std::size_t(y)));
}

inline void draw_line(RgbImage& img, long x0, long y0, long x1, long y1, Rgb c) {
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  for (;;) {
    put_pixel(img, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
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

}  // namespace detail

inline void draw_text(RgbImage& img, long x, long y, const std::string& text, Rgb color, long scale = 2) {
  for (char ch : text) {
    const auto g = detail::glyph(ch);
    for (long r = 0; r < 5; ++r)
      for (long col = 0; col < 3; ++col)
        if (g[std::size_t(r)] & (4 >> col))
          for (long a = 0; a < scale; ++a)
            for (long b = 0; b < scale; ++b) detail::put_pixel(img, x + col * scale + b, y + r * scale + a, color);
    x += 4 * scale;
  }
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Series {
  std::string name;
  std::vector<double> values;  // NaN entries are gaps
};

// Grid of panels, `cols` per row, each panel auto-scaled to its own range.
inline RgbImage plot_panels(const std::vector<Series>& series, const std::string& title, std::size_t cols = 3) {
  const long pw = 260, ph = 150, margin = 10, top = title.empty() ? 0 : 26;
  cols = std::max<std::size_t>(1, std::min(cols, std::max<std::size_t>(1, series.size())));
  const std::size_t rows = (series.size() + cols - 1) / cols;
  RgbImage img(std::size_t(long(cols) * pw), std::size_t(long(std::max<std::size_t>(rows, 1)) * ph + top));
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t(255));
  const Rgb ink{20, 20, 20}, axis{160, 160, 160}, line{31, 119, 180};
  if (!title.empty()) draw_text(img, margin, 6, title, ink, 2);

  for (std::size_t i = 0; i < series.size(); ++i) {
    const long ox = long(i % cols) * pw, oy = top + long(i / cols) * ph;
    const auto& s = series[i];
    double lo = INFINITY, hi = -INFINITY;
    for (double v : s.values)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    draw_text(img, ox + margin, oy + 4, s.name, ink, 2);
    const long x0 = ox + margin, x1 = ox + pw - margin, y0 = oy + 20, y1 = oy + ph - 18;
    detail::draw_line(img, x0, y1, x1, y1, axis);
    detail::draw_line(img, x0, y0, x0, y1, axis);
    if (!(lo <= hi)) continue;
    draw_text(img, x0 + 2, y1 + 4, format_number(lo) + " / " + format_number(hi), axis, 1);
    const double span = hi > lo ? hi - lo : 1.0;
    const std::size_t n = s.values.size();
    long px = -1, py = -1;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = s.values[k];
      if (!std::isfinite(v)) {
        px = -1;
        continue;
      }
      const long x = n > 1 ? x0 + long(double(x1 - x0) * double(k) / double(n - 1)) : (x0 + x1) / 2;
      const long y = y1 - long(double(y1 - y0) * (v - lo) / span);
      if (px >= 0) detail::draw_line(img, px, py, x, y, line);
      detail::put_pixel(img, x, y, line);
      px = x;
      py = y;
    }
  }
  return img;
}

}  // namespace t2i2t
