#pragma once

#include "dynavox/core.hpp"

namespace dynavox {

// Planar-free interleaved image; channels vary fastest. Values are real so
// the same container holds RGB in [0,1], flow fields, disparities and masks.
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<Real> data;

  Image() = default;
  Image(int w, int h, int c, Real fill = 0)
      : width(w), height(h), channels(c),
        data(static_cast<size_t>(w) * h * c, fill) {}

  Real& at(int x, int y, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  Real at(int x, int y, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  int64_t pixel_count() const { return static_cast<int64_t>(width) * height; }

  bool same_size(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }

  // Bilinear sample with border clamp.
  Real bilinear(Real x, Real y, int c = 0) const {
    const Real cx = std::clamp(x, Real(0), Real(width - 1));
    const Real cy = std::clamp(y, Real(0), Real(height - 1));
    const int x0 = std::clamp(static_cast<int>(std::floor(cx)), 0, width - 2);
    const int y0 = std::clamp(static_cast<int>(std::floor(cy)), 0, height - 2);
    const Real fx = cx - x0, fy = cy - y0;
    return (1 - fx) * ((1 - fy) * at(x0, y0, c) + fy * at(x0, y0 + 1, c)) +
           fx * ((1 - fy) * at(x0 + 1, y0, c) + fy * at(x0 + 1, y0 + 1, c));
  }
};

// Binary-mask helpers (nonzero = set).
inline Image dilate(const Image& mask, int radius) {
  DVX_CHECK(mask.channels == 1 && radius >= 0);
  if (radius == 0) return mask;
  Image out(mask.width, mask.height, 1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      Real v = 0;
      for (int dy = -radius; dy <= radius && v == 0; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (mask.in_bounds(nx, ny) && mask.at(nx, ny) != 0) {
            v = 1;
            break;
          }
        }
      out.at(x, y) = v;
    }
  return out;
}

inline Real mask_iou(const Image& a, const Image& b) {
  DVX_CHECK(a.width == b.width && a.height == b.height);
  int64_t inter = 0, uni = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      const bool pa = a.at(x, y) != 0, pb = b.at(x, y) != 0;
      inter += (pa && pb) ? 1 : 0;
      uni += (pa || pb) ? 1 : 0;
    }
  return uni == 0 ? 1.0 : static_cast<Real>(inter) / static_cast<Real>(uni);
}

}  // namespace dynavox
