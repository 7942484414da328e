#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pixsplat/errors.h"

namespace pixsplat {

// Interleaved row-major image of doubles (y, x, channel).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

  std::size_t pixel_count() const { return std::size_t(width) * height; }
  std::size_t index(int x, int y) const { return std::size_t(y) * width + x; }

  double& at(int x, int y, int c) { return data[index(x, y) * channels + c]; }
  double at(int x, int y, int c) const { return data[index(x, y) * channels + c]; }

  std::span<double> pixel(std::size_t i) { return {data.data() + i * channels, std::size_t(channels)}; }
  std::span<const double> pixel(std::size_t i) const {
    return {data.data() + i * channels, std::size_t(channels)};
  }
  std::span<double> pixel(int x, int y) { return pixel(index(x, y)); }
  std::span<const double> pixel(int x, int y) const { return pixel(index(x, y)); }

  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeMismatch(std::string(what) + ": image shape mismatch");
}

}  // namespace pixsplat
