#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "tpa/errors.hpp"

namespace tpa {

/// Planar (channel-major) image with real-valued pixels, nominally in [0,1].
/// Element (c, y, x) lives at index (c * height + y) * width + x.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }
  double& at(int c, int y, int x) { return data[index(c, y, x)]; }
  double at(int c, int y, int x) const { return data[index(c, y, x)]; }

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ContractError(std::string(what) + ": shape mismatch (" + std::to_string(a.channels) + "x" +
                        std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                        std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + ")");
  }
}

/// Single-channel binary map; broadcast across image channels.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> data;

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}

  unsigned char at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  unsigned char& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }

  long count() const {
    long n = 0;
    for (auto v : data) n += v;
    return n;
  }
  double fraction() const {
    return data.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(data.size());
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

inline double quantize_u8(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

}  // namespace tpa
