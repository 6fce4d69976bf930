#pragma once

#include <algorithm>
#include <regex>
#include <string>
#include <vector>

#include "tpa/errors.hpp"
#include "tpa/geometry.hpp"

namespace tpa {

/// How an instance box is split into an n x n grid: one n for every
/// instance (uniform), or n chosen by area bucket (scale-adaptive).
struct GridScheme {
  enum class Kind { uniform, scale_adaptive };

  Kind kind = Kind::scale_adaptive;
  int n1 = 1;
  int n2 = 2;
  int n3 = 3;

  static GridScheme uniform(int n) {
    if (n < 1) throw ConfigError("grid size must be >= 1");
    return {Kind::uniform, n, n, n};
  }
  static GridScheme scale_adaptive(int small, int medium, int large) {
    if (small < 1 || medium < 1 || large < 1) throw ConfigError("grid sizes must be >= 1");
    return {Kind::scale_adaptive, small, medium, large};
  }

  /// Accepts "U(n)" or "SA(n1,n2,n3)"; blanks are allowed only after commas.
  static GridScheme parse(const std::string& text) {
    static const std::regex uni(R"(^U\((\d+)\)$)");
    static const std::regex sa(R"(^SA\((\d+), ?(\d+), ?(\d+)\)$)");
    std::smatch m;
    try {
      if (std::regex_match(text, m, uni)) return uniform(std::stoi(m[1]));
      if (std::regex_match(text, m, sa))
        return scale_adaptive(std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3]));
    } catch (const std::out_of_range&) {
      // falls through to the error below
    }
    throw ConfigError("invalid grid scheme '" + text + "' (expected U(n) or SA(n1,n2,n3))");
  }

  std::string to_string() const {
    if (kind == Kind::uniform) return "U(" + std::to_string(n1) + ")";
    return "SA(" + std::to_string(n1) + "," + std::to_string(n2) + "," + std::to_string(n3) + ")";
  }

  friend bool operator==(const GridScheme&, const GridScheme&) = default;
};

inline constexpr double kSmallArea = 32.0 * 32.0;
inline constexpr double kMediumArea = 64.0 * 64.0;

/// Grid size for an instance; scale-adaptive buckets split at 32^2 and 64^2.
inline int grid_size_for(const Box& box, const GridScheme& scheme) {
  if (scheme.kind == GridScheme::Kind::uniform) return scheme.n1;
  const double area = box.area();
  if (area <= kSmallArea) return scheme.n1;
  if (area <= kMediumArea) return scheme.n2;
  return scheme.n3;
}

struct SubPatch {
  int instance_id = 0;
  int index = 0;  // row-major cell index in [0, n*n)
  PixelRect rect;

  friend bool operator==(const SubPatch&, const SubPatch&) = default;
};

/// Row-major n x n tiling of the box's pixel extent (clipped to the image
/// when its size is given). Grid line j sits at floor(extent * j / n), so
/// leftover pixels go to the later cells.
inline std::vector<SubPatch> segment_instance(const Box& box, int n, int instance_id = 0,
                                              int image_w = 0, int image_h = 0) {
  if (n < 1) throw DegenerateGridError("grid size must be >= 1");
  const PixelRect ext = pixel_extent(box, image_w, image_h);
  if (ext.width < n || ext.height < n) {
    throw DegenerateGridError("instance " + std::to_string(instance_id) + " extent " +
                              std::to_string(ext.width) + "x" + std::to_string(ext.height) +
                              " is too small for a " + std::to_string(n) + "x" +
                              std::to_string(n) + " grid");
  }
  auto line = [n](int extent, int j) { return static_cast<int>(static_cast<long>(extent) * j / n); };
  std::vector<SubPatch> out;
  out.reserve(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r) {
    const int y0 = line(ext.height, r), y1 = line(ext.height, r + 1);
    for (int c = 0; c < n; ++c) {
      const int x0 = line(ext.width, c), x1 = line(ext.width, c + 1);
      out.push_back({instance_id, r * n + c, {ext.left + x0, ext.top + y0, x1 - x0, y1 - y0}});
    }
  }
  return out;
}

/// Number of sub-patches attacked per instance: floor(n^2 / 2), optionally
/// raised to at least one.
inline int budget(int n, bool clamp_min_one = false) {
  if (n < 1) throw ConfigError("grid size must be >= 1");
  const int k = (n * n) / 2;
  return clamp_min_one ? std::max(1, k) : k;
}

}  // namespace tpa
