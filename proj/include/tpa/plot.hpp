#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "tpa/errors.hpp"
#include "tpa/evaluation.hpp"
#include "tpa/image.hpp"
#include "tpa/png_io.hpp"

namespace tpa {

using Color = std::array<std::uint8_t, 3>;

inline constexpr Color kWhite{255, 255, 255};
inline constexpr Color kGray{170, 170, 170};
inline constexpr Color kBlack{0, 0, 0};
inline constexpr Color kGreen{40, 200, 60};
inline constexpr Color kRed{230, 30, 30};
inline constexpr Color kYellow{250, 210, 20};

/// Minimal raster canvas over an interleaved RGB buffer.
class Canvas {
 public:
  Canvas(int width, int height, Color bg = kWhite) : img_(height, width) {
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) set(x, y, bg);
  }

  int width() const { return img_.width; }
  int height() const { return img_.height; }
  const Rgb8& raster() const { return img_; }

  void set(int x, int y, Color c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    auto* p = img_.px(y, x);
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }

  Color get(int x, int y) const {
    const auto* p = img_.px(y, x);
    return {p[0], p[1], p[2]};
  }

  void line(double x0, double y0, double x1, double y1, Color c) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int i = 0; i <= steps; ++i) {
      const double t = static_cast<double>(i) / steps;
      set(static_cast<int>(std::lround(x0 + t * (x1 - x0))),
          static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
  }

  void rect(int x0, int y0, int x1, int y1, Color c, int thickness = 1) {
    for (int k = 0; k < thickness; ++k) {
      line(x0 + k, y0 + k, x1 - k, y0 + k, c);
      line(x0 + k, y1 - k, x1 - k, y1 - k, c);
      line(x0 + k, y0 + k, x0 + k, y1 - k, c);
      line(x1 - k, y0 + k, x1 - k, y1 - k, c);
    }
  }

  void dot(int x, int y, Color c, int r = 1) {
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) set(x + dx, y + dy, c);
  }

  /// Pastes `img` (values in [0,1]) scaled by an integer factor.
  void blit(const Image& img, int left, int top, int scale) {
    const Rgb8 src = to_rgb8(img);
    for (int y = 0; y < src.height * scale; ++y)
      for (int x = 0; x < src.width * scale; ++x) {
        const auto* p = src.px(y / scale, x / scale);
        set(left + x, top + y, {p[0], p[1], p[2]});
      }
  }

 private:
  Rgb8 img_;
};

/// Loss-trace figure: total objective against iteration, one polyline per
/// scene with a marker at every iteration. Scenes without iterations are
/// skipped; an empty plot is still a valid figure.
inline Canvas plot_loss_traces(const std::vector<SceneReport>& scenes, int width = 640,
                               int height = 400) {
  constexpr int kMargin = 40;
  Canvas cv(width, height);
  std::size_t max_t = 1;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : scenes) {
    max_t = std::max(max_t, s.loss_trace.size());
    for (const auto& b : s.loss_trace) {
      lo = std::min(lo, b.total);
      hi = std::max(hi, b.total);
    }
  }
  if (!(hi > lo)) {
    lo = std::isfinite(lo) ? lo - 0.5 : 0.0;
    hi = lo + 1.0;
  }
  const double pw = width - 2 * kMargin, ph = height - 2 * kMargin;
  cv.line(kMargin, height - kMargin, width - kMargin, height - kMargin, kBlack);
  cv.line(kMargin, kMargin, kMargin, height - kMargin, kBlack);
  for (std::size_t t = 0; t < max_t; ++t) {
    const double x = kMargin + pw * (max_t > 1 ? static_cast<double>(t) / (max_t - 1) : 0.5);
    cv.line(x, height - kMargin, x, height - kMargin + 4, kBlack);
  }
  auto px = [&](std::size_t t) {
    return kMargin + pw * (max_t > 1 ? static_cast<double>(t) / (max_t - 1) : 0.5);
  };
  auto py = [&](double v) { return height - kMargin - ph * (v - lo) / (hi - lo); };
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& tr = scenes[i].loss_trace;
    // Cycle through a small hue wheel so neighbouring scenes differ.
    const double h = std::fmod(static_cast<double>(i) * 0.161803, 1.0);
    const Color c{static_cast<std::uint8_t>(120 + 100 * std::cos(6.2832 * h)),
                  static_cast<std::uint8_t>(120 + 100 * std::cos(6.2832 * (h - 0.333))),
                  static_cast<std::uint8_t>(120 + 100 * std::cos(6.2832 * (h - 0.667)))};
    for (std::size_t t = 0; t < tr.size(); ++t) {
      if (t > 0) cv.line(px(t - 1), py(tr[t - 1].total), px(t), py(tr[t].total), c);
      cv.dot(static_cast<int>(std::lround(px(t))), static_cast<int>(std::lround(py(tr[t].total))), c);
    }
  }
  return cv;
}

/// Clean-vs-adversarial overlay in two panels. Left: the clean image with
/// its detections, green when the attack failed on them and thick red when
/// it succeeded. Right: the adversarial image with its detections in yellow.
inline Canvas plot_overlay(const Image& clean, const Image& adv, const SceneReport& report,
                           int scale = 2) {
  require_same_shape(clean, adv, "plot_overlay");
  constexpr int kGapPx = 8;
  const int pw = clean.width * scale, ph = clean.height * scale;
  Canvas cv(2 * pw + kGapPx, ph, kGray);
  cv.blit(clean, 0, 0, scale);
  cv.blit(adv, pw + kGapPx, 0, scale);
  auto draw = [&](const Box& b, int offset, Color c, int thick) {
    cv.rect(offset + static_cast<int>(std::lround(b.x1() * scale)),
            static_cast<int>(std::lround(b.y1() * scale)),
            offset + static_cast<int>(std::lround(b.x2() * scale)) - 1,
            static_cast<int>(std::lround(b.y2() * scale)) - 1, c, thick);
  };
  for (std::size_t i = 0; i < report.clean_detections.size(); ++i) {
    const bool hit = i < report.success.size() && report.success[i];
    draw(report.clean_detections[i].box, 0, hit ? kRed : kGreen, hit ? 3 : 1);
  }
  for (const auto& d : report.adv_detections) draw(d.box, pw + kGapPx, kYellow, 1);
  return cv;
}

}  // namespace tpa
