#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "tpa/errors.hpp"
#include "tpa/image.hpp"

namespace tpa {

/// Interleaved 8-bit RGB raster, the on-disk pixel format.
struct Rgb8 {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> data;  // (y * width + x) * 3 + c

  Rgb8() = default;
  Rgb8(int h, int w, unsigned char fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  unsigned char* px(int y, int x) { return &data[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const unsigned char* px(int y, int x) const {
    return &data[(static_cast<std::size_t>(y) * width + x) * 3];
  }
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png(const std::string& path, const Rgb8& img) {
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw Error("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks: output bytes depend on pixels only.
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.px(y, 0)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Rgb8 read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw LoadError("missing image file: " + path);
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw LoadError("not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("libpng init failed");
  }
  Rgb8 out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("corrupt PNG: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out = Rgb8(static_cast<int>(png_get_image_height(png, info)),
             static_cast<int>(png_get_image_width(png, info)));
  for (int y = 0; y < out.height; ++y) png_read_row(png, out.px(y, 0), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline Image to_image(const Rgb8& rgb) {
  Image img(3, rgb.height, rgb.width);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb.px(y, x)[c] / 255.0;
  return img;
}

inline Rgb8 to_rgb8(const Image& img) {
  if (img.channels != 3) throw ContractError("to_rgb8 expects a 3-channel image");
  Rgb8 out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out.px(y, x)[c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  return out;
}

}  // namespace tpa
