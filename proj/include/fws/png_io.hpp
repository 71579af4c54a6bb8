// Thin libpng wrappers: 8-bit grayscale and RGB, which is all the pipeline
// stores (masks are single-channel with 255 as the unannotated sentinel).
#pragma once

#include <png.h>

#include <cstdio>
#include <memory>

#include "fws/grid.hpp"

namespace fws {

struct PngImage {
  i64 height = 0, width = 0, channels = 0;
  std::vector<u8> data;  // interleaved rows

  u8 at(i64 r, i64 c, i64 ch) const {
    return data[static_cast<size_t>((r * width + c) * channels + ch)];
  }
};

inline PngImage read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng failure on " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  PngImage img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  img.channels = png_get_channels(png, info);
  img.data.resize(static_cast<size_t>(img.height * img.width * img.channels));
  std::vector<png_bytep> rows(static_cast<size_t>(img.height));
  for (i64 r = 0; r < img.height; ++r)
    rows[static_cast<size_t>(r)] = img.data.data() + r * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline void write_png(const std::string& path, i64 h, i64 w, i64 channels, const u8* data) {
  check(channels == 1 || channels == 3, "write_png: 1 or 3 channels");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng failure on " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (i64 r = 0; r < h; ++r)
    rows[static_cast<size_t>(r)] = const_cast<u8*>(data) + r * w * channels;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_png_gray(const std::string& path, const MaskGrid& g) {
  write_png(path, g.height(), g.width(), 1, g.data().data());
}

}  // namespace fws
