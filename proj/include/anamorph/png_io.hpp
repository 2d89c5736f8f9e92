#pragma once

// PNG in/out. Sample values map linearly between [-1, 1] and [0, 2^bits - 1];
// no gamma handling. Reading always yields RGB.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"

namespace anamorph {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors by longjmp; the message is kept for the exception
// thrown once control is back in C++ code.
struct PngError {
  std::string message;
};

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  static_cast<PngError*>(png_get_error_ptr(png))->message = msg;
  png_longjmp(png, 1);
}
inline void png_warn(png_structp, png_const_charp) {}

}  // namespace detail

inline Image read_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw FormatError("cannot open " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw FormatError(path.string() + " is not a PNG file");

  detail::PngError err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError("libpng init failed");
  }
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_read_struct(&p, &i, nullptr); }
  } guard{png, info};

  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) throw FormatError(path.string() + ": " + err.message);
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int bits = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bits < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
  if (bits == 16) png_set_swap(png);  // native little-endian words
  png_read_update_info(png, info);
  bits = png_get_bit_depth(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  const std::size_t channels = png_get_channels(png, info);
  if (channels != 3) throw FormatError("unexpected PNG channel layout");

  buf.resize(png_get_rowbytes(png, info) * h);
  rows.resize(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * png_get_rowbytes(png, info);
  png_read_image(png, rows.data());

  Image img(w, h, 3);
  const double max = bits == 16 ? 65535.0 : 255.0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = x * 3 + c;
        double q;
        if (bits == 16) {
          std::uint16_t word;
          std::memcpy(&word, rows[y] + 2 * i, 2);
          q = word;
        } else {
          q = rows[y][i];
        }
        img.at(x, y, c) = static_cast<float>(2.0 * q / max - 1.0);
      }
  return img;
}

/// Writes 1 (gray), 3 (RGB) or 4 (RGBA) channel images at 8 or 16 bits.
/// Values are clamped to [-1, 1]; MISSING pixels are written as `fill`.
inline void write_png(const Image& img, const std::filesystem::path& path, int bits = 16, float fill = 0.f) {
  if (bits != 8 && bits != 16) throw FormatError("PNG bit depth must be 8 or 16");
  int color;
  switch (img.channels()) {
    case 1: color = PNG_COLOR_TYPE_GRAY; break;
    case 3: color = PNG_COLOR_TYPE_RGB; break;
    case 4: color = PNG_COLOR_TYPE_RGB_ALPHA; break;
    default: throw SizeError("PNG needs 1, 3 or 4 channels, got " + std::to_string(img.channels()));
  }
  if (img.width() == 0 || img.height() == 0) throw SizeError("cannot write an empty PNG");
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw FormatError("cannot write " + path.string());
  detail::PngError err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_fail, detail::png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError("libpng init failed");
  }
  struct Guard {
    png_structp& p;
    png_infop& i;
    ~Guard() { png_destroy_write_struct(&p, &i); }
  } guard{png, info};

  const double max = bits == 16 ? 65535.0 : 255.0;
  const std::size_t bytes = bits / 8;
  std::vector<unsigned char> row(img.width() * img.channels() * bytes);
  if (setjmp(png_jmpbuf(png))) throw FormatError(path.string() + ": " + err.message);
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), bits, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x) {
      const bool hole = img.missing(x, y);
      for (std::size_t c = 0; c < img.channels(); ++c) {
        const double v = std::clamp(static_cast<double>(hole ? fill : img.at(x, y, c)), -1.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround((v + 1.0) * 0.5 * max));
        const std::size_t i = (x * img.channels() + c) * bytes;
        if (bits == 16) {
          row[i] = static_cast<unsigned char>(q >> 8);  // PNG is big-endian
          row[i + 1] = static_cast<unsigned char>(q & 0xff);
        } else {
          row[i] = static_cast<unsigned char>(q);
        }
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

}  // namespace anamorph
