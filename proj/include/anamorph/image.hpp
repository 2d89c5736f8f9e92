#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "anamorph/errors.hpp"

namespace anamorph {

/// Pixel dimensions of a raster.
struct Extent {
  std::size_t width = 0;
  std::size_t height = 0;

  friend bool operator==(const Extent&, const Extent&) = default;
};

inline std::string to_string(Extent e) {
  return std::to_string(e.width) + "x" + std::to_string(e.height);
}

/// Sentinel stored in every channel of a pixel with no data.
inline constexpr float kMissing = std::numeric_limits<float>::quiet_NaN();

inline bool is_missing(float v) { return std::isnan(v); }

/// Dense row-major raster of interleaved float samples. Nominal value range
/// is [-1, 1]. A pixel is MISSING when all of its channels hold kMissing.
class Image {
 public:
  Image() = default;

  Image(std::size_t width, std::size_t height, std::size_t channels, float fill = 0.f)
      : width_(width), height_(height), channels_(channels), data_(width * height * channels, fill) {
    if (channels == 0) throw SizeError("image needs at least one channel");
  }

  Image(Extent e, std::size_t channels, float fill = 0.f) : Image(e.width, e.height, channels, fill) {}

  static Image from_data(std::size_t width, std::size_t height, std::size_t channels,
                         std::vector<float> data) {
    if (data.size() != width * height * channels)
      throw SizeError("sample count does not match " + std::to_string(width) + "x" +
                      std::to_string(height) + "x" + std::to_string(channels));
    Image img;
    img.width_ = width;
    img.height_ = height;
    img.channels_ = channels;
    img.data_ = std::move(data);
    return img;
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t channels() const { return channels_; }
  Extent extent() const { return {width_, height_}; }
  std::size_t pixel_count() const { return width_ * height_; }
  bool empty() const { return data_.empty(); }

  float& at(std::size_t x, std::size_t y, std::size_t c = 0) {
    return data_[(y * width_ + x) * channels_ + c];
  }
  float at(std::size_t x, std::size_t y, std::size_t c = 0) const {
    return data_[(y * width_ + x) * channels_ + c];
  }

  std::span<float> pixel(std::size_t x, std::size_t y) {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }
  std::span<const float> pixel(std::size_t x, std::size_t y) const {
    return {data_.data() + (y * width_ + x) * channels_, channels_};
  }

  std::span<float> samples() { return data_; }
  std::span<const float> samples() const { return data_; }
  const std::vector<float>& vector() const { return data_; }

  bool missing(std::size_t x, std::size_t y) const { return is_missing(at(x, y, 0)); }

  void set_missing(std::size_t x, std::size_t y) {
    for (auto& s : pixel(x, y)) s = kMissing;
  }

  bool has_missing() const {
    for (float s : data_)
      if (is_missing(s)) return true;
    return false;
  }

  bool same_shape(const Image& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }

  friend bool operator==(const Image& a, const Image& b) {
    if (!a.same_shape(b)) return false;
    // Bitwise so that MISSING compares equal to MISSING.
    for (std::size_t i = 0; i < a.data_.size(); ++i) {
      const float x = a.data_[i], y = b.data_[i];
      if (is_missing(x) != is_missing(y)) return false;
      if (!is_missing(x) && x != y) return false;
    }
    return true;
  }

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> data_;
};

/// Boolean raster, true where data is defined.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t width, std::size_t height, bool fill = false)
      : width_(width), height_(height), bits_(width * height, fill ? 1 : 0) {}
  explicit Mask(Extent e, bool fill = false) : Mask(e.width, e.height, fill) {}

  /// Mask of the non-MISSING pixels of an image.
  static Mask defined(const Image& img) {
    Mask m(img.width(), img.height());
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) m.set(x, y, !img.missing(x, y));
    return m;
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  Extent extent() const { return {width_, height_}; }

  bool operator()(std::size_t x, std::size_t y) const { return bits_[y * width_ + x] != 0; }
  void set(std::size_t x, std::size_t y, bool v) { bits_[y * width_ + x] = v ? 1 : 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b))
    throw SizeError(std::string(what) + ": shape mismatch " + to_string(a.extent()) + "x" +
                    std::to_string(a.channels()) + " vs " + to_string(b.extent()) + "x" +
                    std::to_string(b.channels()));
}

inline Image operator+(const Image& a, const Image& b) {
  require_same_shape(a, b, "add");
  Image out = a;
  auto o = out.samples();
  auto s = b.samples();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s[i];
  return out;
}

inline Image operator-(const Image& a, const Image& b) {
  require_same_shape(a, b, "subtract");
  Image out = a;
  auto o = out.samples();
  auto s = b.samples();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= s[i];
  return out;
}

inline Image operator*(float k, const Image& a) {
  Image out = a;
  for (auto& s : out.samples()) s *= k;
  return out;
}

/// Largest |a - b| over samples where both are defined.
inline double max_abs_diff(const Image& a, const Image& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  auto x = a.samples();
  auto y = b.samples();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (is_missing(x[i]) || is_missing(y[i])) continue;
    m = std::max(m, std::abs(static_cast<double>(x[i]) - y[i]));
  }
  return m;
}

/// Copy with every MISSING sample replaced by `value`.
inline Image fill_missing(const Image& img, float value) {
  Image out = img;
  for (auto& s : out.samples())
    if (is_missing(s)) s = value;
  return out;
}

}  // namespace anamorph
