#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"

namespace anamorph {

/// View function as a per-pixel lookup into canonical space. (u, v) are
/// normalized canonical coordinates in [0, 1]; invalid pixels hold (0, 0).
class UvMap {
 public:
  UvMap() = default;
  UvMap(std::size_t width, std::size_t height)
      : width_(width), height_(height), u_(width * height, 0.0), v_(width * height, 0.0),
        valid_(width * height, 0) {}
  explicit UvMap(Extent e) : UvMap(e.width, e.height) {}

  /// u = (x + 0.5) / W, v = (y + 0.5) / H: every pixel fetches its own center.
  static UvMap identity(std::size_t width, std::size_t height) {
    UvMap m(width, height);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        m.set(x, y, (static_cast<double>(x) + 0.5) / static_cast<double>(width),
              (static_cast<double>(y) + 0.5) / static_cast<double>(height));
    return m;
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  Extent extent() const { return {width_, height_}; }

  bool valid(std::size_t x, std::size_t y) const { return valid_[idx(x, y)] != 0; }
  double u(std::size_t x, std::size_t y) const { return u_[idx(x, y)]; }
  double v(std::size_t x, std::size_t y) const { return v_[idx(x, y)]; }

  void set(std::size_t x, std::size_t y, double u, double v) {
    if (!(u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0))
      throw RangeError("uv (" + std::to_string(u) + ", " + std::to_string(v) + ") outside [0, 1]");
    const auto i = idx(x, y);
    u_[i] = u;
    v_[i] = v;
    valid_[i] = 1;
  }

  void set_invalid(std::size_t x, std::size_t y) {
    const auto i = idx(x, y);
    u_[i] = 0.0;
    v_[i] = 0.0;
    valid_[i] = 0;
  }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), std::uint8_t{1}));
  }

  friend bool operator==(const UvMap&, const UvMap&) = default;

 private:
  std::size_t idx(std::size_t x, std::size_t y) const { return y * width_ + x; }

  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> u_;
  std::vector<double> v_;
  std::vector<std::uint8_t> valid_;
};

/// Per-pixel pyramid level; NaN where the view has no usable derivative.
struct LodMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> level;

  Extent extent() const { return {width, height}; }
  double at(std::size_t x, std::size_t y) const { return level[y * width + x]; }
  bool defined(std::size_t x, std::size_t y) const { return !std::isnan(at(x, y)); }
};

/// LOD from the Jacobian of the pixel-unit mapping (u * W_c, v * H_c):
/// log2(max(|grad u|, |grad v|)), clamped below at 0. Forward differences;
/// a pixel whose forward neighbour is unusable falls back to the backward
/// one, and with neither the LOD is undefined.
inline LodMap compute_lod(const UvMap& map, Extent canonical) {
  if (canonical.width < 2 || canonical.height < 2)
    throw SizeError("canonical size must be at least 2, got " + to_string(canonical));
  const double cw = static_cast<double>(canonical.width);
  const double ch = static_cast<double>(canonical.height);
  const std::size_t w = map.width(), h = map.height();
  LodMap lod{w, h, std::vector<double>(w * h, std::numeric_limits<double>::quiet_NaN())};

  struct Delta {
    double du, dv;
  };
  auto delta = [&](std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
    return Delta{(map.u(x1, y1) - map.u(x0, y0)) * cw, (map.v(x1, y1) - map.v(x0, y0)) * ch};
  };

  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!map.valid(x, y)) continue;
      std::optional<Delta> dx, dy;
      if (x + 1 < w && map.valid(x + 1, y))
        dx = delta(x, y, x + 1, y);
      else if (x > 0 && map.valid(x - 1, y))
        dx = delta(x - 1, y, x, y);
      if (y + 1 < h && map.valid(x, y + 1))
        dy = delta(x, y, x, y + 1);
      else if (y > 0 && map.valid(x, y - 1))
        dy = delta(x, y - 1, x, y);
      if (!dx || !dy) continue;
      const double grad_u = std::hypot(dx->du, dy->du);
      const double grad_v = std::hypot(dx->dv, dy->dv);
      const double m = std::max(grad_u, grad_v);
      lod.level[y * w + x] = m > 1.0 ? std::log2(m) : 0.0;
    }
  return lod;
}

inline LodMap compute_lod(const UvMap& map, std::size_t canonical_size) {
  return compute_lod(map, Extent{canonical_size, canonical_size});
}

/// Block subsampling keeping the top-left sample of each factor x factor block.
inline UvMap downscale_uvmap(const UvMap& map, std::size_t factor) {
  if (factor == 0 || map.width() % factor != 0 || map.height() % factor != 0)
    throw SizeError("downscale factor " + std::to_string(factor) + " does not divide " +
                    to_string(map.extent()));
  UvMap out(map.width() / factor, map.height() / factor);
  for (std::size_t y = 0; y < out.height(); ++y)
    for (std::size_t x = 0; x < out.width(); ++x)
      if (map.valid(x * factor, y * factor)) out.set(x, y, map.u(x * factor, y * factor), map.v(x * factor, y * factor));
  return out;
}

// UVM1: "UVM1", u32 width, u32 height, then width*height records of three
// float32 (u, v, validity), all little-endian, row-major, no padding.

inline constexpr std::array<std::uint8_t, 4> kUvmMagic{0x55, 0x56, 0x4D, 0x31};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

inline float get_f32(std::span<const std::uint8_t> in, std::size_t at) {
  return std::bit_cast<float>(get_u32(in, at));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_uvm(const UvMap& map) {
  std::vector<std::uint8_t> out(kUvmMagic.begin(), kUvmMagic.end());
  out.reserve(12 + map.width() * map.height() * 12);
  detail::put_u32(out, static_cast<std::uint32_t>(map.width()));
  detail::put_u32(out, static_cast<std::uint32_t>(map.height()));
  for (std::size_t y = 0; y < map.height(); ++y)
    for (std::size_t x = 0; x < map.width(); ++x) {
      const bool ok = map.valid(x, y);
      detail::put_f32(out, ok ? static_cast<float>(map.u(x, y)) : 0.f);
      detail::put_f32(out, ok ? static_cast<float>(map.v(x, y)) : 0.f);
      detail::put_f32(out, ok ? 1.f : 0.f);
    }
  return out;
}

inline UvMap decode_uvm(std::span<const std::uint8_t> bytes) {
  const std::size_t prefix = std::min<std::size_t>(bytes.size(), 4);
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(prefix), kUvmMagic.begin()))
    throw FormatError("bad UVM1 magic");
  if (bytes.size() < 12) throw TruncationError("UVM1 header truncated");
  const std::size_t w = detail::get_u32(bytes, 4);
  const std::size_t h = detail::get_u32(bytes, 8);
  const std::size_t expected = 12 + w * h * 12;
  if (bytes.size() < expected)
    throw TruncationError("UVM1 payload truncated: " + std::to_string(bytes.size()) + " of " +
                          std::to_string(expected) + " bytes");
  if (bytes.size() > expected) throw FormatError("trailing bytes after UVM1 payload");
  UvMap map(w, h);
  std::size_t at = 12;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x, at += 12) {
      const float u = detail::get_f32(bytes, at);
      const float v = detail::get_f32(bytes, at + 4);
      const float flag = detail::get_f32(bytes, at + 8);
      if (flag == 1.f) {
        if (!(u >= 0.f && u <= 1.f && v >= 0.f && v <= 1.f))
          throw RangeError("UVM1 pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                           ") has uv outside [0, 1]");
        map.set(x, y, u, v);
      } else if (flag == 0.f) {
        if (u != 0.f || v != 0.f) throw FormatError("invalid UVM1 pixel with nonzero uv");
      } else {
        throw FormatError("UVM1 validity must be 0.0 or 1.0");
      }
    }
  return map;
}

inline void write_uvm(const UvMap& map, const std::filesystem::path& path) {
  detail::write_file(path, encode_uvm(map));
}

inline UvMap read_uvm(const std::filesystem::path& path) { return decode_uvm(detail::read_file(path)); }

}  // namespace anamorph
