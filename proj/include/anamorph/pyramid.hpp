#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"

namespace anamorph {

/// Odd-length, symmetric, normalized blur kernel.
struct Kernel {
  std::vector<double> taps;

  std::size_t radius() const { return taps.size() / 2; }

  void validate() const {
    if (taps.empty() || taps.size() % 2 == 0) throw SizeError("kernel length must be odd");
    double sum = 0.0;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] != taps[taps.size() - 1 - i]) throw RangeError("kernel must be symmetric");
      sum += taps[i];
    }
    if (std::abs(sum - 1.0) > 1e-9) throw RangeError("kernel taps must sum to 1");
  }
};

/// The pyramid blur: 3-tap binomial. Together with 2x2 block decimation it
/// is exactly half the transpose of `upsample`, which keeps inverse warping
/// of an identity view lossless.
inline const Kernel& pyramid_kernel() {
  static const Kernel k{{0.25, 0.5, 0.25}};
  return k;
}

enum class PyramidKind { gaussian, laplacian };

inline const char* to_string(PyramidKind k) {
  return k == PyramidKind::gaussian ? "gaussian" : "laplacian";
}

/// Multi-resolution stack. Level l has extent ceil(W / 2^l) x ceil(H / 2^l).
struct Pyramid {
  PyramidKind kind = PyramidKind::gaussian;
  std::vector<Image> levels;

  std::size_t depth() const { return levels.size(); }
  Extent base() const { return levels.empty() ? Extent{} : levels.front().extent(); }
};

inline Extent level_extent(Extent base, std::size_t level) {
  for (std::size_t l = 0; l < level; ++l) base = {(base.width + 1) / 2, (base.height + 1) / 2};
  return base;
}

inline std::size_t max_depth(Extent e) {
  std::size_t side = std::min(e.width, e.height);
  if (side == 0) return 0;
  std::size_t d = 1;
  while (side >= 2) {
    side /= 2;
    ++d;
  }
  return d;
}

/// Depth used when a caller does not choose one: up to 6 levels
/// (1024 -> 32), fewer for small images.
inline std::size_t default_depth(Extent e) { return std::min<std::size_t>(6, max_depth(e)); }

inline void check_depth(Extent e, std::size_t depth) {
  if (depth < 1 || depth > max_depth(e))
    throw DepthError("pyramid depth " + std::to_string(depth) + " invalid for " + to_string(e) +
                     " (max " + std::to_string(max_depth(e)) + ")");
}

/// Throws SizeError unless the level extents follow the halving rule.
inline void check_structure(const Pyramid& p) {
  if (p.levels.empty()) throw DepthError("empty pyramid");
  const Extent base = p.base();
  for (std::size_t l = 0; l < p.depth(); ++l) {
    if (p.levels[l].extent() != level_extent(base, l))
      throw SizeError("pyramid level " + std::to_string(l) + " has extent " +
                      to_string(p.levels[l].extent()) + ", expected " +
                      to_string(level_extent(base, l)));
    if (p.levels[l].channels() != p.levels[0].channels())
      throw SizeError("pyramid levels disagree on channel count");
  }
}

/// Separable convolution with edge replication.
inline Image convolve(const Image& img, const Kernel& k) {
  const std::size_t w = img.width(), h = img.height(), ch = img.channels();
  const auto r = static_cast<std::ptrdiff_t>(k.radius());
  auto clampi = [](std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  Image tmp(w, h, ch);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t)
          acc += k.taps[static_cast<std::size_t>(t + r)] *
                 img.at(clampi(static_cast<std::ptrdiff_t>(x) + t, w), y, c);
        tmp.at(x, y, c) = static_cast<float>(acc);
      }
  Image out(w, h, ch);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t)
          acc += k.taps[static_cast<std::size_t>(t + r)] *
                 tmp.at(x, clampi(static_cast<std::ptrdiff_t>(y) + t, h), c);
        out.at(x, y, c) = static_cast<float>(acc);
      }
  return out;
}

inline Image blur(const Image& img) { return convolve(img, pyramid_kernel()); }

/// Halves resolution by averaging 2x2 blocks; trailing odd rows/columns
/// average the samples that exist.
inline Image decimate(const Image& img) {
  const Extent out_e = level_extent(img.extent(), 1);
  Image out(out_e, img.channels());
  for (std::size_t y = 0; y < out_e.height; ++y)
    for (std::size_t x = 0; x < out_e.width; ++x) {
      const std::size_t x1 = std::min(2 * x + 1, img.width() - 1);
      const std::size_t y1 = std::min(2 * y + 1, img.height() - 1);
      for (std::size_t c = 0; c < img.channels(); ++c) {
        double acc = 0.0;
        std::size_t n = 0;
        for (std::size_t yy = 2 * y; yy <= y1; ++yy)
          for (std::size_t xx = 2 * x; xx <= x1; ++xx) {
            acc += img.at(xx, yy, c);
            ++n;
          }
        out.at(x, y, c) = static_cast<float>(acc / static_cast<double>(n));
      }
    }
  return out;
}

/// D(kappa(img)).
inline Image downsample_blur(const Image& img) {
  if (img.width() < 2 || img.height() < 2)
    throw SizeError("cannot downsample a " + to_string(img.extent()) + " image");
  return decimate(blur(img));
}

/// One output sample of a 2x bilinear magnification: a[lo] + w * (a[hi] - a[lo]).
struct LerpTap {
  std::size_t lo;
  std::size_t hi;
  float w;
};

/// Taps for magnifying `coarse` samples to `fine` samples, pixel centers
/// aligned ((x + 0.5) / 2 - 0.5 in coarse coordinates), edges clamped.
inline std::vector<LerpTap> upsample_taps(std::size_t fine, std::size_t coarse) {
  if ((fine + 1) / 2 != coarse)
    throw SizeError("cannot upsample " + std::to_string(coarse) + " samples to " + std::to_string(fine));
  std::vector<LerpTap> taps(fine);
  for (std::size_t x = 0; x < fine; ++x) {
    const std::size_t k = x / 2;
    if (x % 2 == 0)
      taps[x] = {k == 0 ? 0 : k - 1, k, 0.75f};
    else
      taps[x] = {k, std::min(k + 1, coarse - 1), 0.25f};
  }
  return taps;
}

/// Bilinear 2x magnification to `target`, whose halving must give img's extent.
inline Image upsample(const Image& img, Extent target) {
  const auto tx = upsample_taps(target.width, img.width());
  const auto ty = upsample_taps(target.height, img.height());
  const std::size_t ch = img.channels();
  Image tmp(target.width, img.height(), ch);
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < target.width; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        const float a = img.at(tx[x].lo, y, c), b = img.at(tx[x].hi, y, c);
        tmp.at(x, y, c) = a + tx[x].w * (b - a);
      }
  Image out(target, ch);
  for (std::size_t y = 0; y < target.height; ++y)
    for (std::size_t x = 0; x < target.width; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        const float a = tmp.at(x, ty[y].lo, c), b = tmp.at(x, ty[y].hi, c);
        out.at(x, y, c) = a + ty[y].w * (b - a);
      }
  return out;
}

inline Image upsample(const Image& img) { return upsample(img, {2 * img.width(), 2 * img.height()}); }

/// Interleaved double-precision plane used for adjoint accumulation.
struct Accumulator {
  Extent extent;
  std::size_t channels = 0;
  std::vector<double> data;

  Accumulator() = default;
  Accumulator(Extent e, std::size_t ch) : extent(e), channels(ch), data(e.width * e.height * ch, 0.0) {}

  double& at(std::size_t x, std::size_t y, std::size_t c) {
    return data[(y * extent.width + x) * channels + c];
  }
  double at(std::size_t x, std::size_t y, std::size_t c) const {
    return data[(y * extent.width + x) * channels + c];
  }
};

/// Exact transpose of `upsample`: maps a fine plane to the coarse plane.
inline Accumulator upsample_adjoint(const Accumulator& fine, Extent coarse) {
  const auto tx = upsample_taps(fine.extent.width, coarse.width);
  const auto ty = upsample_taps(fine.extent.height, coarse.height);
  const std::size_t ch = fine.channels;
  // upsample = V * H, so the transpose applies V^T first.
  Accumulator tmp({fine.extent.width, coarse.height}, ch);
  for (std::size_t y = 0; y < fine.extent.height; ++y) {
    const auto& t = ty[y];
    for (std::size_t x = 0; x < fine.extent.width; ++x)
      for (std::size_t c = 0; c < ch; ++c) {
        const double v = fine.at(x, y, c);
        tmp.at(x, t.lo, c) += (1.0 - t.w) * v;
        tmp.at(x, t.hi, c) += t.w * v;
      }
  }
  Accumulator out(coarse, ch);
  for (std::size_t y = 0; y < coarse.height; ++y)
    for (std::size_t x = 0; x < fine.extent.width; ++x) {
      const auto& t = tx[x];
      for (std::size_t c = 0; c < ch; ++c) {
        const double v = tmp.at(x, y, c);
        out.at(t.lo, y, c) += (1.0 - t.w) * v;
        out.at(t.hi, y, c) += t.w * v;
      }
    }
  return out;
}

inline Pyramid build_gaussian(const Image& img, std::size_t depth) {
  check_depth(img.extent(), depth);
  Pyramid p{PyramidKind::gaussian, {}};
  p.levels.reserve(depth);
  p.levels.push_back(img);
  for (std::size_t l = 1; l < depth; ++l) p.levels.push_back(downsample_blur(p.levels.back()));
  return p;
}

inline Pyramid build_laplacian(const Image& img, std::size_t depth) {
  Pyramid g = build_gaussian(img, depth);
  Pyramid p{PyramidKind::laplacian, {}};
  p.levels.resize(depth);
  p.levels[depth - 1] = g.levels[depth - 1];
  for (std::size_t l = 0; l + 1 < depth; ++l)
    p.levels[l] = g.levels[l] - upsample(g.levels[l + 1], g.levels[l].extent());
  return p;
}

/// Level l of the result is L_l + U(G_{l+1}), i.e. the sum of all coarser
/// Laplacian levels upsampled to level l.
inline Pyramid laplacian_to_gaussian(const Pyramid& lap) {
  if (lap.kind != PyramidKind::laplacian) throw KindError("expected a laplacian pyramid");
  check_structure(lap);
  Pyramid g{PyramidKind::gaussian, lap.levels};
  for (std::size_t l = lap.depth() - 1; l-- > 0;)
    g.levels[l] = lap.levels[l] + upsample(g.levels[l + 1], lap.levels[l].extent());
  return g;
}

inline Image reconstruct(const Pyramid& lap) {
  if (lap.kind != PyramidKind::laplacian) throw KindError("reconstruct needs a laplacian pyramid");
  check_structure(lap);
  for (const auto& level : lap.levels)
    if (level.has_missing()) throw MissingDataError("cannot reconstruct a pyramid with MISSING samples");
  Image r = lap.levels.back();
  for (std::size_t l = lap.depth() - 1; l-- > 0;) r = lap.levels[l] + upsample(r, lap.levels[l].extent());
  return r;
}

}  // namespace anamorph
