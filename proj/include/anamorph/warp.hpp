#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/parallel.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/uvmap.hpp"

namespace anamorph {

enum class SampleMode { nearest, trilinear };

/// Laplacian pyramid in canonical space with per-level coverage masks.
/// masks[l] is true exactly where levels[l] is not MISSING.
struct MaskedPyramid {
  std::vector<Image> levels;
  std::vector<Mask> masks;

  std::size_t depth() const { return levels.size(); }
};

/// Integer pyramid level for a LOD value: round half up, clamped to the pyramid.
/// An undefined LOD (isolated valid pixel) reads level 0.
inline std::size_t nearest_level(double lod, std::size_t depth) {
  if (std::isnan(lod)) return 0;
  const double r = std::floor(lod + 0.5);
  return static_cast<std::size_t>(std::clamp(r, 0.0, static_cast<double>(depth - 1)));
}

/// Pixel whose center is nearest to normalized coordinate t on an n-pixel axis.
inline std::size_t nearest_index(double t, std::size_t n) {
  const double i = std::floor(t * static_cast<double>(n));
  return static_cast<std::size_t>(std::clamp(i, 0.0, static_cast<double>(n - 1)));
}

namespace detail {

inline void require_lod_matches(const UvMap& map, const LodMap& lod) {
  if (lod.extent() != map.extent())
    throw SizeError("LOD map " + to_string(lod.extent()) + " does not match uv map " + to_string(map.extent()));
}

inline void bilinear(const Image& img, double u, double v, std::span<float> out, float weight, bool accumulate) {
  const double sx = u * static_cast<double>(img.width()) - 0.5;
  const double sy = v * static_cast<double>(img.height()) - 0.5;
  const double fx0 = std::floor(sx), fy0 = std::floor(sy);
  const double fx = sx - fx0, fy = sy - fy0;
  auto cl = [](double i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(i, 0.0, static_cast<double>(n - 1)));
  };
  const std::size_t x0 = cl(fx0, img.width()), x1 = cl(fx0 + 1, img.width());
  const std::size_t y0 = cl(fy0, img.height()), y1 = cl(fy0 + 1, img.height());
  for (std::size_t c = 0; c < img.channels(); ++c) {
    const double top = img.at(x0, y0, c) + fx * (img.at(x1, y0, c) - img.at(x0, y0, c));
    const double bot = img.at(x0, y1, c) + fx * (img.at(x1, y1, c) - img.at(x0, y1, c));
    const auto val = static_cast<float>(weight * (top + fy * (bot - top)));
    out[c] = accumulate ? out[c] + val : val;
  }
}

}  // namespace detail

/// LOD-aware sampling of a Gaussian pyramid through a view: y = pi(G(x)).
/// Pixels the view does not define come out MISSING.
inline Image forward_warp(const Pyramid& gaussian, const UvMap& map, const LodMap& lod,
                          SampleMode mode = SampleMode::nearest, std::size_t threads = 1) {
  if (gaussian.kind != PyramidKind::gaussian) throw KindError("forward_warp samples a gaussian pyramid");
  check_structure(gaussian);
  detail::require_lod_matches(map, lod);
  for (const auto& level : gaussian.levels)
    if (level.has_missing()) throw MissingDataError("forward_warp input has MISSING samples");

  const std::size_t depth = gaussian.depth();
  const std::size_t ch = gaussian.levels[0].channels();
  Image out(map.extent(), ch, kMissing);
  parallel_rows(map.height(), threads, [&](std::size_t y) {
    for (std::size_t x = 0; x < map.width(); ++x) {
      if (!map.valid(x, y)) continue;
      auto px = out.pixel(x, y);
      const double u = map.u(x, y), v = map.v(x, y);
      const double l = lod.at(x, y);
      if (mode == SampleMode::nearest) {
        const Image& level = gaussian.levels[nearest_level(l, depth)];
        const auto src = level.pixel(nearest_index(u, level.width()), nearest_index(v, level.height()));
        std::copy(src.begin(), src.end(), px.begin());
      } else {
        const double lc = std::isnan(l) ? 0.0 : std::clamp(l, 0.0, static_cast<double>(depth - 1));
        const auto l0 = static_cast<std::size_t>(std::floor(lc));
        const std::size_t l1 = std::min(l0 + 1, depth - 1);
        const auto f = static_cast<float>(lc - static_cast<double>(l0));
        detail::bilinear(gaussian.levels[l0], u, v, px, 1.f - f, false);
        if (f > 0.f) detail::bilinear(gaussian.levels[l1], u, v, px, f, true);
      }
    }
  });
  return out;
}

/// Nearest-neighbour imputation: each undefined pixel copies the defined
/// pixel at the smallest Euclidean distance, ties broken by smallest row,
/// then smallest column. Exact, linear time (separable lower envelope with a
/// lexicographic tie order).
inline Image impute_nearest(const Image& img, const Mask& mask) {
  if (mask.extent() != img.extent())
    throw SizeError("mask " + to_string(mask.extent()) + " does not match image " + to_string(img.extent()));
  if (mask.count() == 0) throw EmptyMaskError("imputation needs at least one defined pixel");
  const std::size_t w = img.width(), h = img.height();
  constexpr std::int64_t kNone = -1;

  // Per column and row: nearest defined row in that column (ties -> upper).
  std::vector<std::int64_t> best_row(w * h, kNone);
  for (std::size_t x = 0; x < w; ++x) {
    std::int64_t last = kNone;
    for (std::size_t y = 0; y < h; ++y) {
      if (mask(x, y)) last = static_cast<std::int64_t>(y);
      best_row[y * w + x] = last;
    }
    std::int64_t next = kNone;
    for (std::size_t y = h; y-- > 0;) {
      if (mask(x, y)) next = static_cast<std::int64_t>(y);
      const std::int64_t up = best_row[y * w + x];
      const auto yi = static_cast<std::int64_t>(y);
      if (next != kNone && (up == kNone || next - yi < yi - up)) best_row[y * w + x] = next;
    }
  }

  Image out = img;
  std::vector<std::int64_t> hull(w), start(w);
  for (std::size_t y = 0; y < h; ++y) {
    const auto yi = static_cast<std::int64_t>(y);
    auto row_of = [&](std::int64_t c) { return best_row[y * w + static_cast<std::size_t>(c)]; };
    auto height_of = [&](std::int64_t c) {
      const std::int64_t d = yi - row_of(c);
      return d * d;
    };
    // First integer x at which column q (> p) wins over column p.
    auto threshold = [&](std::int64_t p, std::int64_t q) {
      const std::int64_t a = q * q - p * p + height_of(q) - height_of(p);
      const std::int64_t b = 2 * (q - p);
      std::int64_t fl = a / b;
      if ((a % b != 0) && ((a < 0) != (b < 0))) --fl;
      if (fl * b == a) return row_of(q) < row_of(p) ? fl : fl + 1;
      return fl + 1;
    };

    std::size_t n = 0;
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(w); ++c) {
      if (row_of(c) == kNone) continue;
      std::int64_t t = 0;
      while (n > 0) {
        t = threshold(hull[n - 1], c);
        if (n > 1 && t <= start[n - 1]) {
          --n;
          continue;
        }
        break;
      }
      hull[n] = c;
      start[n] = n == 0 ? std::numeric_limits<std::int64_t>::min() : t;
      ++n;
    }
    if (n == 0) continue;  // unreachable: some column has a defined pixel

    std::size_t k = 0;
    for (std::size_t x = 0; x < w; ++x) {
      while (k + 1 < n && start[k + 1] <= static_cast<std::int64_t>(x)) ++k;
      if (mask(x, y)) continue;
      const auto sx = static_cast<std::size_t>(hull[k]);
      const auto sy = static_cast<std::size_t>(row_of(hull[k]));
      const auto src = img.pixel(sx, sy);
      std::copy(src.begin(), src.end(), out.pixel(x, y).begin());
    }
  }
  return out;
}

/// Raw transport of target pixels to pyramid samples before reparameterization:
/// per level, the sum of deposited values and the number of hits.
struct Deposits {
  std::vector<Accumulator> sums;
  std::vector<Accumulator> hits;
};

/// Scatters every valid, non-MISSING target pixel to the (level, pixel) that
/// nearest-mode forward warping reads it from. Row-major order.
inline Deposits deposit(const Image& y, const UvMap& map, const LodMap& lod, std::size_t depth, Extent canonical) {
  check_depth(canonical, depth);
  detail::require_lod_matches(map, lod);
  if (y.extent() != map.extent())
    throw SizeError("image " + to_string(y.extent()) + " does not match uv map " + to_string(map.extent()));
  Deposits d;
  for (std::size_t l = 0; l < depth; ++l) {
    d.sums.emplace_back(level_extent(canonical, l), y.channels());
    d.hits.emplace_back(level_extent(canonical, l), 1);
  }
  for (std::size_t py = 0; py < map.height(); ++py)
    for (std::size_t px = 0; px < map.width(); ++px) {
      if (!map.valid(px, py) || y.missing(px, py)) continue;
      const std::size_t l = nearest_level(lod.at(px, py), depth);
      const Extent e = d.sums[l].extent;
      const std::size_t cx = nearest_index(map.u(px, py), e.width);
      const std::size_t cy = nearest_index(map.v(px, py), e.height);
      for (std::size_t c = 0; c < y.channels(); ++c) d.sums[l].at(cx, cy, c) += y.at(px, py, c);
      d.hits[l].at(cx, cy, 0) += 1.0;
    }
  return d;
}

/// Normalized adjoint transport: deposits pushed through the transpose of the
/// Laplacian-to-Gaussian reparameterization (so each level also feeds every
/// coarser one) and divided by the equally transported hit counts.
struct Transport {
  std::vector<Image> levels;  ///< MISSING where no hit reached the sample
  std::vector<Mask> masks;
};

inline Transport transport(const Image& y, const UvMap& map, const LodMap& lod, std::size_t depth, Extent canonical) {
  Deposits d = deposit(y, map, lod, depth, canonical);
  for (std::size_t l = 1; l < depth; ++l) {
    const Accumulator s = upsample_adjoint(d.sums[l - 1], d.sums[l].extent);
    const Accumulator w = upsample_adjoint(d.hits[l - 1], d.hits[l].extent);
    for (std::size_t i = 0; i < s.data.size(); ++i) d.sums[l].data[i] += s.data[i];
    for (std::size_t i = 0; i < w.data.size(); ++i) d.hits[l].data[i] += w.data[i];
  }
  Transport t;
  for (std::size_t l = 0; l < depth; ++l) {
    const Extent e = d.sums[l].extent;
    Image level(e, y.channels(), kMissing);
    Mask mask(e);
    for (std::size_t cy = 0; cy < e.height; ++cy)
      for (std::size_t cx = 0; cx < e.width; ++cx) {
        const double hits = d.hits[l].at(cx, cy, 0);
        if (!(hits > 0.0)) continue;
        mask.set(cx, cy, true);
        for (std::size_t c = 0; c < y.channels(); ++c)
          level.at(cx, cy, c) = static_cast<float>(d.sums[l].at(cx, cy, c) / hits);
      }
    t.levels.push_back(std::move(level));
    t.masks.push_back(std::move(mask));
  }
  return t;
}

/// Inverse Laplacian warping: transport, then per level (except the coarsest)
/// impute holes, take the band-pass P* - U(D(kappa(P*))), and re-mask.
inline MaskedPyramid inverse_warp(const Image& y, const UvMap& map, const LodMap& lod, std::size_t depth,
                                  Extent canonical) {
  Transport t = transport(y, map, lod, depth, canonical);
  MaskedPyramid out{std::move(t.levels), std::move(t.masks)};
  for (std::size_t l = 0; l + 1 < depth; ++l) {
    const Mask& mask = out.masks[l];
    if (mask.count() == 0) continue;
    const Image imputed = impute_nearest(out.levels[l], mask);
    Image band = imputed - upsample(downsample_blur(imputed), imputed.extent());
    for (std::size_t cy = 0; cy < band.height(); ++cy)
      for (std::size_t cx = 0; cx < band.width(); ++cx)
        if (!mask(cx, cy)) band.set_missing(cx, cy);
    out.levels[l] = std::move(band);
  }
  return out;
}

/// Single-level nearest lookup of a canonical raster through a view.
inline Image sample_nearest(const Image& canonical, const UvMap& map) {
  Image out(map.extent(), canonical.channels(), kMissing);
  for (std::size_t y = 0; y < map.height(); ++y)
    for (std::size_t x = 0; x < map.width(); ++x) {
      if (!map.valid(x, y)) continue;
      const auto src = canonical.pixel(nearest_index(map.u(x, y), canonical.width()),
                                       nearest_index(map.v(x, y), canonical.height()));
      std::copy(src.begin(), src.end(), out.pixel(x, y).begin());
    }
  return out;
}

/// Normalized adjoint of `sample_nearest`: mean of the target pixels landing
/// on each canonical pixel, MISSING where none do.
inline Image transport_nearest(const Image& y, const UvMap& map, Extent canonical) {
  if (y.extent() != map.extent())
    throw SizeError("image " + to_string(y.extent()) + " does not match uv map " + to_string(map.extent()));
  Accumulator sums(canonical, y.channels());
  Accumulator hits(canonical, 1);
  for (std::size_t py = 0; py < map.height(); ++py)
    for (std::size_t px = 0; px < map.width(); ++px) {
      if (!map.valid(px, py) || y.missing(px, py)) continue;
      const std::size_t cx = nearest_index(map.u(px, py), canonical.width);
      const std::size_t cy = nearest_index(map.v(px, py), canonical.height);
      for (std::size_t c = 0; c < y.channels(); ++c) sums.at(cx, cy, c) += y.at(px, py, c);
      hits.at(cx, cy, 0) += 1.0;
    }
  Image out(canonical, y.channels(), kMissing);
  for (std::size_t cy = 0; cy < canonical.height; ++cy)
    for (std::size_t cx = 0; cx < canonical.width; ++cx) {
      const double n = hits.at(cx, cy, 0);
      if (n == 0.0) continue;
      for (std::size_t c = 0; c < y.channels(); ++c) out.at(cx, cy, c) = static_cast<float>(sums.at(cx, cy, c) / n);
    }
  return out;
}

/// True when nearest-mode warping through `map` reads every pixel of level 0
/// at its own position, i.e. the view is the identity on a `canonical` grid.
inline bool is_identity_view(const UvMap& map, const LodMap& lod, Extent canonical) {
  if (map.extent() != canonical || lod.extent() != canonical) return false;
  for (std::size_t y = 0; y < map.height(); ++y)
    for (std::size_t x = 0; x < map.width(); ++x) {
      if (!map.valid(x, y) || nearest_level(lod.at(x, y), 2) != 0) return false;
      if (nearest_index(map.u(x, y), canonical.width) != x || nearest_index(map.v(x, y), canonical.height) != y)
        return false;
    }
  return true;
}

}  // namespace anamorph
