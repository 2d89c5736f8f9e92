#pragma once

// Generators and independent reference implementations shared by the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <tuple>
#include <vector>

#include "anamorph/image.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/uvmap.hpp"
#include "anamorph/warp.hpp"

namespace testing_support {

using namespace anamorph;

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double real(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng); }

  Image image(std::size_t w, std::size_t h, std::size_t c = 1) {
    Image img(w, h, c);
    for (auto& s : img.samples()) s = static_cast<float>(real(-1.0, 1.0));
    return img;
  }

  Mask mask(std::size_t w, std::size_t h, double p) {
    Mask m(Extent{w, h});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) m.set(x, y, coin(p));
    return m;
  }

  /// Arbitrary map: random uv per pixel, some pixels invalid.
  UvMap uvmap(std::size_t w, std::size_t h, double p_valid = 0.85) {
    UvMap m(w, h);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (coin(p_valid)) m.set(x, y, real(0.0, 1.0), real(0.0, 1.0));
    return m;
  }

  /// Smooth random warp: identity plus a low-frequency displacement and a
  /// random zoom, so LOD varies across pixels.
  UvMap smooth_uvmap(std::size_t w, std::size_t h) {
    const double zoom = real(0.1, 1.0);
    const double ax = real(-0.05, 0.05), ay = real(-0.05, 0.05), ph = real(0.0, 6.28);
    UvMap m(w, h);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double s = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
        const double t = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
        const double u = 0.5 + zoom * (s - 0.5) + ax * std::sin(6 * t + ph);
        const double v = 0.5 + zoom * (t - 0.5) + ay * std::cos(5 * s + ph);
        if (u >= 0 && u <= 1 && v >= 0 && v <= 1) m.set(x, y, u, v);
      }
    return m;
  }
};

inline double max_abs(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.samples().size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.samples()[i]) - b.samples()[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Pyramid reference operators, written directly from their definitions.

/// 3x3 outer-product [1 2 1]/4 blur with replicated borders, one 2D sum.
inline Image ref_blur(const Image& img) {
  const double k[3] = {0.25, 0.5, 0.25};
  Image out(img.extent(), img.channels());
  const auto w = static_cast<long>(img.width()), h = static_cast<long>(img.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      for (std::size_t c = 0; c < img.channels(); ++c) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long sx = std::clamp(x + dx, 0L, w - 1), sy = std::clamp(y + dy, 0L, h - 1);
            s += k[dx + 1] * k[dy + 1] * img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), c);
          }
        out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c) = static_cast<float>(s);
      }
  return out;
}

/// Mean over each 2x2 block (partial blocks at odd edges average what exists).
inline Image ref_decimate(const Image& img) {
  Image out((img.width() + 1) / 2, (img.height() + 1) / 2, img.channels());
  for (std::size_t y = 0; y < out.height(); ++y)
    for (std::size_t x = 0; x < out.width(); ++x)
      for (std::size_t c = 0; c < img.channels(); ++c) {
        double s = 0.0;
        int n = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            if (2 * x + dx < img.width() && 2 * y + dy < img.height()) {
              s += img.at(2 * x + dx, 2 * y + dy, c);
              ++n;
            }
        out.at(x, y, c) = static_cast<float>(s / n);
      }
  return out;
}

/// Bilinear interpolation of the coarse raster at fine pixel centers:
/// fine center x + 0.5 sits at coarse coordinate (x + 0.5) / 2 - 0.5.
inline Image ref_upsample(const Image& img, Extent target) {
  Image out(target, img.channels());
  auto coord = [](std::size_t i, std::size_t n) {
    const double s = std::clamp((static_cast<double>(i) + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(n - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    return std::tuple{lo, std::min(lo + 1, n - 1), s - static_cast<double>(lo)};
  };
  for (std::size_t y = 0; y < target.height; ++y) {
    const auto [y0, y1, fy] = coord(y, img.height());
    for (std::size_t x = 0; x < target.width; ++x) {
      const auto [x0, x1, fx] = coord(x, img.width());
      for (std::size_t c = 0; c < img.channels(); ++c) {
        const double v = (1 - fy) * ((1 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c)) +
                         fy * ((1 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c));
        out.at(x, y, c) = static_cast<float>(v);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nearest-defined-pixel imputation by exhaustive scan.

inline Image ref_impute(const Image& img, const Mask& mask) {
  Image out = img;
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      if (mask(x, y)) continue;
      std::size_t best_d = std::numeric_limits<std::size_t>::max(), bx = 0, by = 0;
      // Row-major scan with strict improvement keeps the smallest row, then column, among ties.
      for (std::size_t sy = 0; sy < img.height(); ++sy)
        for (std::size_t sx = 0; sx < img.width(); ++sx) {
          if (!mask(sx, sy)) continue;
          const std::size_t dx = sx > x ? sx - x : x - sx, dy = sy > y ? sy - y : y - sy;
          const std::size_t d = dx * dx + dy * dy;
          if (d < best_d) {
            best_d = d;
            bx = sx;
            by = sy;
          }
        }
      for (std::size_t c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.at(bx, by, c);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Normalized adjoint of forward warping, by explicit matrix.

/// Columns of the linear operator "Laplacian coefficients -> warped target",
/// probed one basis vector at a time. Single channel. Rows are target pixels;
/// rows of invalid pixels are zero.
struct WarpMatrix {
  std::vector<Extent> levels;
  std::size_t rows = 0;
  std::vector<std::vector<double>> columns;  // per coefficient, flattened level by level
  std::vector<std::pair<std::size_t, std::size_t>> index;  // (level, pixel) of each column
};

inline WarpMatrix probe_warp_matrix(const UvMap& map, const LodMap& lod, std::size_t depth, Extent canonical) {
  WarpMatrix m;
  m.rows = map.width() * map.height();
  for (std::size_t l = 0; l < depth; ++l) m.levels.push_back(level_extent(canonical, l));
  for (std::size_t l = 0; l < depth; ++l)
    for (std::size_t p = 0; p < m.levels[l].width * m.levels[l].height; ++p) {
      Pyramid lap{PyramidKind::laplacian, {}};
      for (std::size_t k = 0; k < depth; ++k) lap.levels.emplace_back(m.levels[k], 1, 0.f);
      lap.levels[l].samples()[p] = 1.f;
      const Image y = forward_warp(laplacian_to_gaussian(lap), map, lod, SampleMode::nearest);
      std::vector<double> col(m.rows, 0.0);
      for (std::size_t i = 0; i < m.rows; ++i)
        if (!is_missing(y.samples()[i])) col[i] = y.samples()[i];
      m.columns.push_back(std::move(col));
      m.index.emplace_back(l, p);
    }
  return m;
}

/// (A^T y) / (A^T 1) per coefficient; NaN where A^T 1 is zero.
inline std::vector<Image> normalized_adjoint(const WarpMatrix& m, const Image& y, const UvMap& map) {
  std::vector<Image> out;
  for (const auto& e : m.levels) out.emplace_back(e, 1, kMissing);
  for (std::size_t j = 0; j < m.columns.size(); ++j) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
      const std::size_t x = i % map.width(), yy = i / map.width();
      if (!map.valid(x, yy)) continue;
      num += m.columns[j][i] * y.samples()[i];
      den += m.columns[j][i];
    }
    if (den > 1e-12) out[m.index[j].first].samples()[m.index[j].second] = static_cast<float>(num / den);
  }
  return out;
}

}  // namespace testing_support
