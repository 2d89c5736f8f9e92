#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/warp.hpp"

namespace anamorph {

/// Value-weighted average sum(|x| x) / sum(|x|); 0 when every value is 0.
/// Equal inputs return that value exactly.
inline double vavg(std::span<const double> values) {
  if (!values.empty() && std::all_of(values.begin(), values.end(), [&](double x) { return x == values[0]; }))
    return values[0];
  double num = 0.0, den = 0.0;
  for (double x : values) {
    num += std::abs(x) * x;
    den += std::abs(x);
  }
  return den == 0.0 ? 0.0 : num / den;
}

inline double vavg(std::initializer_list<double> values) { return vavg(std::span(values.begin(), values.size())); }

struct BlendOptions {
  /// 0 = plain mean, 1 = value-weighted mean.
  double alpha = 0.375;
  /// Halve the weight of samples on a mask boundary (a 1-pixel ramp).
  bool feather = true;
};

namespace detail {

struct Sample {
  double value;
  double weight;
};

/// avg + alpha (vavg - avg) over weighted samples. Summation runs in sorted
/// order, so the result does not depend on input order.
inline float combine(std::vector<Sample>& s, double alpha) {
  if (s.size() == 1) return static_cast<float>(s[0].value);
  bool same = true;
  for (const auto& x : s) same = same && x.value == s[0].value;
  if (same) return static_cast<float>(s[0].value);
  std::sort(s.begin(), s.end(), [](const Sample& a, const Sample& b) {
    return a.value != b.value ? a.value < b.value : a.weight < b.weight;
  });
  double wsum = 0.0, sum = 0.0, num = 0.0, den = 0.0;
  for (const auto& x : s) {
    wsum += x.weight;
    sum += x.weight * x.value;
    num += x.weight * std::abs(x.value) * x.value;
    den += x.weight * std::abs(x.value);
  }
  const double avg = sum / wsum;
  const double va = den == 0.0 ? 0.0 : num / den;
  return static_cast<float>(avg + alpha * (va - avg));
}

}  // namespace detail

/// Per-pixel blend weight: 0 outside the mask, 0.5 on its boundary (a defined
/// pixel with an undefined 4-neighbour inside the raster), 1 elsewhere.
inline std::vector<double> feather_weights(const Mask& m, bool feather) {
  std::vector<double> w(m.width() * m.height(), 0.0);
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x) {
      if (!m(x, y)) continue;
      bool edge = false;
      if (feather) {
        edge = (x > 0 && !m(x - 1, y)) || (x + 1 < m.width() && !m(x + 1, y)) || (y > 0 && !m(x, y - 1)) ||
               (y + 1 < m.height() && !m(x, y + 1));
      }
      w[y * m.width() + x] = edge ? 0.5 : 1.0;
    }
  return w;
}

/// Masked Laplacian pyramid blending. Uncovered pixels get zero detail; the
/// coarsest level must be covered everywhere.
inline Pyramid blend_pyramids(std::span<const MaskedPyramid> pyramids, const BlendOptions& opts = {}) {
  if (pyramids.empty()) throw SizeError("blend needs at least one pyramid");
  const MaskedPyramid& first = pyramids.front();
  const std::size_t depth = first.depth();
  if (depth == 0) throw DepthError("empty pyramid");
  for (const auto& p : pyramids) {
    if (p.depth() != depth || p.masks.size() != depth) throw SizeError("pyramids disagree on depth");
    for (std::size_t l = 0; l < depth; ++l) {
      if (!p.levels[l].same_shape(first.levels[l]) || p.masks[l].extent() != first.levels[l].extent())
        throw SizeError("pyramids disagree on level " + std::to_string(l) + " shape");
    }
  }

  Pyramid out{PyramidKind::laplacian, {}};
  std::vector<detail::Sample> samples;
  samples.reserve(pyramids.size());
  for (std::size_t l = 0; l < depth; ++l) {
    const Image& ref = first.levels[l];
    std::vector<std::vector<double>> weights;
    for (const auto& p : pyramids) weights.push_back(feather_weights(p.masks[l], opts.feather));
    Image level(ref.extent(), ref.channels(), 0.f);
    for (std::size_t y = 0; y < ref.height(); ++y)
      for (std::size_t x = 0; x < ref.width(); ++x) {
        const std::size_t i = y * ref.width() + x;
        bool covered = false;
        for (const auto& w : weights) covered = covered || w[i] > 0.0;
        if (!covered) {
          if (l + 1 == depth)
            throw CoverageError("coarsest level pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                                ") is not covered by any view");
          continue;
        }
        for (std::size_t c = 0; c < ref.channels(); ++c) {
          samples.clear();
          for (std::size_t k = 0; k < pyramids.size(); ++k)
            if (weights[k][i] > 0.0) samples.push_back({pyramids[k].levels[l].at(x, y, c), weights[k][i]});
          level.at(x, y, c) = detail::combine(samples, opts.alpha);
        }
      }
    out.levels.push_back(std::move(level));
  }
  return out;
}

/// Single-level masked mean over images with MISSING pixels; pixels with no
/// defined sample become 0.
inline Image blend_images(std::span<const Image> images) {
  if (images.empty()) throw SizeError("blend needs at least one image");
  for (const auto& img : images) require_same_shape(img, images.front(), "blend_images");
  const Image& ref = images.front();
  Image out(ref.extent(), ref.channels(), 0.f);
  std::vector<detail::Sample> samples;
  for (std::size_t y = 0; y < ref.height(); ++y)
    for (std::size_t x = 0; x < ref.width(); ++x)
      for (std::size_t c = 0; c < ref.channels(); ++c) {
        samples.clear();
        for (const auto& img : images)
          if (!img.missing(x, y)) samples.push_back({img.at(x, y, c), 1.0});
        if (!samples.empty()) out.at(x, y, c) = detail::combine(samples, 0.0);
      }
  return out;
}

}  // namespace anamorph
