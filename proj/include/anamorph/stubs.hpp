#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/sync.hpp"

// Model-free backends for exercising the sampling loop.

namespace anamorph {

class IdentityVae : public Vae {
 public:
  explicit IdentityVae(std::size_t channels = 3) : channels_(channels) {}
  LatentTensor encode(const Image& x) override { return {x, 1}; }
  Image decode(const LatentTensor& z) override { return z.data; }
  int scale_factor() const override { return 1; }
  std::size_t latent_channels() const override { return channels_; }

 private:
  std::size_t channels_;
};

/// Encode: k x k block mean. Decode: pixel-center bilinear upsampling by k.
/// Constants survive a round trip; fine detail does not.
class LossyVae : public Vae {
 public:
  explicit LossyVae(int k, std::size_t channels = 3) : k_(k), channels_(channels) {
    if (k < 1) throw SizeError("lossy VAE factor must be positive");
  }

  LatentTensor encode(const Image& x) override {
    const auto k = static_cast<std::size_t>(k_);
    if (x.width() % k || x.height() % k)
      throw SizeError("image " + to_string(x.extent()) + " is not a multiple of " + std::to_string(k_));
    Image z(x.width() / k, x.height() / k, x.channels());
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t y = 0; y < z.height(); ++y)
      for (std::size_t xx = 0; xx < z.width(); ++xx)
        for (std::size_t c = 0; c < z.channels(); ++c) {
          double s = 0.0;
          for (std::size_t dy = 0; dy < k; ++dy)
            for (std::size_t dx = 0; dx < k; ++dx) s += x.at(xx * k + dx, y * k + dy, c);
          z.at(xx, y, c) = static_cast<float>(s * inv);
        }
    return {std::move(z), k_};
  }

  Image decode(const LatentTensor& z) override {
    const auto k = static_cast<std::size_t>(k_);
    const Image& src = z.data;
    Image out(src.width() * k, src.height() * k, src.channels());
    auto tap = [&](std::size_t i, std::size_t n) {
      const double s = std::clamp((static_cast<double>(i) + 0.5) / static_cast<double>(k) - 0.5, 0.0,
                                  static_cast<double>(n - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      return std::pair{lo, s - static_cast<double>(lo)};
    };
    for (std::size_t y = 0; y < out.height(); ++y) {
      const auto [y0, fy] = tap(y, src.height());
      const std::size_t y1 = std::min(y0 + 1, src.height() - 1);
      for (std::size_t x = 0; x < out.width(); ++x) {
        const auto [x0, fx] = tap(x, src.width());
        const std::size_t x1 = std::min(x0 + 1, src.width() - 1);
        for (std::size_t c = 0; c < out.channels(); ++c) {
          const double a = src.at(x0, y0, c), b = src.at(x1, y0, c);
          const double d = src.at(x0, y1, c), e = src.at(x1, y1, c);
          const double top = a + fx * (b - a), bot = d + fx * (e - d);
          out.at(x, y, c) = static_cast<float>(top + fy * (bot - top));
        }
      }
    }
    return out;
  }

  int scale_factor() const override { return k_; }
  std::size_t latent_channels() const override { return channels_; }

 private:
  int k_;
  std::size_t channels_;
};

namespace detail {

inline double velocity_horizon(double t) { return 1.0 - std::min(t, 0.999); }

}  // namespace detail

/// Straight-line flow toward a fixed latent per prompt: (A - z) / (1 - t),
/// with t clipped at 0.999.
class TargetDenoiser : public Denoiser {
 public:
  TargetDenoiser() = default;
  explicit TargetDenoiser(std::map<std::string, LatentTensor> targets) : targets_(std::move(targets)) {}

  void add(const std::string& prompt, LatentTensor target) { targets_[prompt] = std::move(target); }

  LatentTensor velocity(const LatentTensor& z, double t, const std::string& prompt) override {
    auto it = targets_.find(prompt);
    if (it == targets_.end()) throw BackendError("no target registered for prompt '" + prompt + "'");
    detail::require_same(it->second, z, "target denoiser");
    const double h = detail::velocity_horizon(t);
    return detail::zip(it->second, z, [h](float a, float zv) { return static_cast<float>((a - zv) / h); });
  }

  bool concurrent() const override { return true; }

 private:
  std::map<std::string, LatentTensor> targets_;
};

/// Velocity toward a blurred copy of the current latent.
class BlurDenoiser : public Denoiser {
 public:
  LatentTensor velocity(const LatentTensor& z, double t, const std::string&) override {
    const double h = detail::velocity_horizon(t);
    const LatentTensor b{blur(z.data), z.scale_factor};
    return detail::zip(b, z, [h](float bv, float zv) { return static_cast<float>((bv - zv) / h); });
  }
  bool concurrent() const override { return true; }
};

/// Irregular but deterministic velocity: a hash of (seed, prompt, t, sample
/// index) mixed with the latent itself.
class NoiseDenoiser : public Denoiser {
 public:
  explicit NoiseDenoiser(std::uint64_t seed = 0) : seed_(seed) {}

  LatentTensor velocity(const LatentTensor& z, double t, const std::string& prompt) override {
    std::uint64_t base = mix(seed_ ^ std::bit_cast<std::uint64_t>(t));
    for (unsigned char ch : prompt) base = mix(base ^ ch);
    LatentTensor out = z;
    auto s = out.data.samples();
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double r = static_cast<double>(mix(base + i) >> 11) * 0x1.0p-53;  // [0, 1)
      s[i] = static_cast<float>(2.0 * r - 1.0 - 0.5 * s[i]);
    }
    return out;
  }
  bool concurrent() const override { return true; }

 private:
  static std::uint64_t mix(std::uint64_t x) {  // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }
  std::uint64_t seed_;
};

}  // namespace anamorph
