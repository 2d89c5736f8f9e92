#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <future>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "anamorph/blend.hpp"
#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/uvmap.hpp"
#include "anamorph/warp.hpp"

namespace anamorph {

/// Latent grid. `data` is width x height x channels at 1/scale_factor of the
/// image resolution.
struct LatentTensor {
  Image data;
  int scale_factor = 1;

  std::size_t width() const { return data.width(); }
  std::size_t height() const { return data.height(); }
  std::size_t channels() const { return data.channels(); }
  Extent extent() const { return data.extent(); }
  bool same_shape(const LatentTensor& o) const { return data.same_shape(o.data) && scale_factor == o.scale_factor; }

  friend bool operator==(const LatentTensor&, const LatentTensor&) = default;
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual LatentTensor velocity(const LatentTensor& z, double t, const std::string& prompt_id) = 0;
  /// Whether velocity() may be called from several threads at once.
  virtual bool concurrent() const { return false; }
  /// Backend-provided timestep schedule (t_0 = 0 < ... < t_T = 1), if any.
  virtual std::optional<std::vector<double>> schedule() const { return std::nullopt; }
};

class Vae {
 public:
  virtual ~Vae() = default;
  virtual LatentTensor encode(const Image& x) = 0;
  virtual Image decode(const LatentTensor& z) = 0;
  virtual int scale_factor() const = 0;
  virtual std::size_t latent_channels() const = 0;
};

// ---------------------------------------------------------------------------
// Rectified-flow primitives. t = 0 is noise, t = 1 is data.

namespace detail {

inline void require_same(const LatentTensor& a, const LatentTensor& b, const char* what) {
  if (!a.same_shape(b)) throw SizeError(std::string(what) + ": latent shapes differ");
}

template <class F>
LatentTensor zip(const LatentTensor& a, const LatentTensor& b, F&& f) {
  LatentTensor out = a;
  auto o = out.data.samples();
  auto bs = b.data.samples();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(o[i], bs[i]);
  return out;
}

}  // namespace detail

/// Clean estimate z + u (1 - t).
inline LatentTensor predict_clean(const LatentTensor& z, double t, const LatentTensor& u) {
  if (!(t >= 0.0 && t < 1.0)) throw TimeError("predict_clean needs 0 <= t < 1, got " + std::to_string(t));
  detail::require_same(z, u, "predict_clean");
  const double h = 1.0 - t;
  return detail::zip(z, u, [h](float zv, float uv) { return static_cast<float>(zv + uv * h); });
}

/// Classifier-free guidance (1 + w) cond - w uncond, evaluated as
/// cond + w (cond - uncond) so that equal branches return cond exactly.
inline LatentTensor cfg_velocity(const LatentTensor& cond, const LatentTensor& uncond, double w) {
  detail::require_same(cond, uncond, "cfg_velocity");
  if (w == 0.0) return cond;
  return detail::zip(cond, uncond, [w](float c, float u) { return static_cast<float>(c + w * (c - u)); });
}

/// Euler step from t to t_next along the velocity implied by the clean estimate.
inline LatentTensor denoising_step(const LatentTensor& z_clean, const LatentTensor& z_t, double t, double t_next) {
  if (!(t >= 0.0 && t < t_next && t_next <= 1.0))
    throw TimeError("denoising_step needs 0 <= t < t_next <= 1, got " + std::to_string(t) + " -> " +
                    std::to_string(t_next));
  detail::require_same(z_clean, z_t, "denoising_step");
  const double c = (t_next - t) / (1.0 - t);
  if (c == 1.0) return z_clean;
  return detail::zip(z_t, z_clean, [c](float z, float zh) { return static_cast<float>(z + (zh - z) * c); });
}

/// Standard-normal latent of the given shape.
inline LatentTensor gaussian_latent(Extent e, std::size_t channels, int scale_factor, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  LatentTensor z{Image(e, channels), scale_factor};
  for (auto& s : z.data.samples()) s = static_cast<float>(normal(rng));
  return z;
}

/// Re-enters the straight noise-to-data path at t: (1 - t) eps + t z_clean.
inline LatentTensor renoise(const LatentTensor& z_clean, double t, std::mt19937_64& rng) {
  if (!(t >= 0.0 && t < 1.0)) throw TimeError("renoise needs 0 <= t < 1, got " + std::to_string(t));
  LatentTensor eps = gaussian_latent(z_clean.extent(), z_clean.channels(), z_clean.scale_factor, rng);
  return detail::zip(eps, z_clean,
                     [t](float e, float zc) { return static_cast<float>((1.0 - t) * e + t * zc); });
}

/// Uniform schedule k / steps, k = 0..steps.
inline std::vector<double> uniform_schedule(std::size_t steps) {
  if (steps == 0) throw TimeError("need at least one step");
  std::vector<double> ts(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) ts[k] = static_cast<double>(k) / static_cast<double>(steps);
  return ts;
}

inline void validate_schedule(std::span<const double> ts) {
  if (ts.size() < 2 || ts.front() != 0.0 || ts.back() != 1.0)
    throw TimeError("schedule must run from 0 to 1 with at least one step");
  for (std::size_t k = 1; k < ts.size(); ++k)
    if (!(ts[k] > ts[k - 1])) throw TimeError("schedule must be strictly increasing");
}

// ---------------------------------------------------------------------------
// Views and aggregation.

struct ViewSpec {
  UvMap map;
  std::string prompt;
  std::string negative_prompt;
};

/// Per-view data the loop needs, derived once from the maps.
struct PreparedView {
  UvMap map;
  LodMap lod;
  UvMap latent_map;
  std::string prompt;
  std::string negative_prompt;
  bool identity = false;
};

struct ViewBundle {
  std::vector<PreparedView> views;
  Extent image;             ///< view resolution, shared by all views
  Extent canonical;         ///< canonical image resolution
  std::size_t depth = 0;    ///< pyramid depth used for warping
  int scale_factor = 1;

  Extent latent() const {
    return {image.width / static_cast<std::size_t>(scale_factor), image.height / static_cast<std::size_t>(scale_factor)};
  }
  Extent canonical_latent() const {
    return {canonical.width / static_cast<std::size_t>(scale_factor),
            canonical.height / static_cast<std::size_t>(scale_factor)};
  }
};

/// Checks shapes and precomputes LOD and latent-resolution maps. A zero
/// canonical extent means "same as the views"; depth 0 picks the default.
inline ViewBundle prepare_views(std::vector<ViewSpec> specs, int scale_factor, Extent canonical = {},
                                std::size_t depth = 0) {
  if (specs.empty()) throw SizeError("need at least one view");
  if (scale_factor < 1) throw SizeError("scale factor must be positive");
  ViewBundle b;
  b.image = specs.front().map.extent();
  b.canonical = canonical.width == 0 ? b.image : canonical;
  b.depth = depth == 0 ? default_depth(b.canonical) : depth;
  b.scale_factor = scale_factor;
  check_depth(b.canonical, b.depth);
  const auto sf = static_cast<std::size_t>(scale_factor);
  if (b.canonical.width % sf || b.canonical.height % sf)
    throw SizeError("canonical size " + to_string(b.canonical) + " is not a multiple of the scale factor");
  for (auto& s : specs) {
    if (s.map.extent() != b.image) throw SizeError("all views must share one resolution");
    PreparedView v;
    v.lod = compute_lod(s.map, b.canonical);
    v.latent_map = downscale_uvmap(s.map, sf);
    v.identity = is_identity_view(s.map, v.lod, b.canonical);
    v.map = std::move(s.map);
    v.prompt = std::move(s.prompt);
    v.negative_prompt = std::move(s.negative_prompt);
    b.views.push_back(std::move(v));
  }
  return b;
}

struct AggregateOptions {
  BlendOptions blend;
  SampleMode mode = SampleMode::nearest;
  /// A lone identity view aggregates to itself; return the inputs untouched
  /// instead of running them through the pyramid arithmetic.
  bool identity_shortcut = true;
  std::size_t threads = 1;
};

struct Aggregated {
  std::vector<LatentTensor> latents;
  std::vector<LatentTensor> residuals;  ///< z - encode(decode(z)) per view
};

/// Decode every clean latent, merge the views in canonical image space, and
/// map the merged image back into each view; the VAE reconstruction residual
/// travels separately at latent resolution.
inline Aggregated aggregate_views(std::span<const LatentTensor> clean, const ViewBundle& bundle, Vae& vae,
                                  const AggregateOptions& opts = {}) {
  const std::size_t n = clean.size();
  if (n == 0 || n != bundle.views.size()) throw SizeError("one clean latent per view expected");
  for (const auto& z : clean) detail::require_same(z, clean.front(), "aggregate_views");

  std::vector<Image> decoded;
  Aggregated out;
  for (const auto& z : clean) {
    decoded.push_back(vae.decode(z));
    const LatentTensor e = vae.encode(decoded.back());
    detail::require_same(e, z, "vae round trip");
    out.residuals.push_back(detail::zip(z, e, [](float a, float b) { return a - b; }));
  }

  if (opts.identity_shortcut && n == 1 && bundle.views[0].identity) {
    out.latents.assign(clean.begin(), clean.end());
    return out;
  }

  std::vector<MaskedPyramid> pyramids;
  for (std::size_t i = 0; i < n; ++i) {
    if (decoded[i].extent() != bundle.image) throw SizeError("decoded image does not match the view resolution");
    const auto& v = bundle.views[i];
    pyramids.push_back(inverse_warp(decoded[i], v.map, v.lod, bundle.depth, bundle.canonical));
  }
  const Image merged = reconstruct(blend_pyramids(pyramids, opts.blend));
  const Pyramid gaussian = build_gaussian(merged, bundle.depth);

  std::vector<Image> carried;
  for (std::size_t i = 0; i < n; ++i)
    carried.push_back(transport_nearest(out.residuals[i].data, bundle.views[i].latent_map, bundle.canonical_latent()));
  const Image merged_residual = blend_images(carried);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = bundle.views[i];
    Image view = forward_warp(gaussian, v.map, v.lod, opts.mode, opts.threads);
    // Pixels the view cannot see keep their own content.
    for (std::size_t y = 0; y < view.height(); ++y)
      for (std::size_t x = 0; x < view.width(); ++x)
        if (view.missing(x, y)) {
          const auto src = decoded[i].pixel(x, y);
          std::copy(src.begin(), src.end(), view.pixel(x, y).begin());
        }
    LatentTensor e = vae.encode(view);
    detail::require_same(e, clean[i], "vae encode");
    Image r = sample_nearest(merged_residual, v.latent_map);
    for (std::size_t y = 0; y < r.height(); ++y)
      for (std::size_t x = 0; x < r.width(); ++x)
        if (r.missing(x, y)) {
          const auto src = out.residuals[i].data.pixel(x, y);
          std::copy(src.begin(), src.end(), r.pixel(x, y).begin());
        }
    auto es = e.data.samples();
    const auto rs = r.samples();
    for (std::size_t k = 0; k < es.size(); ++k) es[k] += rs[k];
    out.latents.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// The sampling loop.

enum class RenoiseMode {
  sample,  ///< fresh noise from the run's rng
  replay,  ///< restart the repeat from the same latent; no randomness
};

struct SyncConfig {
  std::size_t steps = 30;
  double cfg_scale = 0.0;
  double alpha = 0.375;
  bool feather = true;
  double time_travel_start = 0.2;
  double time_travel_end = 0.8;
  std::size_t time_travel_repeats = 1;
  RenoiseMode renoise_mode = RenoiseMode::sample;
  std::optional<std::size_t> priority_view;
  double priority_frac = 0.2;
  std::uint64_t seed = 0;
  SampleMode mode = SampleMode::nearest;
  bool identity_shortcut = true;
  std::size_t threads = 1;

  void validate() const {
    if (steps == 0) throw TimeError("steps must be positive");
    if (!(cfg_scale >= 0.0)) throw TimeError("cfg_scale must be non-negative");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw RangeError("alpha must be in [0, 1]");
    if (!(time_travel_start >= 0.0 && time_travel_start < time_travel_end && time_travel_end <= 1.0))
      throw TimeError("time travel window needs 0 <= start < end <= 1");
    if (time_travel_repeats < 1) throw TimeError("time travel repeats must be at least 1");
    if (!(priority_frac >= 0.0 && priority_frac < 1.0)) throw TimeError("priority fraction must be in [0, 1)");
  }
};

struct StepEvent {
  std::size_t step = 0;
  std::size_t repeat = 0;
  double t = 0.0;
  double t_next = 0.0;
  double seconds = 0.0;
  std::vector<double> residual_max_abs;  ///< per view; empty while only the priority view runs
  bool prioritized = false;
};

struct SyncResult {
  std::vector<Image> images;
  std::vector<LatentTensor> latents;
  std::vector<StepEvent> events;
  std::vector<double> schedule;
};

/// Seeded initial noise, one latent per view, drawn in view order.
inline std::vector<LatentTensor> initial_latents(std::size_t views, Extent latent, std::size_t channels,
                                                 int scale_factor, std::mt19937_64& rng) {
  std::vector<LatentTensor> z;
  for (std::size_t i = 0; i < views; ++i) z.push_back(gaussian_latent(latent, channels, scale_factor, rng));
  return z;
}

/// Guided velocity for one view.
inline LatentTensor guided_velocity(Denoiser& d, const LatentTensor& z, double t, const PreparedView& v, double w) {
  LatentTensor cond = d.velocity(z, t, v.prompt);
  detail::require_same(cond, z, "denoiser output");
  if (w == 0.0) return cond;
  LatentTensor uncond = d.velocity(z, t, v.negative_prompt);
  detail::require_same(uncond, z, "denoiser output");
  return cfg_velocity(cond, uncond, w);
}

inline std::size_t priority_steps(const SyncConfig& cfg, std::size_t steps) {
  if (!cfg.priority_view) return 0;
  return static_cast<std::size_t>(std::llround(cfg.priority_frac * static_cast<double>(steps)));
}

/// Multi-view synchronized sampling. Every step each view predicts its clean
/// latent, the estimates are merged across views, and each view takes an
/// Euler step toward its merged estimate. Steps inside the time-travel
/// window repeat, re-noising the merged estimate back to the step's time in
/// between. In the final priority fraction only the priority view keeps
/// sampling; the others hold their last merged clean estimate.
inline SyncResult run_synchronized_sampling(const ViewBundle& bundle, Denoiser& denoiser, Vae& vae,
                                            const SyncConfig& cfg,
                                            const std::function<void(const StepEvent&)>& on_step = {}) {
  cfg.validate();
  if (vae.scale_factor() != bundle.scale_factor) throw SizeError("bundle was prepared for another scale factor");
  const std::size_t n = bundle.views.size();
  if (cfg.priority_view && *cfg.priority_view >= n) throw SizeError("priority view index out of range");

  SyncResult result;
  result.schedule = denoiser.schedule().value_or(uniform_schedule(cfg.steps));
  validate_schedule(result.schedule);
  const auto& ts = result.schedule;
  const std::size_t steps = ts.size() - 1;
  const std::size_t focus_from = steps - priority_steps(cfg, steps);

  std::mt19937_64 rng(cfg.seed);
  std::vector<LatentTensor> z = initial_latents(n, bundle.latent(), vae.latent_channels(), vae.scale_factor(), rng);
  const AggregateOptions agg{{cfg.alpha, cfg.feather}, cfg.mode, cfg.identity_shortcut, cfg.threads};

  auto velocities = [&](const std::vector<std::size_t>& active, const std::vector<LatentTensor>& zs, double t) {
    std::vector<LatentTensor> u(active.size());
    if (denoiser.concurrent() && active.size() > 1) {
      std::vector<std::future<LatentTensor>> jobs;
      for (std::size_t k = 0; k < active.size(); ++k)
        jobs.push_back(std::async(std::launch::async, [&, k] {
          return guided_velocity(denoiser, zs[active[k]], t, bundle.views[active[k]], cfg.cfg_scale);
        }));
      for (std::size_t k = 0; k < active.size(); ++k) u[k] = jobs[k].get();
    } else {
      for (std::size_t k = 0; k < active.size(); ++k)
        u[k] = guided_velocity(denoiser, zs[active[k]], t, bundle.views[active[k]], cfg.cfg_scale);
    }
    return u;
  };

  std::vector<LatentTensor> last_clean = z;
  bool frozen = false;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = ts[k], t_next = ts[k + 1];
    const bool focus = k >= focus_from;
    if (focus && !frozen) {
      for (std::size_t i = 0; i < n; ++i)
        if (i != *cfg.priority_view) z[i] = last_clean[i];
      frozen = true;
    }
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i)
      if (!focus || i == *cfg.priority_view) active.push_back(i);

    const bool travel = t >= cfg.time_travel_start && t < cfg.time_travel_end;
    const std::size_t repeats = travel ? cfg.time_travel_repeats : 1;
    const std::vector<LatentTensor> z_start = z;
    std::vector<LatentTensor> z_next = z;
    std::vector<LatentTensor> clean;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<LatentTensor> z_cur = z_start;
      if (r > 0 && cfg.renoise_mode == RenoiseMode::sample)
        for (auto i : active) z_cur[i] = renoise(clean[i], t, rng);

      const auto u = velocities(active, z_cur, t);
      clean = z_cur;
      for (std::size_t a = 0; a < active.size(); ++a) clean[active[a]] = predict_clean(z_cur[active[a]], t, u[a]);

      StepEvent ev{k, r, t, t_next, 0.0, {}, focus};
      if (!focus) {
        Aggregated merged = aggregate_views(clean, bundle, vae, agg);
        for (const auto& res : merged.residuals) {
          double m = 0.0;
          for (float s : res.data.samples()) m = std::max(m, static_cast<double>(std::abs(s)));
          ev.residual_max_abs.push_back(m);
        }
        clean = std::move(merged.latents);
        last_clean = clean;
      }
      for (auto i : active) z_next[i] = denoising_step(clean[i], z_cur[i], t, t_next);
      ev.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.events.push_back(ev);
      if (on_step) on_step(ev);
    }
    z = std::move(z_next);
  }

  for (const auto& zi : z) result.images.push_back(vae.decode(zi));
  result.latents = std::move(z);
  return result;
}

/// Reference sampler for one view with no aggregation: plain guided Euler
/// from the same seeded noise.
inline LatentTensor plain_euler(Denoiser& denoiser, const PreparedView& view, Extent latent, std::size_t channels,
                                int scale_factor, const SyncConfig& cfg) {
  std::vector<double> ts = denoiser.schedule().value_or(uniform_schedule(cfg.steps));
  validate_schedule(ts);
  std::mt19937_64 rng(cfg.seed);
  LatentTensor z = gaussian_latent(latent, channels, scale_factor, rng);
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const LatentTensor u = guided_velocity(denoiser, z, ts[k], view, cfg.cfg_scale);
    z = denoising_step(predict_clean(z, ts[k], u), z, ts[k], ts[k + 1]);
  }
  return z;
}

}  // namespace anamorph
