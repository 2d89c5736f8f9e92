#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <thread>

#include "anamorph/stubs.hpp"
#include "anamorph/sync.hpp"
#include "anamorph/views.hpp"
#include "support.hpp"

using namespace anamorph;
using testing_support::Gen;
using testing_support::max_abs;

namespace {

LatentTensor random_latent(Gen& g, std::size_t w, std::size_t h, std::size_t c = 3) { return {g.image(w, h, c), 1}; }

LatentTensor constant_latent(std::size_t w, std::size_t h, float v, std::size_t c = 3) { return {Image(w, h, c, v), 1}; }

ViewBundle identity_views(std::size_t n, std::size_t views, int sf = 1, std::vector<std::string> prompts = {}) {
  std::vector<ViewSpec> specs;
  for (std::size_t i = 0; i < views; ++i)
    specs.push_back({UvMap::identity(n, n), i < prompts.size() ? prompts[i] : "p" + std::to_string(i), ""});
  return prepare_views(std::move(specs), sf);
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives

TEST(FlowPrimitives, PredictClean) {
  Gen g(71);
  const LatentTensor z0 = random_latent(g, 4, 4), z1 = random_latent(g, 4, 4);
  const LatentTensor u = detail::zip(z1, z0, [](float a, float b) { return a - b; });
  const LatentTensor r = predict_clean(z0, 0.0, u);
  EXPECT_LE(max_abs(r.data, z1.data), 1e-6);
  EXPECT_EQ(predict_clean(z0, 0.3, constant_latent(4, 4, 0.f)), z0);
  const LatentTensor q = predict_clean(z0, 0.25, z1);
  for (std::size_t i = 0; i < q.data.samples().size(); ++i)
    EXPECT_EQ(q.data.samples()[i], static_cast<float>(z0.data.samples()[i] + 0.75 * z1.data.samples()[i]));
  EXPECT_THROW(predict_clean(z0, 1.0, u), TimeError);
  EXPECT_THROW(predict_clean(z0, 0.5, random_latent(g, 3, 4)), SizeError);
}

TEST(FlowPrimitives, Guidance) {
  Gen g(72);
  const LatentTensor c = random_latent(g, 3, 3), u = random_latent(g, 3, 3);
  EXPECT_EQ(cfg_velocity(c, u, 0.0), c);
  for (double w : {0.5, 3.0, 7.5}) EXPECT_EQ(cfg_velocity(c, c, w), c);
  const LatentTensor r = cfg_velocity(constant_latent(2, 2, 1.f), constant_latent(2, 2, 0.5f), 2.0);
  for (float s : r.data.samples()) EXPECT_EQ(s, 2.f);
  EXPECT_THROW(cfg_velocity(c, random_latent(g, 2, 3), 1.0), SizeError);
}

TEST(FlowPrimitives, DenoisingStep) {
  Gen g(73);
  const LatentTensor zh = random_latent(g, 4, 4), z = random_latent(g, 4, 4);
  EXPECT_EQ(denoising_step(zh, z, 0.4, 1.0), zh);
  EXPECT_EQ(denoising_step(z, z, 0.1, 0.2), z);
  const LatentTensor mid = denoising_step(zh, z, 0.5, 0.75);
  for (std::size_t i = 0; i < mid.data.samples().size(); ++i)
    EXPECT_NEAR(mid.data.samples()[i], 0.5 * (z.data.samples()[i] + zh.data.samples()[i]), 1e-6);
  EXPECT_THROW(denoising_step(zh, z, 0.5, 0.5), TimeError);
  EXPECT_THROW(denoising_step(zh, z, 0.6, 0.5), TimeError);
  EXPECT_THROW(denoising_step(zh, z, -0.1, 0.5), TimeError);
  EXPECT_THROW(denoising_step(zh, z, 0.5, 1.1), TimeError);
}

TEST(FlowPrimitives, CleanEstimateAndVelocityAreInverse) {
  Gen g(74);
  for (int i = 0; i < 50; ++i) {
    const double t = g.real(0.0, 0.95);
    const LatentTensor z = random_latent(g, 5, 5), zh = random_latent(g, 5, 5);
    const LatentTensor u = detail::zip(zh, z, [t](float a, float b) { return static_cast<float>((a - b) / (1 - t)); });
    EXPECT_LE(max_abs(predict_clean(z, t, u).data, zh.data), 1e-6 / (1 - t) * 10);
  }
}

TEST(FlowPrimitives, RenoiseStatistics) {
  std::mt19937_64 rng(5);
  const LatentTensor zh = constant_latent(8, 8, 0.7f, 1);
  const LatentTensor near_one = renoise(zh, 1.0 - 1e-9, rng);
  EXPECT_LE(max_abs(near_one.data, zh.data), 1e-6);
  EXPECT_THROW(renoise(zh, 1.0, rng), TimeError);

  // t = 0: pure noise, mean within 4 / sqrt(N).
  const LatentTensor big = constant_latent(256, 256, 0.9f, 1);
  const LatentTensor noise = renoise(big, 0.0, rng);
  double mean = 0;
  for (float s : noise.data.samples()) mean += s;
  mean /= noise.data.samples().size();
  EXPECT_LT(std::abs(mean), 4.0 / 256.0);

  // Variance (1 - t)^2 + t^2 var(zh) against a synthetic zh with known variance.
  Gen g(75);
  LatentTensor synth{Image(400, 250, 1), 1};  // 1e5 samples
  for (auto& s : synth.data.samples()) s = static_cast<float>(g.real(-1.0, 1.0));  // variance 1/3
  const double t = 0.3;
  const LatentTensor r = renoise(synth, t, rng);
  double m = 0, m2 = 0;
  for (float s : r.data.samples()) {
    m += s;
    m2 += double(s) * s;
  }
  const double n = r.data.samples().size();
  const double var = m2 / n - (m / n) * (m / n);
  const double expect = (1 - t) * (1 - t) + t * t / 3.0;
  EXPECT_NEAR(var, expect, 0.01 * expect);
}

TEST(FlowPrimitives, Schedules) {
  const auto ts = uniform_schedule(30);
  ASSERT_EQ(ts.size(), 31u);
  EXPECT_EQ(ts.front(), 0.0);
  EXPECT_EQ(ts.back(), 1.0);
  EXPECT_THROW(uniform_schedule(0), TimeError);
  EXPECT_THROW(validate_schedule(std::vector<double>{0.0, 0.5, 0.4, 1.0}), TimeError);
  EXPECT_THROW(validate_schedule(std::vector<double>{0.1, 1.0}), TimeError);
}

// ---------------------------------------------------------------------------
// Stub backends

TEST(Stubs, IdentityVaeHasNoResidual) {
  Gen g(76);
  IdentityVae vae;
  const LatentTensor z = random_latent(g, 6, 6);
  EXPECT_EQ(vae.encode(vae.decode(z)), z);
}

TEST(Stubs, LossyVaeKeepsConstantsLosesDetail) {
  LossyVae vae(2);
  const LatentTensor c = constant_latent(8, 8, 0.3f);
  const LatentTensor cz{c.data, 2};
  EXPECT_EQ(vae.encode(vae.decode(cz)), cz);
  LatentTensor checker{Image(8, 8, 1), 2};
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) checker.data.at(x, y) = (x + y) % 2 ? 1.f : -1.f;
  const LatentTensor back = vae.encode(vae.decode(checker));
  EXPECT_GT(max_abs(back.data, checker.data), 0.1);
  EXPECT_EQ(vae.decode(cz).extent(), (Extent{16, 16}));
  EXPECT_THROW(vae.encode(Image(5, 4, 3)), SizeError);
}

TEST(Stubs, TargetDenoiserConvergesInThirtySteps) {
  Gen g(77);
  const LatentTensor a = random_latent(g, 6, 6);
  TargetDenoiser d({{"a", a}});
  std::mt19937_64 rng(1);
  LatentTensor z = gaussian_latent({6, 6}, 3, 1, rng);
  const auto ts = uniform_schedule(30);
  for (std::size_t k = 0; k < 30; ++k) z = denoising_step(predict_clean(z, ts[k], d.velocity(z, ts[k], "a")), z, ts[k], ts[k + 1]);
  EXPECT_LE(max_abs(z.data, a.data), 1e-4);
  EXPECT_THROW(d.velocity(z, 0.1, "missing"), BackendError);
}

// ---------------------------------------------------------------------------
// Aggregation

TEST(Aggregate, SingleIdentityViewReturnsItsInput) {
  Gen g(78);
  IdentityVae vae;
  const ViewBundle b = identity_views(16, 1);
  const std::vector<LatentTensor> z{random_latent(g, 16, 16)};
  const Aggregated fast = aggregate_views(z, b, vae);
  EXPECT_EQ(fast.latents[0], z[0]);
  AggregateOptions full;
  full.identity_shortcut = false;
  const Aggregated slow = aggregate_views(z, b, vae, full);
  EXPECT_LE(max_abs(slow.latents[0].data, z[0].data), 1e-5);
}

TEST(Aggregate, IdentityVaeResidualIsExactlyZero) {
  Gen g(79);
  IdentityVae vae;
  const ViewBundle b = identity_views(16, 3);
  const std::vector<LatentTensor> z{random_latent(g, 16, 16), random_latent(g, 16, 16), random_latent(g, 16, 16)};
  const Aggregated out = aggregate_views(z, b, vae);
  for (const auto& r : out.residuals)
    for (float s : r.data.samples()) EXPECT_EQ(s, 0.f);
}

TEST(Aggregate, TwoIdentityViewsAverage) {
  Gen g(80);
  IdentityVae vae;
  const ViewBundle b = identity_views(16, 2);
  for (int i = 0; i < 5; ++i) {
    const std::vector<LatentTensor> z{random_latent(g, 16, 16), random_latent(g, 16, 16)};
    AggregateOptions opts;
    opts.blend.alpha = 0.0;
    const Aggregated out = aggregate_views(z, b, vae, opts);
    Image mean = z[0].data;
    for (std::size_t k = 0; k < mean.samples().size(); ++k)
      mean.samples()[k] = 0.5f * (z[0].data.samples()[k] + z[1].data.samples()[k]);
    EXPECT_LE(max_abs(out.latents[0].data, mean), 1e-5);
    EXPECT_LE(max_abs(out.latents[1].data, mean), 1e-5);
  }
}

TEST(Aggregate, IsIdempotentForIdentityViews) {
  Gen g(81);
  IdentityVae vae;
  const ViewBundle b = identity_views(16, 3);
  const std::vector<LatentTensor> z{random_latent(g, 16, 16), random_latent(g, 16, 16), random_latent(g, 16, 16)};
  AggregateOptions opts;
  opts.blend.alpha = 0.0;
  const Aggregated once = aggregate_views(z, b, vae, opts);
  const Aggregated twice = aggregate_views(once.latents, b, vae, opts);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(max_abs(once.latents[i].data, twice.latents[i].data), 1e-5);
}

TEST(Aggregate, FlipViewsAgreeAfterMerging) {
  // Two views related by a flip: after aggregation, view 1 is view 0 flipped.
  Gen g(82);
  IdentityVae vae;
  const std::size_t n = 16;
  const ViewBundle b = prepare_views({{UvMap::identity(n, n), "a", ""}, {make_2d_map({FlipScene{}}, n), "b", ""}}, 1);
  const std::vector<LatentTensor> z{random_latent(g, n, n), random_latent(g, n, n)};
  const Aggregated out = aggregate_views(z, b, vae);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        EXPECT_EQ(out.latents[1].data.at(x, y, c), out.latents[0].data.at(x, n - 1 - y, c));
}

TEST(Aggregate, LossyVaeCarriesTheResidual) {
  // With a single identity view the merged image is the decoded latent, so
  // encode(decode(z)) + residual must give back z.
  Gen g(83);
  LossyVae vae(2);
  const ViewBundle b = prepare_views({{UvMap::identity(16, 16), "a", ""}}, 2);
  const std::vector<LatentTensor> z{{g.image(8, 8, 3), 2}};
  AggregateOptions opts;
  opts.identity_shortcut = false;
  const Aggregated out = aggregate_views(z, b, vae, opts);
  EXPECT_GT(max_abs(out.residuals[0].data, Image(8, 8, 3)), 1e-3);
  EXPECT_LE(max_abs(out.latents[0].data, z[0].data), 1e-5);
}

TEST(Aggregate, RejectsMismatchedInputs) {
  Gen g(84);
  IdentityVae vae;
  const ViewBundle b = identity_views(8, 2);
  const std::vector<LatentTensor> one{random_latent(g, 8, 8)};
  EXPECT_THROW(aggregate_views(one, b, vae), SizeError);
  const std::vector<LatentTensor> mixed{random_latent(g, 8, 8), random_latent(g, 4, 8)};
  EXPECT_THROW(aggregate_views(mixed, b, vae), SizeError);
}

// ---------------------------------------------------------------------------
// Sampling loop

TEST(Loop, SingleIdentityViewIsPlainEuler) {
  Gen g(85);
  IdentityVae vae;
  const ViewBundle b = identity_views(16, 1, 1, {"a"});
  TargetDenoiser target({{"a", random_latent(g, 16, 16)}});
  BlurDenoiser blur;
  NoiseDenoiser noise(3);
  for (Denoiser* d : std::initializer_list<Denoiser*>{&target, &blur, &noise})
    for (std::uint64_t seed : {0ull, 17ull}) {
      SyncConfig cfg;
      cfg.seed = seed;
      const SyncResult r = run_synchronized_sampling(b, *d, vae, cfg);
      EXPECT_EQ(r.latents[0], plain_euler(*d, b.views[0], {16, 16}, 3, 1, cfg));
      EXPECT_EQ(r.events.size(), 30u);
    }
}

TEST(Loop, GuidanceUsesTheNegativePrompt) {
  Gen g(86);
  IdentityVae vae;
  const ViewBundle b = prepare_views({{UvMap::identity(8, 8), "a", "neg"}}, 1);
  TargetDenoiser d({{"a", random_latent(g, 8, 8)}, {"neg", random_latent(g, 8, 8)}});
  SyncConfig cfg;
  cfg.cfg_scale = 2.0;
  cfg.steps = 10;
  const SyncResult r = run_synchronized_sampling(b, d, vae, cfg);
  EXPECT_EQ(r.latents[0], plain_euler(d, b.views[0], {8, 8}, 3, 1, cfg));
  cfg.cfg_scale = 0.0;
  EXPECT_NE(run_synchronized_sampling(b, d, vae, cfg).latents[0], r.latents[0]);
}

TEST(Loop, ResidualsVanishWithIdentityVae) {
  Gen g(87);
  IdentityVae vae;
  const ViewBundle b = prepare_views({{UvMap::identity(16, 16), "a", ""}, {make_2d_map({FlipScene{}}, 16), "b", ""}}, 1);
  TargetDenoiser d({{"a", random_latent(g, 16, 16)}, {"b", random_latent(g, 16, 16)}});
  SyncConfig cfg;
  std::size_t seen = 0;
  run_synchronized_sampling(b, d, vae, cfg, [&](const StepEvent& e) {
    ASSERT_EQ(e.residual_max_abs.size(), 2u);
    for (double r : e.residual_max_abs) EXPECT_EQ(r, 0.0);
    ++seen;
  });
  EXPECT_EQ(seen, 30u);
}

TEST(Loop, TwoTargetsMeetInTheMiddle) {
  Gen g(88);
  IdentityVae vae;
  const LatentTensor a = random_latent(g, 16, 16), bt = random_latent(g, 16, 16);
  const ViewBundle b = identity_views(16, 2, 1, {"a", "b"});
  TargetDenoiser d({{"a", a}, {"b", bt}});
  SyncConfig cfg;
  cfg.alpha = 0.0;
  const SyncResult r = run_synchronized_sampling(b, d, vae, cfg);
  Image mean = a.data;
  for (std::size_t k = 0; k < mean.samples().size(); ++k)
    mean.samples()[k] = 0.5f * (a.data.samples()[k] + bt.data.samples()[k]);
  for (const auto& img : r.images) EXPECT_LE(max_abs(img, mean), 1e-3);
}

TEST(Loop, ReplayedRepeatsAreIdempotent) {
  Gen g(89);
  IdentityVae vae;
  const ViewBundle b = prepare_views({{UvMap::identity(16, 16), "a", ""}, {make_2d_map({FlipScene{}}, 16), "b", ""}}, 1);
  NoiseDenoiser d(9);
  SyncConfig cfg;
  cfg.steps = 10;
  const SyncResult once = run_synchronized_sampling(b, d, vae, cfg);
  cfg.time_travel_repeats = 3;
  cfg.renoise_mode = RenoiseMode::replay;
  const SyncResult replayed = run_synchronized_sampling(b, d, vae, cfg);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(replayed.latents[i], once.latents[i]);
  // Steps with t in [0.2, 0.8) of a 10-step schedule: 2..7, each repeated 3 times.
  EXPECT_EQ(replayed.events.size(), 10u + 6u * 2u);

  cfg.renoise_mode = RenoiseMode::sample;
  const SyncResult travelled = run_synchronized_sampling(b, d, vae, cfg);
  EXPECT_NE(travelled.latents[0], once.latents[0]);
  EXPECT_EQ(run_synchronized_sampling(b, d, vae, cfg).latents[0], travelled.latents[0]);
}

TEST(Loop, PriorityViewFinishesAlone) {
  Gen g(90);
  IdentityVae vae;
  const LatentTensor a = random_latent(g, 8, 8), bt = random_latent(g, 8, 8);
  const ViewBundle b = identity_views(8, 2, 1, {"a", "b"});
  TargetDenoiser d({{"a", a}, {"b", bt}});
  SyncConfig cfg;
  cfg.alpha = 0.0;
  cfg.priority_view = 0;
  cfg.priority_frac = 0.2;
  const SyncResult r = run_synchronized_sampling(b, d, vae, cfg);
  std::size_t focused = 0;
  for (const auto& e : r.events) {
    focused += e.prioritized;
    if (e.prioritized) EXPECT_TRUE(e.residual_max_abs.empty());
  }
  EXPECT_EQ(focused, 6u);
  // The priority view ends on its own target; the other keeps the last merged estimate.
  EXPECT_LE(max_abs(r.images[0], a.data), 1e-4);
  Image mean = a.data;
  for (std::size_t k = 0; k < mean.samples().size(); ++k)
    mean.samples()[k] = 0.5f * (a.data.samples()[k] + bt.data.samples()[k]);
  EXPECT_LE(max_abs(r.images[1], mean), 1e-4);
  cfg.priority_view = 2;
  EXPECT_THROW(run_synchronized_sampling(b, d, vae, cfg), SizeError);
}

TEST(Loop, DeterministicAcrossRunsAndThreads) {
  IdentityVae vae;
  const ViewBundle b = prepare_views({{make_2d_map({RotateScene{90.0, {}}}, 16), "a", ""},
                                      {make_2d_map({FlipScene{}}, 16), "b", ""}}, 1);
  NoiseDenoiser d(4);
  SyncConfig cfg;
  cfg.steps = 8;
  cfg.seed = 99;
  const SyncResult r1 = run_synchronized_sampling(b, d, vae, cfg);
  cfg.threads = 4;
  const SyncResult r2 = run_synchronized_sampling(b, d, vae, cfg);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(r1.images[i], r2.images[i]);
  cfg.seed = 100;
  EXPECT_NE(run_synchronized_sampling(b, d, vae, cfg).images[0], r1.images[0]);
}

namespace {

/// Serial backend that records overlapping calls.
class SerialProbe : public Denoiser {
 public:
  LatentTensor velocity(const LatentTensor& z, double, const std::string&) override {
    const int now = ++active_;
    max_active_ = std::max(max_active_.load(), now);
    std::this_thread::sleep_for(std::chrono::microseconds(200));
    --active_;
    return LatentTensor{Image(z.extent(), z.channels(), 0.f), z.scale_factor};
  }
  std::optional<std::vector<double>> schedule() const override { return std::vector<double>{0.0, 0.5, 0.9, 1.0}; }
  std::atomic<int> active_{0};
  std::atomic<int> max_active_{0};
};

}  // namespace

TEST(Loop, HonoursSerialBackendsAndTheirSchedule) {
  IdentityVae vae;
  const ViewBundle b = identity_views(8, 3);
  SerialProbe d;
  const SyncResult r = run_synchronized_sampling(b, d, vae, SyncConfig{});
  EXPECT_EQ(d.max_active_.load(), 1);
  EXPECT_EQ(r.schedule, (std::vector<double>{0.0, 0.5, 0.9, 1.0}));
  EXPECT_EQ(r.events.size(), 3u);
}

TEST(Loop, ConfigValidation) {
  SyncConfig cfg;
  cfg.time_travel_start = 0.8;
  cfg.time_travel_end = 0.2;
  EXPECT_THROW(cfg.validate(), TimeError);
  cfg = {};
  cfg.time_travel_repeats = 0;
  EXPECT_THROW(cfg.validate(), TimeError);
  cfg = {};
  cfg.priority_frac = 1.0;
  EXPECT_THROW(cfg.validate(), TimeError);
  cfg = {};
  cfg.alpha = 1.5;
  EXPECT_THROW(cfg.validate(), RangeError);
}
