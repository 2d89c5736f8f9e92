#pragma once

// Backend selection by name, shared by the command-line tools.

#include <map>
#include <memory>
#include <string>

#include "anamorph/errors.hpp"
#include "anamorph/png_io.hpp"
#include "anamorph/stubs.hpp"
#include "anamorph/sync.hpp"

namespace anamorph {

/// "identity" or "lossy:<k>".
inline std::unique_ptr<Vae> make_stub_vae(const std::string& spec, std::size_t channels = 3) {
  if (spec == "identity") return std::make_unique<IdentityVae>(channels);
  if (spec.rfind("lossy:", 0) == 0) {
    int k = 0;
    try {
      std::size_t used = 0;
      k = std::stoi(spec.substr(6), &used);
      if (used != spec.size() - 6) k = 0;
    } catch (const std::exception&) {
    }
    if (k < 1) throw ParseError("bad lossy VAE factor in '" + spec + "'");
    return std::make_unique<LossyVae>(k, channels);
  }
  throw ParseError("unknown VAE '" + spec + "' (identity or lossy:<k>)");
}

/// Target flow whose prompt ids are PNG paths; each target is the encoded
/// image, loaded on first use.
class PngTargetDenoiser : public Denoiser {
 public:
  explicit PngTargetDenoiser(Vae& vae) : vae_(vae) {}

  LatentTensor velocity(const LatentTensor& z, double t, const std::string& prompt) override {
    auto it = cache_.find(prompt);
    if (it == cache_.end()) {
      LatentTensor target;
      try {
        target = vae_.encode(read_png(prompt));
      } catch (const Error& e) {
        throw BackendError("cannot load target '" + prompt + "': " + e.what());
      }
      it = cache_.emplace(prompt, std::move(target)).first;
    }
    detail::require_same(it->second, z, "target image");
    const double h = detail::velocity_horizon(t);
    return detail::zip(it->second, z, [h](float a, float zv) { return static_cast<float>((a - zv) / h); });
  }

 private:
  Vae& vae_;
  std::map<std::string, LatentTensor> cache_;
};

/// "target" (prompts are PNG paths), "blur" or "noise".
inline std::unique_ptr<Denoiser> make_stub_denoiser(const std::string& name, Vae& vae, std::uint64_t seed = 0) {
  if (name == "target") return std::make_unique<PngTargetDenoiser>(vae);
  if (name == "blur") return std::make_unique<BlurDenoiser>();
  if (name == "noise") return std::make_unique<NoiseDenoiser>(seed);
  throw ParseError("unknown stub denoiser '" + name + "' (target, blur or noise)");
}

}  // namespace anamorph
