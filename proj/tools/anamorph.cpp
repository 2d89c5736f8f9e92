// Command-line front end: view map generation, warping and synchronized
// multi-view sampling with stub or bridged backends.
//
// Exit codes:
//   0  success
//   1  usage error
//   2  invalid input (parse, file format, sizes)
//   3  view geometry error
//   4  backend handshake failure
//   5  backend failure during a run
//   6  I/O or other failure

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "anamorph.hpp"

using namespace anamorph;
namespace fs = std::filesystem;

namespace {

bool quiet = false;

void note(const std::string& msg) {
  if (!quiet) std::cerr << msg << "\n";
}

std::string fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

std::string file_hash(const fs::path& p) { return fnv1a(detail::read_file(p)); }

SampleMode parse_mode(const std::string& s) {
  if (s == "nearest") return SampleMode::nearest;
  if (s == "trilinear") return SampleMode::trilinear;
  throw ParseError("mode must be nearest or trilinear, got '" + s + "'");
}

Extent parse_extent(const std::string& s) {
  // "N" or "WxH"
  const auto x = s.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const auto n = std::stoul(s, &used);
      if (used == s.size() && n > 0) return {n, n};
    } else {
      const auto w = std::stoul(s.substr(0, x), &used);
      const std::string hs = s.substr(x + 1);
      std::size_t used_h = 0;
      const auto h = std::stoul(hs, &used_h);
      if (used == x && used_h == hs.size() && w > 0 && h > 0) return {w, h};
    }
  } catch (const std::exception&) {
  }
  throw ParseError("bad size '" + s + "' (N or WxH)");
}

// ---------------------------------------------------------------------------

struct UvgenArgs {
  std::string scene, out, render, render_out, mode = "nearest";
  std::size_t size = 0, threads = 0, depth = 0;
};

int cmd_uvgen(const UvgenArgs& a) {
  const ViewScene scene = load_scene(a.scene);
  const std::size_t n = a.size ? a.size : scene.resolution;
  if (n == 0) throw ParseError("no resolution: pass --size or set 'resolution' in the scene");
  const UvMap map = trace_view(scene, n, a.threads);
  write_uvm(map, a.out);
  json summary{{"map", a.out}, {"hash", file_hash(a.out)}, {"size", n}, {"valid", map.valid_count()}};
  note("wrote " + a.out + " (" + std::to_string(map.valid_count()) + " of " + std::to_string(n * n) +
       " pixels see the canonical image)");
  if (!a.render.empty()) {
    if (a.render_out.empty()) throw ParseError("--render needs --render-out");
    const Image canonical = read_png(a.render);
    const LodMap lod = compute_lod(map, canonical.extent());
    const std::size_t depth = a.depth ? a.depth : default_depth(canonical.extent());
    const Image y = forward_warp(build_gaussian(canonical, depth), map, lod, parse_mode(a.mode), a.threads);
    write_png(y, a.render_out, 16, -1.f);
    summary["render"] = a.render_out;
    summary["render_hash"] = file_hash(a.render_out);
    note("wrote " + a.render_out);
  }
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct WarpArgs {
  std::string map, in, out, mode = "nearest", canonical, masks_dir;
  bool inverse = false;
  std::size_t depth = 0, threads = 0;
};

int cmd_warp(const WarpArgs& a) {
  const UvMap map = read_uvm(a.map);
  const Image x = read_png(a.in);
  json summary{{"out", a.out}};
  if (!a.inverse) {
    const LodMap lod = compute_lod(map, x.extent());
    const std::size_t depth = a.depth ? a.depth : default_depth(x.extent());
    const Image y = forward_warp(build_gaussian(x, depth), map, lod, parse_mode(a.mode), a.threads);
    write_png(y, a.out, 16, -1.f);
  } else {
    if (x.extent() != map.extent())
      throw SizeError("view image " + to_string(x.extent()) + " does not match the map " + to_string(map.extent()));
    const Extent canonical = a.canonical.empty() ? map.extent() : parse_extent(a.canonical);
    const std::size_t depth = a.depth ? a.depth : default_depth(canonical);
    const MaskedPyramid p = inverse_warp(x, map, compute_lod(map, canonical), depth, canonical);
    // Preview: unknown detail reads as zero, like an uncovered blend.
    Pyramid lap{PyramidKind::laplacian, {}};
    for (const auto& level : p.levels) lap.levels.push_back(fill_missing(level, 0.f));
    write_png(reconstruct(lap), a.out);
    if (!a.masks_dir.empty()) {
      fs::create_directories(a.masks_dir);
      for (std::size_t l = 0; l < p.depth(); ++l) {
        Image m(p.masks[l].width(), p.masks[l].height(), 1);
        for (std::size_t y = 0; y < m.height(); ++y)
          for (std::size_t xx = 0; xx < m.width(); ++xx) m.at(xx, y) = p.masks[l](xx, y) ? 1.f : -1.f;
        write_png(m, fs::path(a.masks_dir) / ("mask_" + std::to_string(l) + ".png"), 8);
      }
    }
    summary["depth"] = depth;
  }
  summary["hash"] = file_hash(a.out);
  note("wrote " + a.out);
  std::cout << summary.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// sync

struct ViewArg {
  std::string map;
  std::string prompt;
};

ViewArg parse_view_arg(const std::string& s) {
  // map.uvm:prompt; the prompt may itself contain ':'.
  auto at = s.find(".uvm:");
  if (at != std::string::npos)
    at += 4;
  else
    at = s.find(':');
  if (at == std::string::npos || at == 0) throw ParseError("view must be <map.uvm>:<prompt>, got '" + s + "'");
  return {s.substr(0, at), s.substr(at + 1)};
}

/// Every key a sampler config may set, with its default.
KeyValues default_config() {
  return KeyValues::parse(
      "steps = 30\n"
      "cfg_scale = 0\n"
      "alpha = 0.375\n"
      "feather = true\n"
      "time_travel_start = 0.2\n"
      "time_travel_end = 0.8\n"
      "time_travel_repeats = 1\n"
      "renoise = sample\n"
      "priority_view = none\n"
      "priority_frac = 0.2\n"
      "seed = 0\n"
      "mode = nearest\n"
      "identity_shortcut = true\n"
      "vae = identity\n"
      "depth = 0\n"
      "canonical = auto\n"
      "negative_prompt = \n");
}

/// Config file entries and --set overrides layered over the defaults.
KeyValues effective_config(const std::string& file, const std::vector<std::string>& overrides) {
  KeyValues cfg = default_config();
  auto apply = [&](const std::string& key, const std::string& value, const std::string& origin) {
    if (!cfg.has(key)) throw ParseError(origin + ": unknown config key '" + key + "'");
    cfg.set(key, value);
  };
  if (!file.empty()) {
    const KeyValues loaded = KeyValues::load(file);
    for (const auto& [k, v] : loaded.entries()) apply(k, v, file);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ParseError("--set expects key=value, got '" + o + "'");
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    apply(trim(o.substr(0, eq)), trim(o.substr(eq + 1)), "--set");
  }
  return cfg;
}

SyncConfig to_sync_config(const KeyValues& kv) {
  SyncConfig c;
  auto count = [&](const std::string& key) {
    const long long v = kv.integer(key, 0);
    if (v < 0) throw ParseError("key '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.steps = count("steps");
  c.cfg_scale = kv.real("cfg_scale", c.cfg_scale);
  c.alpha = kv.real("alpha", c.alpha);
  c.feather = kv.boolean("feather", c.feather);
  c.time_travel_start = kv.real("time_travel_start", c.time_travel_start);
  c.time_travel_end = kv.real("time_travel_end", c.time_travel_end);
  c.time_travel_repeats = count("time_travel_repeats");
  const std::string renoise = kv.string("renoise", "sample");
  if (renoise == "sample")
    c.renoise_mode = RenoiseMode::sample;
  else if (renoise == "replay")
    c.renoise_mode = RenoiseMode::replay;
  else
    throw ParseError("renoise must be sample or replay");
  if (kv.string("priority_view", "none") != "none") c.priority_view = count("priority_view");
  c.priority_frac = kv.real("priority_frac", c.priority_frac);
  c.seed = static_cast<std::uint64_t>(kv.integer("seed", 0));
  c.mode = parse_mode(kv.string("mode", "nearest"));
  c.identity_shortcut = kv.boolean("identity_shortcut", true);
  c.validate();
  return c;
}

struct Backend {
  std::unique_ptr<Vae> stub_vae;
  std::unique_ptr<Denoiser> stub_denoiser;
  std::unique_ptr<BridgeClient> bridge;
  Denoiser* denoiser = nullptr;
  Vae* vae = nullptr;
};

Backend open_backend(const std::string& spec, const std::string& vae_spec, std::uint64_t seed) {
  Backend b;
  if (spec.rfind("stub:", 0) == 0) {
    b.stub_vae = make_stub_vae(vae_spec);
    b.stub_denoiser = make_stub_denoiser(spec.substr(5), *b.stub_vae, seed);
    b.denoiser = b.stub_denoiser.get();
    b.vae = b.stub_vae.get();
  } else if (spec.rfind("bridge:", 0) == 0) {
    auto stream = open_backend_stream(spec.substr(7));
    b.bridge = std::make_unique<BridgeClient>(std::move(stream));
    b.denoiser = b.bridge.get();
    b.vae = b.bridge.get();
  } else {
    throw ParseError("backend must be stub:<target|blur|noise> or bridge:<tcp://host:port|exec:command>");
  }
  return b;
}

struct SyncArgs {
  std::string config, backend = "stub:target", out_dir, replay;
  std::vector<std::string> views, overrides;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

json step_json(const StepEvent& e) {
  return {{"step", e.step},       {"repeat", e.repeat},   {"t", e.t},
          {"t_next", e.t_next},   {"seconds", e.seconds}, {"residual_max_abs", e.residual_max_abs},
          {"prioritized", e.prioritized}};
}

int cmd_sync(SyncArgs a) {
  json recorded;
  std::vector<ViewArg> views;
  if (!a.replay.empty()) {
    // Everything comes from the manifest; only the output directory is new.
    std::ifstream in(a.replay);
    if (!in) throw ParseError("cannot open manifest " + a.replay);
    try {
      recorded = json::parse(in);
      a.backend = recorded.at("backend").get<std::string>();
      a.overrides.clear();
      for (const auto& v : recorded.at("views"))
        views.push_back({v.at("map").get<std::string>(), v.at("prompt").get<std::string>()});
      for (const auto& [k, v] : recorded.at("config").items()) a.overrides.push_back(k + "=" + v.get<std::string>());
    } catch (const json::exception& e) {
      throw ParseError("bad manifest " + a.replay + ": " + e.what());
    }
    a.config.clear();
    a.seed.reset();
  }
  if (recorded.is_null())
    for (const auto& s : a.views) views.push_back(parse_view_arg(s));
  if (views.empty()) throw ParseError("sync needs at least one --views entry");

  KeyValues kv = effective_config(a.config, a.overrides);
  if (a.seed) kv.set("seed", std::to_string(*a.seed));
  const SyncConfig cfg = [&] {
    SyncConfig c = to_sync_config(kv);
    c.threads = a.threads;
    return c;
  }();

  const bool target_stub = a.backend == "stub:target";
  for (auto& v : views) {
    v.map = fs::absolute(v.map).string();
    // Target prompts are image paths; check them up front so a bad path is an input error.
    if (target_stub) {
      v.prompt = fs::absolute(v.prompt).string();
      read_png(v.prompt);
    }
  }
  if (!recorded.is_null()) {
    const auto& rv = recorded["views"];
    for (std::size_t i = 0; i < views.size(); ++i)
      if (file_hash(views[i].map) != rv[i].value("map_hash", std::string()))
        throw FormatError("map " + views[i].map + " changed since the recorded run");
  }

  Backend backend = open_backend(a.backend, kv.string("vae", "identity"), cfg.seed);
  const std::string negative = kv.string("negative_prompt", "");

  std::vector<ViewSpec> specs;
  for (const auto& v : views) specs.push_back({read_uvm(v.map), v.prompt, negative});
  const std::string canon = kv.string("canonical", "auto");
  const Extent canonical = canon == "auto" ? Extent{} : parse_extent(canon);
  const auto depth = static_cast<std::size_t>(kv.integer("depth", 0));
  const ViewBundle bundle = prepare_views(std::move(specs), backend.vae->scale_factor(), canonical, depth);

  fs::create_directories(a.out_dir);
  const std::size_t total_steps = backend.denoiser->schedule() ? backend.denoiser->schedule()->size() - 1 : cfg.steps;
  json steps = json::array();
  const auto t0 = std::chrono::steady_clock::now();
  const SyncResult result = run_synchronized_sampling(bundle, *backend.denoiser, *backend.vae, cfg, [&](const StepEvent& e) {
    steps.push_back(step_json(e));
    if (!quiet)
      std::cerr << "step " << e.step + 1 << "/" << total_steps << (e.repeat ? " repeat " + std::to_string(e.repeat) : "")
                << (e.prioritized ? " (priority view)" : "") << "  t=" << e.t << "  " << std::fixed
                << std::setprecision(3) << e.seconds << "s" << std::defaultfloat << "\n";
  });
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json manifest;
  manifest["tool"] = "anamorph sync";
  manifest["backend"] = a.backend;
  if (backend.bridge) manifest["backend_hello"] = backend.bridge->hello();
  json config = json::object();
  for (const auto& [k, v] : kv.entries()) config[k] = v;
  manifest["config"] = config;
  manifest["seed"] = cfg.seed;
  manifest["canonical"] = {bundle.canonical.width, bundle.canonical.height};
  manifest["depth"] = bundle.depth;
  manifest["scale_factor"] = bundle.scale_factor;
  manifest["schedule"] = result.schedule;
  json vlist = json::array();
  for (std::size_t i = 0; i < views.size(); ++i) {
    const std::string png = "view_" + std::to_string(i) + ".png";
    const std::string latent = "latent_" + std::to_string(i) + ".tensor";
    write_png(result.images[i], fs::path(a.out_dir) / png);
    write_tensor(result.latents[i].data, fs::path(a.out_dir) / latent);
    vlist.push_back({{"map", views[i].map},
                     {"map_hash", file_hash(views[i].map)},
                     {"prompt", views[i].prompt},
                     {"negative_prompt", negative},
                     {"identity", bundle.views[i].identity},
                     {"image", png},
                     {"image_hash", file_hash(fs::path(a.out_dir) / png)},
                     {"latent", latent},
                     {"latent_hash", file_hash(fs::path(a.out_dir) / latent)}});
  }
  manifest["views"] = vlist;
  manifest["steps"] = steps;
  manifest["total_seconds"] = total;
  const fs::path manifest_path = fs::path(a.out_dir) / "manifest.json";
  {
    std::ofstream out(manifest_path);
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
  }

  json summary{{"manifest", manifest_path.string()}, {"seconds", total}};
  json hashes = json::array();
  for (const auto& v : vlist) hashes.push_back(v["image_hash"]);
  summary["image_hashes"] = hashes;
  if (!recorded.is_null()) {
    bool same = true;
    for (std::size_t i = 0; i < vlist.size(); ++i)
      same = same && vlist[i]["latent_hash"] == recorded["views"][i].value("latent_hash", std::string());
    summary["replay_matches"] = same;
    note(same ? "replay matches the recorded run" : "replay differs from the recorded run");
  }
  note("wrote " + std::to_string(vlist.size()) + " views and " + manifest_path.string());
  std::cout << summary.dump() << "\n";
  return 0;
}

template <class F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const HandshakeError& e) {
    std::cerr << "error: backend handshake failed: " << e.what() << "\n";
    return 4;
  } catch (const BackendError& e) {
    std::cerr << "error: backend failed: " << e.what() << "\n";
    return 5;
  } catch (const GeometryError& e) {
    std::cerr << "error: geometry: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 6;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anamorph: multi-view illusion toolkit"};
  app.require_subcommand(1);
  app.add_flag("-q,--quiet", quiet, "no diagnostics; stdout carries only the JSON summary");

  UvgenArgs ua;
  auto* uvgen = app.add_subcommand("uvgen", "trace a view scene into a UVM1 map");
  uvgen->add_option("--scene", ua.scene, "scene description file")->required()->check(CLI::ExistingFile);
  uvgen->add_option("--size", ua.size, "view resolution (overrides the scene's)");
  uvgen->add_option("--out", ua.out, "output .uvm")->required();
  uvgen->add_option("--render", ua.render, "canonical PNG to render through the view");
  uvgen->add_option("--render-out", ua.render_out, "validation render output PNG");
  uvgen->add_option("--mode", ua.mode, "nearest or trilinear");
  uvgen->add_option("--depth", ua.depth, "pyramid depth for the render (0: default)");
  uvgen->add_option("--threads", ua.threads, "worker threads (0: all cores)");

  WarpArgs wa;
  auto* warp = app.add_subcommand("warp", "forward or inverse warp an image through a view map");
  warp->add_option("--map", wa.map, "view map (.uvm)")->required()->check(CLI::ExistingFile);
  warp->add_option("--in", wa.in, "input PNG")->required()->check(CLI::ExistingFile);
  warp->add_option("--out", wa.out, "output PNG")->required();
  warp->add_option("--mode", wa.mode, "nearest or trilinear");
  warp->add_flag("--inverse", wa.inverse, "view image to canonical preview");
  warp->add_option("--depth", wa.depth, "pyramid depth (0: default)");
  warp->add_option("--canonical", wa.canonical, "canonical size for --inverse, N or WxH (default: map size)");
  warp->add_option("--masks-dir", wa.masks_dir, "with --inverse, write per-level masks here");
  warp->add_option("--threads", wa.threads, "worker threads (0: all cores)");

  SyncArgs sa;
  auto* sync = app.add_subcommand("sync", "synchronized multi-view sampling");
  sync->add_option("--config", sa.config, "sampler config (key = value)")->check(CLI::ExistingFile);
  sync->add_option("--views", sa.views, "<map.uvm>:<prompt> per view");
  sync->add_option("--backend", sa.backend, "stub:target|blur|noise or bridge:tcp://host:port|bridge:exec:<cmd>");
  sync->add_option("--out-dir", sa.out_dir, "output directory")->required();
  sync->add_option("--set", sa.overrides, "override a config key, key=value");
  sync->add_option("--seed", sa.seed, "override the seed");
  sync->add_option("--threads", sa.threads, "worker threads for warping");
  sync->add_option("--replay", sa.replay, "rerun from a manifest.json")->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  if (*uvgen) return guarded([&] { return cmd_uvgen(ua); });
  if (*warp) return guarded([&] { return cmd_warp(wa); });
  return guarded([&] { return cmd_sync(sa); });
}
