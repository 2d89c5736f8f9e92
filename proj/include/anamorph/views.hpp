#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "anamorph/errors.hpp"
#include "anamorph/image.hpp"
#include "anamorph/keyvalue.hpp"
#include "anamorph/parallel.hpp"
#include "anamorph/pyramid.hpp"
#include "anamorph/uvmap.hpp"
#include "anamorph/warp.hpp"

namespace anamorph {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(double k) const { return {x * k, y * k, z * k}; }
  friend Vec3 operator*(double k, const Vec3& v) { return v * k; }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) { return a * (1.0 / norm(a)); }

/// Half-line with unit direction.
struct Ray {
  Vec3 origin;
  Vec3 direction;

  static Ray through(const Vec3& origin, const Vec3& direction) { return {origin, normalized(direction)}; }
  Vec3 at(double t) const { return origin + direction * t; }
};

/// Mirror reflection of direction d about unit normal n.
inline Vec3 reflect(const Vec3& d, const Vec3& n) { return d - n * (2.0 * dot(d, n)); }

/// Snell refraction of unit direction d at a surface with unit normal n, going
/// from index n1 to n2. Empty on total internal reflection. The normal may
/// face either side.
inline std::optional<Vec3> refract(const Vec3& d, Vec3 n, double n1, double n2) {
  double cos_i = -dot(d, n);
  if (cos_i < 0) {
    n = -n;
    cos_i = -cos_i;
  }
  const double eta = n1 / n2;
  const double k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
  if (k < 0) return std::nullopt;
  return normalized(d * eta + n * (eta * cos_i - std::sqrt(k)));
}

inline constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// ---------------------------------------------------------------------------
// Scene descriptions. Scene units: the canonical image is the unit square
// [0,1]^2 on the plane z = 0, with u along +x and v along +y.

/// Vertical flip.
struct FlipScene {};

/// Rotation about the image center by `degrees`. `disc` restricts validity to
/// the inscribed disc; by default that applies to angles that are not
/// multiples of 90 degrees.
struct RotateScene {
  double degrees = 90.0;
  std::optional<bool> disc;
};

/// Seeded shuffle of square blocks.
struct PermutationScene {
  std::size_t block = 8;
  std::uint64_t seed = 0;
};

/// Conic mirror standing apex-up at the plane center, seen by an orthographic
/// top-down camera spanning the unit square.
struct ConeScene {
  double base_radius = 0.2;
  double apex_half_angle = 20.0;  // degrees, between axis and surface
  double center_x = 0.5;
  double center_y = 0.5;
};

/// Vertical cylindrical mirror, seen by a perspective camera that looks at
/// its mid-height from `camera_distance` away, raised by `camera_elevation`,
/// positioned toward +y.
struct CylinderScene {
  double radius = 0.15;
  double height = 0.6;
  double center_x = 0.5;
  double center_y = 0.25;
  double camera_elevation = 55.0;
  double camera_distance = 2.0;
  double fov = 12.0;  // degrees, full angle of the square frame
  bool mirror_only = true;
};

/// Faceted lens: a glass prism over a regular polygon with a flat base at
/// `distance_to_plane` and `facet_count` top faces tilted by `facet_tilt`
/// that rise toward the axis; `thickness` is the rim thickness. Viewed by an
/// on-axis perspective camera framing the lens.
struct LensScene {
  int facet_count = 7;
  double refractive_index = 1.5;
  double thickness = 0.05;
  double distance_to_plane = 1.0;
  double rotation = 0.0;  // degrees
  double lens_radius = 0.5;
  double facet_tilt = 20.0;  // degrees
  double camera_height = 3.0;
};

using SceneGeometry = std::variant<FlipScene, RotateScene, PermutationScene, ConeScene, CylinderScene, LensScene>;

struct ViewScene {
  SceneGeometry geometry;
  std::size_t resolution = 0;  ///< 0: chosen by the caller
};

inline bool is_planar(const ViewScene& s) {
  return std::holds_alternative<FlipScene>(s.geometry) || std::holds_alternative<RotateScene>(s.geometry) ||
         std::holds_alternative<PermutationScene>(s.geometry);
}

inline void validate(const ViewScene& scene) {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw GeometryError(std::string(what) + " must be positive");
  };
  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, RotateScene>) {
          if (!std::isfinite(g.degrees)) throw GeometryError("rotation angle must be finite");
        } else if constexpr (std::is_same_v<T, PermutationScene>) {
          if (g.block == 0) throw GeometryError("block must be positive");
        } else if constexpr (std::is_same_v<T, ConeScene>) {
          positive(g.base_radius, "base_radius");
          positive(g.apex_half_angle, "apex_half_angle");
          if (g.apex_half_angle >= 45.0)
            throw GeometryError("apex_half_angle >= 45 reflects the top-down view away from the plane");
        } else if constexpr (std::is_same_v<T, CylinderScene>) {
          positive(g.radius, "radius");
          positive(g.height, "height");
          positive(g.camera_distance, "camera_distance");
          positive(g.fov, "fov");
          if (!(g.camera_elevation > 0.0 && g.camera_elevation < 90.0))
            throw GeometryError("camera_elevation must be in (0, 90)");
          if (g.fov >= 180.0) throw GeometryError("fov must be below 180");
          if (g.camera_distance <= g.radius) throw GeometryError("camera inside the cylinder");
        } else if constexpr (std::is_same_v<T, LensScene>) {
          if (g.facet_count < 3) throw GeometryError("facet_count must be at least 3");
          if (!(g.refractive_index > 1.0)) throw GeometryError("refractive_index must exceed 1");
          positive(g.thickness, "thickness");
          positive(g.distance_to_plane, "distance_to_plane");
          positive(g.lens_radius, "lens_radius");
          if (!(g.facet_tilt >= 0.0 && g.facet_tilt < 80.0)) throw GeometryError("facet_tilt must be in [0, 80)");
          const double apex = g.distance_to_plane + g.thickness +
                              g.lens_radius * std::cos(std::numbers::pi / g.facet_count) * std::tan(deg2rad(g.facet_tilt));
          if (g.camera_height <= apex) throw GeometryError("camera must sit above the lens");
        }
      },
      scene.geometry);
}

/// Builds a scene from `kind = ...` plus per-kind keys (see scenes/*.scene).
inline ViewScene parse_scene(const KeyValues& kv) {
  ViewScene scene;
  const std::string kind = kv.require("kind");
  scene.resolution = static_cast<std::size_t>(kv.integer("resolution", 0));
  if (kind == "flip") {
    scene.geometry = FlipScene{};
  } else if (kind == "rotate") {
    RotateScene r;
    r.degrees = kv.real("angle", r.degrees);
    const std::string disc = kv.string("disc", "auto");
    if (disc == "true")
      r.disc = true;
    else if (disc == "false")
      r.disc = false;
    else if (disc != "auto")
      throw ParseError("disc must be auto, true or false");
    scene.geometry = r;
  } else if (kind == "permutation") {
    PermutationScene p;
    const long long block = kv.integer("block", static_cast<long long>(p.block));
    if (block <= 0) throw GeometryError("block must be positive");
    p.block = static_cast<std::size_t>(block);
    p.seed = static_cast<std::uint64_t>(kv.integer("seed", 0));
    scene.geometry = p;
  } else if (kind == "cone") {
    ConeScene c;
    c.base_radius = kv.real("base_radius", c.base_radius);
    c.apex_half_angle = kv.real("apex_half_angle", c.apex_half_angle);
    c.center_x = kv.real("center_x", c.center_x);
    c.center_y = kv.real("center_y", c.center_y);
    scene.geometry = c;
  } else if (kind == "cylinder") {
    CylinderScene c;
    c.radius = kv.real("radius", c.radius);
    c.height = kv.real("height", c.height);
    c.center_x = kv.real("center_x", c.center_x);
    c.center_y = kv.real("center_y", c.center_y);
    c.camera_elevation = kv.real("camera_elevation", c.camera_elevation);
    c.camera_distance = kv.real("camera_distance", c.camera_distance);
    c.fov = kv.real("fov", c.fov);
    c.mirror_only = kv.boolean("mirror_only", c.mirror_only);
    scene.geometry = c;
  } else if (kind == "lens") {
    LensScene l;
    l.facet_count = static_cast<int>(kv.integer("facet_count", l.facet_count));
    l.refractive_index = kv.real("refractive_index", l.refractive_index);
    l.thickness = kv.real("thickness", l.thickness);
    l.distance_to_plane = kv.real("distance_to_plane", l.distance_to_plane);
    l.rotation = kv.real("rotation", l.rotation);
    l.lens_radius = kv.real("lens_radius", l.lens_radius);
    l.facet_tilt = kv.real("facet_tilt", l.facet_tilt);
    l.camera_height = kv.real("camera_height", l.camera_height);
    scene.geometry = l;
  } else {
    throw ParseError("unknown scene kind '" + kind + "'");
  }
  kv.reject_unused();
  validate(scene);
  return scene;
}

inline ViewScene load_scene(const std::filesystem::path& path) { return parse_scene(KeyValues::load(path)); }

// ---------------------------------------------------------------------------
// Closed-form 2D views.

namespace detail {

/// cos/sin with exact values at multiples of 90 degrees.
inline std::pair<double, double> cos_sin_degrees(double deg) {
  const double turns = deg / 90.0;
  if (turns == std::floor(turns)) {
    const auto q = static_cast<long long>(std::fmod(std::fmod(turns, 4.0) + 4.0, 4.0));
    static constexpr double c[4] = {1, 0, -1, 0};
    static constexpr double s[4] = {0, 1, 0, -1};
    return {c[q], s[q]};
  }
  const double r = deg2rad(deg);
  return {std::cos(r), std::sin(r)};
}

}  // namespace detail

/// UvMap for flip, rotation, or block permutation at `resolution`^2.
inline UvMap make_2d_map(const ViewScene& scene, std::size_t resolution) {
  if (resolution < 2) throw SizeError("resolution must be at least 2");
  validate(scene);
  const std::size_t n = resolution;
  const double nd = static_cast<double>(n);
  UvMap map(n, n);
  if (std::holds_alternative<FlipScene>(scene.geometry)) {
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        map.set(x, y, (static_cast<double>(x) + 0.5) / nd, (nd - static_cast<double>(y) - 0.5) / nd);
  } else if (const auto* r = std::get_if<RotateScene>(&scene.geometry)) {
    const auto [c, s] = detail::cos_sin_degrees(r->degrees);
    const bool right_angle = std::fmod(r->degrees, 90.0) == 0.0;
    const bool disc = r->disc.value_or(!right_angle);
    const double half = nd / 2.0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double px = static_cast<double>(x) + 0.5 - half;
        const double py = static_cast<double>(y) + 0.5 - half;
        if (disc && px * px + py * py > half * half) continue;
        const double qx = half + c * px - s * py;
        const double qy = half + s * px + c * py;
        const double u = qx / nd, v = qy / nd;
        if (u >= 0.0 && u <= 1.0 && v >= 0.0 && v <= 1.0) map.set(x, y, u, v);
      }
  } else if (const auto* p = std::get_if<PermutationScene>(&scene.geometry)) {
    if (n % p->block != 0) throw SizeError("block size must divide the resolution");
    const std::size_t blocks = n / p->block;
    std::vector<std::size_t> perm(blocks * blocks);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(p->seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const std::size_t src = perm[(y / p->block) * blocks + x / p->block];
        const std::size_t sx = (src % blocks) * p->block + x % p->block;
        const std::size_t sy = (src / blocks) * p->block + y % p->block;
        map.set(x, y, (static_cast<double>(sx) + 0.5) / nd, (static_cast<double>(sy) + 0.5) / nd);
      }
  } else {
    throw GeometryError("make_2d_map needs a flip, rotate or permutation scene");
  }
  return map;
}

// ---------------------------------------------------------------------------
// Ray tracing.

/// Outcome of tracing one camera sample.
struct TraceHit {
  enum class Path { miss, plane, optic } path = Path::miss;
  std::optional<std::pair<double, double>> uv;  ///< set when the ray lands on the unit square
};

namespace detail {

inline constexpr double kEps = 1e-9;

inline TraceHit land_on_plane(const Ray& r, TraceHit::Path path) {
  TraceHit hit{path, std::nullopt};
  if (r.direction.z >= 0.0) return hit;
  const double t = -r.origin.z / r.direction.z;
  if (t < 0.0) return hit;
  const Vec3 p = r.at(t);
  if (p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0) hit.uv = std::pair{p.x, p.y};
  return hit;
}

/// Smallest root > kEps of a t^2 + b t + c = 0 accepted by `ok`.
template <class Ok>
std::optional<double> first_root(double a, double b, double c, Ok&& ok) {
  double roots[2];
  int n = 0;
  if (std::abs(a) < 1e-14) {
    if (std::abs(b) < 1e-14) return std::nullopt;
    roots[n++] = -c / b;
  } else {
    const double disc = b * b - 4 * a * c;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    // Numerically stable pair.
    const double q = -0.5 * (b + std::copysign(sq, b));
    roots[n++] = q / a;
    if (q != 0.0) roots[n++] = c / q;
  }
  std::sort(roots, roots + n);
  for (int i = 0; i < n; ++i)
    if (roots[i] > kEps && ok(roots[i])) return roots[i];
  return std::nullopt;
}

inline TraceHit trace_cone(const ConeScene& g, double sx, double sy) {
  const double height = g.base_radius / std::tan(deg2rad(g.apex_half_angle));
  const Ray ray{{sx, sy, height + 1.0}, {0, 0, -1}};
  const Vec3 apex{g.center_x, g.center_y, height};
  const Vec3 axis{0, 0, -1};
  const double cos2 = std::pow(std::cos(deg2rad(g.apex_half_angle)), 2);
  const Vec3 co = ray.origin - apex;
  const double dv = dot(ray.direction, axis), cv = dot(co, axis);
  const double a = dv * dv - cos2 * dot(ray.direction, ray.direction);
  const double b = 2.0 * (dv * cv - cos2 * dot(ray.direction, co));
  const double c = cv * cv - cos2 * dot(co, co);
  const auto t = first_root(a, b, c, [&](double tt) {
    const double along = dot(ray.at(tt) - apex, axis);
    return along >= 0.0 && along <= height;
  });
  if (!t) return land_on_plane(ray, TraceHit::Path::plane);
  const Vec3 p = ray.at(*t);
  const Vec3 w = p - apex;
  const Vec3 grad = axis * (2.0 * dot(w, axis)) - w * (2.0 * cos2);
  if (norm(grad) < 1e-12) return {TraceHit::Path::optic, std::nullopt};  // apex
  const Vec3 n = normalized(-grad);
  const Vec3 r = reflect(ray.direction, n);
  return land_on_plane({p + n * kEps, r}, TraceHit::Path::optic);
}

inline TraceHit trace_cylinder(const CylinderScene& g, double fx, double fy) {
  const double el = deg2rad(g.camera_elevation);
  const Vec3 target{g.center_x, g.center_y, g.height / 2};
  const Vec3 eye = target + Vec3{0, std::cos(el), std::sin(el)} * g.camera_distance;
  const Vec3 fwd = normalized(target - eye);
  const Vec3 right = normalized(cross(fwd, {0, 0, 1}));
  const Vec3 up = cross(right, fwd);
  const double k = std::tan(deg2rad(g.fov) / 2);
  const Ray ray = Ray::through(eye, fwd + right * (fx * k) - up * (fy * k));

  const double ox = ray.origin.x - g.center_x, oy = ray.origin.y - g.center_y;
  const double dx = ray.direction.x, dy = ray.direction.y;
  const auto t_side = first_root(dx * dx + dy * dy, 2 * (ox * dx + oy * dy), ox * ox + oy * oy - g.radius * g.radius,
                                 [&](double tt) {
                                   const double z = ray.at(tt).z;
                                   return z >= 0.0 && z <= g.height;
                                 });
  std::optional<double> t_cap;
  if (ray.direction.z < 0) {
    const double tt = (g.height - ray.origin.z) / ray.direction.z;
    const Vec3 p = ray.at(tt);
    const double rx = p.x - g.center_x, ry = p.y - g.center_y;
    if (tt > kEps && rx * rx + ry * ry <= g.radius * g.radius) t_cap = tt;
  }
  if (t_cap && (!t_side || *t_cap < *t_side)) return {TraceHit::Path::miss, std::nullopt};  // opaque top
  if (!t_side) {
    if (g.mirror_only) return {TraceHit::Path::miss, std::nullopt};
    return land_on_plane(ray, TraceHit::Path::plane);
  }
  const Vec3 p = ray.at(*t_side);
  const Vec3 n = normalized(Vec3{p.x - g.center_x, p.y - g.center_y, 0});
  return land_on_plane({p + n * kEps, reflect(ray.direction, n)}, TraceHit::Path::optic);
}

/// Convex polyhedron as outward-facing half-spaces (n . (p - q) <= 0 inside).
struct HalfSpace {
  Vec3 normal;
  Vec3 point;
  enum class Face { bottom, facet, wall } face;
};

inline std::vector<HalfSpace> lens_body(const LensScene& g) {
  std::vector<HalfSpace> planes;
  const double top = g.distance_to_plane + g.thickness;
  const double tilt = deg2rad(g.facet_tilt);
  planes.push_back({{0, 0, -1}, {0.5, 0.5, g.distance_to_plane}, HalfSpace::Face::bottom});
  const double apothem = g.lens_radius * std::cos(std::numbers::pi / g.facet_count);
  for (int k = 0; k < g.facet_count; ++k) {
    const double phi = deg2rad(g.rotation) + 2 * std::numbers::pi * (k + 0.5) / g.facet_count;
    const Vec3 out{std::cos(phi), std::sin(phi), 0};
    const Vec3 mid{0.5 + apothem * out.x, 0.5 + apothem * out.y, top};
    planes.push_back({Vec3{out.x * std::sin(tilt), out.y * std::sin(tilt), std::cos(tilt)}, mid, HalfSpace::Face::facet});
    planes.push_back({out, mid, HalfSpace::Face::wall});
  }
  return planes;
}

struct SlabHit {
  double t;
  const HalfSpace* face;
};

/// Entry of a ray into the convex body, if any.
inline std::optional<SlabHit> enter(const std::vector<HalfSpace>& body, const Ray& r) {
  double t_in = -1e300, t_out = 1e300;
  const HalfSpace* face = nullptr;
  for (const auto& h : body) {
    const double num = dot(h.point - r.origin, h.normal);
    const double den = dot(r.direction, h.normal);
    if (std::abs(den) < 1e-15) {
      if (num < 0) return std::nullopt;
      continue;
    }
    const double t = num / den;
    if (den < 0) {
      if (t > t_in) {
        t_in = t;
        face = &h;
      }
    } else {
      t_out = std::min(t_out, t);
    }
  }
  if (!face || t_in > t_out || t_in <= kEps) return std::nullopt;
  return SlabHit{t_in, face};
}

/// Exit of a ray that starts inside the body.
inline std::optional<SlabHit> leave(const std::vector<HalfSpace>& body, const Ray& r) {
  double t_out = 1e300;
  const HalfSpace* face = nullptr;
  for (const auto& h : body) {
    const double den = dot(r.direction, h.normal);
    if (den <= 1e-15) continue;
    const double t = dot(h.point - r.origin, h.normal) / den;
    if (t < t_out) {
      t_out = t;
      face = &h;
    }
  }
  if (!face) return std::nullopt;
  return SlabHit{std::max(t_out, 0.0), face};
}

inline TraceHit trace_lens(const LensScene& g, const std::vector<HalfSpace>& body, double fx, double fy) {
  const double top = g.distance_to_plane + g.thickness;
  const double k = g.lens_radius / (g.camera_height - top);
  const Ray ray = Ray::through({0.5, 0.5, g.camera_height}, {fx * k, fy * k, -1});
  const auto in = enter(body, ray);
  if (!in) return land_on_plane(ray, TraceHit::Path::plane);
  if (in->face->face != HalfSpace::Face::facet) return {TraceHit::Path::optic, std::nullopt};
  const Vec3 p = ray.at(in->t);
  const auto d1 = refract(ray.direction, in->face->normal, 1.0, g.refractive_index);
  if (!d1) return {TraceHit::Path::optic, std::nullopt};
  const Ray inside{p, *d1};
  const auto out = leave(body, inside);
  if (!out || out->face->face != HalfSpace::Face::bottom) return {TraceHit::Path::optic, std::nullopt};
  const Vec3 q = inside.at(out->t);
  const auto d2 = refract(*d1, out->face->normal, g.refractive_index, 1.0);
  if (!d2) return {TraceHit::Path::optic, std::nullopt};  // total internal reflection
  return land_on_plane({q, *d2}, TraceHit::Path::optic);
}

}  // namespace detail

/// Traces one camera sample at continuous pixel position (px, py) of a
/// `resolution`^2 frame (pixel centers at integer + 0.5).
inline TraceHit trace_point(const ViewScene& scene, std::size_t resolution, double px, double py) {
  const double n = static_cast<double>(resolution);
  if (const auto* c = std::get_if<ConeScene>(&scene.geometry)) return detail::trace_cone(*c, px / n, py / n);
  if (const auto* c = std::get_if<CylinderScene>(&scene.geometry))
    return detail::trace_cylinder(*c, 2 * px / n - 1, 2 * py / n - 1);
  if (const auto* l = std::get_if<LensScene>(&scene.geometry))
    return detail::trace_lens(*l, detail::lens_body(*l), 2 * px / n - 1, 2 * py / n - 1);
  throw GeometryError("trace_point needs a cone, cylinder or lens scene");
}

/// UvMap of a scene at `resolution`^2, one ray per pixel center. Raytraced
/// scenes throw GeometryError when the optic is not visible or more than half
/// of the rays it intercepts fail to land on the canonical square.
inline UvMap trace_view(const ViewScene& scene, std::size_t resolution, std::size_t threads = 0) {
  if (resolution < 2) throw SizeError("resolution must be at least 2");
  validate(scene);
  if (is_planar(scene)) return make_2d_map(scene, resolution);

  std::optional<std::vector<detail::HalfSpace>> body;
  if (const auto* l = std::get_if<LensScene>(&scene.geometry)) body = detail::lens_body(*l);
  const double n = static_cast<double>(resolution);

  UvMap map(resolution, resolution);
  std::vector<std::uint8_t> optic(resolution * resolution, 0);
  parallel_rows(resolution, threads, [&](std::size_t y) {
    for (std::size_t x = 0; x < resolution; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      TraceHit hit;
      if (body)
        hit = detail::trace_lens(std::get<LensScene>(scene.geometry), *body, 2 * px / n - 1, 2 * py / n - 1);
      else
        hit = trace_point(scene, resolution, px, py);
      if (hit.path == TraceHit::Path::optic) optic[y * resolution + x] = hit.uv ? 2 : 1;
      if (hit.uv) map.set(x, y, hit.uv->first, hit.uv->second);
    }
  });

  std::size_t through = 0, lost = 0;
  for (auto o : optic) {
    through += o != 0;
    lost += o == 1;
  }
  if (through == 0) throw GeometryError("the mirror or lens is not visible from the camera");
  if (2 * lost > through)
    throw GeometryError("more than half of the rays through the optic miss the canonical image (" +
                        std::to_string(lost) + " of " + std::to_string(through) + ")");
  return map;
}

/// Renders what the camera sees when the canonical image lies on the plane,
/// using the same LOD-aware sampling as forward warping.
inline Image render_validation(const ViewScene& scene, const Image& canonical, std::size_t resolution,
                               std::size_t depth = 0, SampleMode mode = SampleMode::nearest, std::size_t threads = 0) {
  const UvMap map = trace_view(scene, resolution, threads);
  if (depth == 0) depth = default_depth(canonical.extent());
  const LodMap lod = compute_lod(map, canonical.extent());
  return forward_warp(build_gaussian(canonical, depth), map, lod, mode, threads);
}

}  // namespace anamorph
