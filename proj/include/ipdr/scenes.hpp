#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "ipdr/geometry.hpp"
#include "ipdr/io.hpp"
#include "ipdr/marching_cubes.hpp"
#include "ipdr/parallel.hpp"

namespace ipdr::scenes {

using geom::Mat4;
using geom::Vec3;

// ---------------------------------------------------------------------------
// Signed distance primitives (exact distances, negative inside)

inline double box_sdf(const Vec3& p, const Vec3& half) {
  const Vec3 q = p.cwiseAbs() - half;
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

struct Primitive {
  enum class Kind { Box, Cylinder, Sphere };
  Kind kind = Kind::Box;
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Constant(0.1);  // Box: half extents; Cylinder: (radius, radius, half height)
  double radius = 0.1;              // Sphere
  double yaw = 0.0;                 // Box rotation about +z
  Vec3 albedo = Vec3::Constant(0.7);

  double sdf(const Vec3& p) const {
    const Vec3 d = p - center;
    switch (kind) {
      case Kind::Box: {
        const double c = std::cos(yaw), s = std::sin(yaw);
        return box_sdf(Vec3(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z()), half);
      }
      case Kind::Cylinder: {
        const double a = std::hypot(d.x(), d.y()) - half.x(), b = std::abs(d.z()) - half.z();
        return std::min(std::max(a, b), 0.0) + std::hypot(std::max(a, 0.0), std::max(b, 0.0));
      }
      case Kind::Sphere:
        return d.norm() - radius;
    }
    return 0.0;
  }

  /// Horizontal footprint radius used for placement.
  double footprint() const {
    switch (kind) {
      case Kind::Box:
        return std::hypot(half.x(), half.y());
      case Kind::Cylinder:
        return half.x();
      case Kind::Sphere:
        return radius;
    }
    return 0.0;
  }
};

inline const char* kind_name(Primitive::Kind k) {
  switch (k) {
    case Primitive::Kind::Box:
      return "box";
    case Primitive::Kind::Cylinder:
      return "cylinder";
    case Primitive::Kind::Sphere:
      return "sphere";
  }
  return "?";
}

/// Room [0, Lx] x [0, Ly] x [0, Lz] seen from inside, plus furniture. The
/// composite distance is the minimum over the inward room box and all
/// primitives, so free space is positive.
struct SceneSdf {
  Vec3 room = Vec3(2.4, 2.0, 1.8);
  std::vector<Primitive> furniture;

  double room_sdf(const Vec3& p) const { return -box_sdf(p - 0.5 * room, 0.5 * room); }

  double operator()(const Vec3& p) const {
    double d = room_sdf(p);
    for (const auto& f : furniture) d = std::min(d, f.sdf(p));
    return d;
  }

  Vec3 normal(const Vec3& p, double h = 1e-4) const {
    Vec3 g;
    for (int k = 0; k < 3; ++k) {
      Vec3 e = Vec3::Zero();
      e[k] = h;
      g[k] = (*this)(p + e) - (*this)(p - e);
    }
    const double n = g.norm();
    return n > 0 ? Vec3(g / n) : Vec3(0, 0, 1);
  }

  /// Surface colour at p: the closest component decides. Walls and floor carry
  /// a smooth procedural pattern so that views have something to match.
  Vec3 albedo(const Vec3& p) const {
    double best = std::abs(room_sdf(p));
    Vec3 base(0.8, 0.78, 0.75);
    const double faces[6] = {p.x(), room.x() - p.x(), p.y(), room.y() - p.y(), p.z(), room.z() - p.z()};
    const Vec3 face_color[6] = {{0.85, 0.7, 0.6}, {0.6, 0.75, 0.85}, {0.75, 0.85, 0.6},
                                {0.85, 0.8, 0.55}, {0.55, 0.5, 0.45}, {0.9, 0.9, 0.9}};
    int face = 0;
    for (int k = 1; k < 6; ++k)
      if (faces[k] < faces[face]) face = k;
    base = face_color[face];
    bool is_room = true;
    for (const auto& f : furniture) {
      const double d = std::abs(f.sdf(p));
      if (d < best) {
        best = d;
        base = f.albedo;
        is_room = false;
      }
    }
    if (!is_room) return base;
    const double w = 2.0 * geom::kPi / 0.35;
    const double t = 0.8 + 0.2 * (std::sin(w * p.x()) + std::sin(w * p.y()) + std::sin(w * p.z())) / 3.0;
    return base * t;
  }
};

struct PointLight {
  Vec3 position = Vec3::Zero();
  double intensity = 0.6;
};

struct LightingModel {
  std::vector<PointLight> lights;
  double ambient = 0.1;
  double attenuation = 0.25;  // 1/m

  /// Direct Lambertian term with exponential distance falloff plus ambient:
  /// sum_l max(0, n.l) I_l exp(-a d_l) + ambient.
  double shade(const Vec3& p, const Vec3& n) const {
    double s = ambient;
    for (const auto& L : lights) {
      const Vec3 to = L.position - p;
      const double d = to.norm();
      if (d <= 0) continue;
      s += std::max(0.0, n.dot(to / d)) * L.intensity * std::exp(-attenuation * d);
    }
    return s;
  }
};

inline LightingModel default_lighting(const Vec3& room) {
  LightingModel m;
  m.lights = {{Vec3(0.3 * room.x(), 0.5 * room.y(), 0.7 * room.z()), 0.6},
              {Vec3(0.7 * room.x(), 0.5 * room.y(), 0.7 * room.z()), 0.6}};
  return m;
}

// ---------------------------------------------------------------------------
// Rendering

struct RenderedView {
  Tensor image;            // 3 x H x W, linear intensities
  geom::DepthImage depth;  // z-depth, +inf where nothing was hit
};

/// Sphere traces every pixel ray (step = sdf, stop at |sdf| < 1e-4 or 256
/// steps) and shades hits with the Lambertian model.
inline RenderedView render_view(const SceneSdf& scene, const LightingModel& light, const geom::CameraModel& cam) {
  const Vec3 o = cam.center();
  if (scene(o) < 0) throw ArgumentError("render_view: camera is inside solid geometry");
  RenderedView out{Tensor({3, cam.H, cam.W}),
                   {cam.H, cam.W, std::vector<double>(cam.H * cam.W, std::numeric_limits<double>::infinity())}};
  const double t_max = 4.0 * scene.room.norm();
  parallel_for(cam.H, [&](std::size_t rb, std::size_t re) {
    for (std::size_t i = rb; i < re; ++i)
      for (std::size_t j = 0; j < cam.W; ++j) {
        const Vec3 rd = cam.ray_direction(static_cast<double>(j), static_cast<double>(i));
        const double len = rd.norm();
        const Vec3 dir = rd / len;
        double t = 0.0;
        bool hit = false;
        for (int step = 0; step < 256 && t < t_max; ++step) {
          const double d = scene(o + t * dir);
          if (std::abs(d) < 1e-4) {
            hit = true;
            break;
          }
          t += d;
        }
        if (!hit) continue;
        const Vec3 p = o + t * dir;
        out.depth.depth[i * cam.W + j] = t / len;
        const Vec3 c = scene.albedo(p) * light.shade(p, scene.normal(p));
        for (std::size_t k = 0; k < 3; ++k) out.image(k, i, j) = c[static_cast<int>(k)];
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Scene specification and generation

struct SceneSpec {
  Vec3 room = Vec3(2.4, 2.0, 1.8);
  int furniture = 3;
  double voxel_size_fine = 0.04;
  // camera
  std::size_t width = 64, height = 48;
  double fx = 36, fy = 36, cx = 31.5, cy = 23.5;
  // trajectory
  int n_views = 10;
  std::string pattern = "circle";
  double phase = 0.0;        // fraction of the angular step
  double ring_radius = 0.25;  // m
  double eye_height = 0.55;   // fraction of room height
  double pitch_down = 25.0, pitch_up = 15.0;  // degrees, alternating

  void validate() const {
    if (!(room.x() > 0 && room.y() > 0 && room.z() > 0)) throw ArgumentError("scene: room extents must be positive");
    if (room.maxCoeff() > 20) throw ArgumentError("scene: room extent above 20 m");
    if (furniture < 0 || furniture > 8) throw ArgumentError("scene: furniture count must lie in [0, 8]");
    if (!(voxel_size_fine > 0.005 && voxel_size_fine <= 0.5)) throw ArgumentError("scene: voxel_size_fine out of range");
    if (width == 0 || height == 0 || width > 1024 || height > 1024) throw ArgumentError("scene: image size out of range");
    if (width % 8 != 0 || height % 8 != 0) throw ArgumentError("scene: image size must be a multiple of 8");
    if (!(fx > 0 && fy > 0)) throw ArgumentError("scene: focal lengths must be positive");
    if (n_views < 1 || n_views > 1000) throw ArgumentError("scene: n_views must lie in [1, 1000]");
    if (pattern != "circle" && pattern != "perimeter") throw ArgumentError("scene: pattern must be circle or perimeter");
    if (!(phase >= 0 && phase < 1)) throw ArgumentError("scene: phase must lie in [0, 1)");
    if (!(ring_radius >= 0)) throw ArgumentError("scene: ring_radius must be non-negative");
    if (!(eye_height > 0 && eye_height < 1)) throw ArgumentError("scene: eye_height must lie in (0, 1)");
  }

  io::Config to_config(std::uint64_t seed) const {
    io::Config c;
    c.set("seed", std::to_string(seed));
    c.set("room", "[" + io::fmt_double(room.x()) + ", " + io::fmt_double(room.y()) + ", " + io::fmt_double(room.z()) + "]");
    c.set("furniture", std::to_string(furniture));
    c.set("voxel_size_fine", io::fmt_double(voxel_size_fine));
    c.set("width", std::to_string(width));
    c.set("height", std::to_string(height));
    c.set("fx", io::fmt_double(fx));
    c.set("fy", io::fmt_double(fy));
    c.set("cx", io::fmt_double(cx));
    c.set("cy", io::fmt_double(cy));
    c.set("n_views", std::to_string(n_views));
    c.set("pattern", pattern);
    c.set("phase", io::fmt_double(phase));
    c.set("ring_radius", io::fmt_double(ring_radius));
    c.set("eye_height", io::fmt_double(eye_height));
    c.set("pitch_down", io::fmt_double(pitch_down));
    c.set("pitch_up", io::fmt_double(pitch_up));
    return c;
  }

  static SceneSpec from_config(const io::Config& c) {
    SceneSpec s;
    const auto r = c.get_array("room", {s.room.x(), s.room.y(), s.room.z()});
    if (r.size() != 3) throw FormatError("scene: room must have three extents");
    s.room = Vec3(r[0], r[1], r[2]);
    s.furniture = static_cast<int>(c.get_int("furniture", s.furniture));
    s.voxel_size_fine = c.get_double("voxel_size_fine", s.voxel_size_fine);
    const long w = c.get_int("width", static_cast<long>(s.width)), h = c.get_int("height", static_cast<long>(s.height));
    if (w <= 0 || h <= 0) throw ArgumentError("scene: image size must be positive");
    s.width = static_cast<std::size_t>(w);
    s.height = static_cast<std::size_t>(h);
    s.fx = c.get_double("fx", s.fx);
    s.fy = c.get_double("fy", s.fy);
    s.cx = c.get_double("cx", s.cx);
    s.cy = c.get_double("cy", s.cy);
    s.n_views = static_cast<int>(c.get_int("n_views", s.n_views));
    s.pattern = c.get_string("pattern", s.pattern);
    s.phase = c.get_double("phase", s.phase);
    s.ring_radius = c.get_double("ring_radius", s.ring_radius);
    s.eye_height = c.get_double("eye_height", s.eye_height);
    s.pitch_down = c.get_double("pitch_down", s.pitch_down);
    s.pitch_up = c.get_double("pitch_up", s.pitch_up);
    s.validate();
    return s;
  }
};

/// The three nested reconstruction grids (coarse, medium, fine). The coarse
/// grid covers the room plus half a coarse voxel of margin on each side and
/// is centred on it; finer grids subdivide it exactly.
inline std::array<geom::GridSpec, 3> scene_grids(const Vec3& room, double voxel_size_fine) {
  const double vc = 4.0 * voxel_size_fine;
  geom::GridSpec coarse;
  coarse.voxel_size = vc;
  for (int k = 0; k < 3; ++k) {
    coarse.dims[static_cast<std::size_t>(k)] = static_cast<std::size_t>(std::ceil((room[k] + vc) / vc - 1e-9));
    coarse.origin[k] = 0.5 * (room[k] - static_cast<double>(coarse.dims[static_cast<std::size_t>(k)]) * vc);
  }
  const geom::GridSpec medium = coarse.child();
  return {coarse, medium, medium.child()};
}

/// Truncation band per scale: three voxels of that scale.
inline double truncation(const geom::GridSpec& g) { return 3.0 * g.voxel_size; }

template <class Sdf>
geom::VoxelVolume sample_tsdf(const Sdf& sdf, const geom::GridSpec& g, double trunc) {
  geom::VoxelVolume v = geom::VoxelVolume::filled(g, 1.0);
  parallel_for(g.count(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) v.values[i] = std::clamp(sdf(g.center(i)) / trunc, -1.0, 1.0);
  });
  return v;
}

struct GeneratedScene {
  std::uint64_t seed = 0;
  SceneSpec spec;
  SceneSdf sdf;
  LightingModel light;
  std::array<geom::GridSpec, 3> grids;
  std::array<geom::VoxelVolume, 3> gt_tsdf;  // coarse, medium, fine
  geom::TriangleMesh gt_mesh;
};

/// Analytic scene from a seed: furniture is placed on the floor, clear of the
/// camera ring and of each other.
inline SceneSdf make_scene_sdf(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  SceneSdf s;
  s.room = spec.room;
  const Vec3 c = 0.5 * spec.room;
  for (int n = 0; n < spec.furniture; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
      Primitive p;
      const int kind = static_cast<int>(rng() % 3);
      if (kind == 0) {
        p.kind = Primitive::Kind::Box;
        p.half = Vec3(uni(0.12, 0.3), uni(0.12, 0.3), uni(0.15, 0.4));
        p.yaw = uni(0.0, geom::kPi);
      } else if (kind == 1) {
        p.kind = Primitive::Kind::Cylinder;
        const double r = uni(0.1, 0.22);
        p.half = Vec3(r, r, uni(0.15, 0.45));
      } else {
        p.kind = Primitive::Kind::Sphere;
        p.radius = uni(0.12, 0.25);
      }
      const double foot = p.footprint();
      const double height = p.kind == Primitive::Kind::Sphere ? p.radius : p.half.z();
      if (2 * height > 0.8 * spec.room.z()) continue;
      p.center = Vec3(uni(foot + 0.02, spec.room.x() - foot - 0.02), uni(foot + 0.02, spec.room.y() - foot - 0.02), height);
      if (p.center.x() - foot < 0 || p.center.y() - foot < 0) continue;
      const double ring = std::hypot(p.center.x() - c.x(), p.center.y() - c.y());
      if (ring < spec.ring_radius + foot + 0.35) continue;
      bool clash = false;
      for (const auto& q : s.furniture)
        if (std::hypot(p.center.x() - q.center.x(), p.center.y() - q.center.y()) < foot + q.footprint() + 0.05)
          clash = true;
      if (clash) continue;
      p.albedo = Vec3(uni(0.3, 0.9), uni(0.3, 0.9), uni(0.3, 0.9));
      s.furniture.push_back(p);
      placed = true;
    }
    if (!placed) throw GenerationError("generate_scene: could not place furniture item " + std::to_string(n));
  }
  return s;
}

/// Cameras on an interior loop. `circle`: eyes on a horizontal ring around
/// the room centre, looking outward, pitch alternating down/up. `perimeter`:
/// eyes on a rectangle inset from the walls, looking at the room centre.
inline std::vector<geom::CameraModel> make_trajectory(const SceneSdf& scene, const SceneSpec& spec) {
  if (spec.n_views < 1) throw ArgumentError("make_trajectory: n_views must be at least 1");
  const Vec3 c = 0.5 * scene.room;
  const double h = spec.eye_height * scene.room.z();
  const int n = spec.n_views;
  std::vector<geom::CameraModel> cams;
  for (int k = 0; k < n; ++k) {
    const double s = (static_cast<double>(k) + spec.phase) / static_cast<double>(n);
    Vec3 eye, target;
    if (spec.pattern == "circle") {
      const double th = 2.0 * geom::kPi * s;
      const double pitch = (k % 2 == 0 ? -spec.pitch_down : spec.pitch_up) * geom::kPi / 180.0;
      eye = Vec3(c.x() + spec.ring_radius * std::cos(th), c.y() + spec.ring_radius * std::sin(th), h);
      target = eye + 0.5 * Vec3(std::cos(th) * std::cos(pitch), std::sin(th) * std::cos(pitch), std::sin(pitch));
    } else {
      const double ix = 0.3 * scene.room.x(), iy = 0.3 * scene.room.y();
      const double per = 4 * (ix + iy);
      double d = s * per;
      const Vec3 corner(c.x() - ix, c.y() - iy, h);
      if (d < 2 * ix) {
        eye = corner + Vec3(d, 0, 0);
      } else if ((d -= 2 * ix) < 2 * iy) {
        eye = corner + Vec3(2 * ix, d, 0);
      } else if ((d -= 2 * iy) < 2 * ix) {
        eye = corner + Vec3(2 * ix - d, 2 * iy, 0);
      } else {
        d -= 2 * ix;
        eye = corner + Vec3(0, 2 * iy - d, 0);
      }
      target = Vec3(c.x(), c.y(), 0.3 * scene.room.z());
    }
    if (scene(eye) <= 0.1)
      throw GenerationError("make_trajectory: view " + std::to_string(k) + " has no free-space clearance");
    cams.push_back(geom::CameraModel::make(spec.fx, spec.fy, spec.cx, spec.cy, geom::look_at(eye, target),
                                           spec.height, spec.width));
  }
  return cams;
}

inline GeneratedScene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  GeneratedScene g;
  g.seed = seed;
  g.spec = spec;
  g.sdf = make_scene_sdf(seed, spec);
  g.light = default_lighting(spec.room);
  g.grids = scene_grids(spec.room, spec.voxel_size_fine);
  for (std::size_t r = 0; r < 3; ++r) g.gt_tsdf[r] = sample_tsdf(g.sdf, g.grids[r], truncation(g.grids[r]));
  const geom::GridSpec over = g.grids[2].child();
  g.gt_mesh = geom::marching_cubes(sample_tsdf(g.sdf, over, truncation(over)));
  return g;
}

// ---------------------------------------------------------------------------
// Scene bundle on disk

struct Bundle {
  std::uint64_t seed = 0;
  SceneSpec spec;
  std::vector<geom::CameraModel> cams;
  std::vector<Tensor> images;  // 3 x H x W in [0, 1], 8-bit quantized
  geom::TriangleMesh gt_mesh;
  std::array<geom::VoxelVolume, 3> gt_tsdf;
};

inline const std::array<const char*, 3> kScaleNames = {"coarse", "medium", "fine"};

inline std::string view_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%03zu.ppm", i);
  return buf;
}

/// The bundle load_bundle would return after write_bundle, built in memory:
/// images, mesh and TSDF pass through the same serialization.
inline Bundle make_bundle(const GeneratedScene& g) {
  Bundle b;
  b.seed = g.seed;
  b.spec = g.spec;
  b.cams = make_trajectory(g.sdf, g.spec);
  for (const auto& cam : b.cams) b.images.push_back(io::parse_ppm(io::ppm_string(render_view(g.sdf, g.light, cam).image)));
  b.gt_mesh = io::parse_ply(io::ply_string(g.gt_mesh));
  for (std::size_t r = 0; r < 3; ++r) b.gt_tsdf[r] = io::parse_tsdf(io::tsdf_string(g.gt_tsdf[r]));
  return b;
}

/// Writes a bundle directory. Every file is written atomically; the caller
/// owns the policy for pre-existing directories.
inline void write_bundle(const io::fs::path& dir, const GeneratedScene& g) {
  const auto cams = make_trajectory(g.sdf, g.spec);
  io::fs::create_directories(dir / "images");
  std::vector<Mat4> poses;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const RenderedView rv = render_view(g.sdf, g.light, cams[i]);
    io::atomic_write(dir / "images" / view_name(i), io::ppm_string(rv.image));
    poses.push_back(cams[i].pose);
  }
  io::atomic_write(dir / "poses.txt", io::poses_string(poses));
  io::atomic_write(dir / "intrinsics.txt",
                   io::intrinsics_string({g.spec.fx, g.spec.fy, g.spec.cx, g.spec.cy, g.spec.width, g.spec.height}));
  io::write_ply(dir / "gt_mesh.ply", g.gt_mesh);
  for (std::size_t r = 0; r < 3; ++r)
    io::atomic_write(dir / (std::string("gt_tsdf_") + kScaleNames[r] + ".bin"), io::tsdf_string(g.gt_tsdf[r]));
  io::atomic_write(dir / "scene.toml", g.spec.to_config(g.seed).to_string());
}

inline Bundle load_bundle(const io::fs::path& dir) {
  if (!io::fs::is_directory(dir)) throw ArgumentError("scene bundle not found: " + dir.string());
  Bundle b;
  const io::Config cfg = io::Config::load(dir / "scene.toml");
  b.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  b.spec = SceneSpec::from_config(cfg);
  const io::Intrinsics K = io::parse_intrinsics(io::read_file(dir / "intrinsics.txt"));
  const auto poses = io::parse_poses(io::read_file(dir / "poses.txt"));
  for (std::size_t i = 0; i < poses.size(); ++i) {
    b.cams.push_back(geom::CameraModel::make(K.fx, K.fy, K.cx, K.cy, poses[i], K.H, K.W));
    Tensor img = io::read_ppm(dir / "images" / view_name(i));
    if (img.dim(1) != K.H || img.dim(2) != K.W)
      throw FormatError("bundle: image " + view_name(i) + " does not match intrinsics size");
    b.images.push_back(std::move(img));
  }
  b.gt_mesh = io::read_ply(dir / "gt_mesh.ply");
  for (std::size_t r = 0; r < 3; ++r)
    b.gt_tsdf[r] = io::parse_tsdf(io::read_file(dir / (std::string("gt_tsdf_") + kScaleNames[r] + ".bin")));
  return b;
}

}  // namespace ipdr::scenes
