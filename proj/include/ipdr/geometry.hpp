#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ipdr/autodiff.hpp"
#include "ipdr/parallel.hpp"

namespace ipdr::geom {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

constexpr double kPi = 3.14159265358979323846;

/// Pinhole camera, OpenCV axes (x right, y down, z forward). `pose` maps
/// camera coordinates to world coordinates. Pixel (j, i) has its centre at
/// u = j, v = i.
struct CameraModel {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Mat4 pose = Mat4::Identity();
  std::size_t H = 1, W = 1;

  static CameraModel make(double fx, double fy, double cx, double cy, const Mat4& pose, std::size_t H,
                          std::size_t W) {
    if (!(fx > 0 && fy > 0)) throw ArgumentError("camera: focal lengths must be positive");
    if (H == 0 || W == 0) throw ArgumentError("camera: image size must be positive");
    if (!pose.allFinite()) throw ArgumentError("camera: non-finite pose");
    const Mat3 R = pose.topLeftCorner<3, 3>();
    if ((R.transpose() * R - Mat3::Identity()).norm() >= 1e-8 || R.determinant() <= 0)
      throw ArgumentError("camera: pose rotation is not a proper orthonormal matrix");
    if ((pose.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).norm() > 1e-12)
      throw ArgumentError("camera: pose bottom row must be 0 0 0 1");
    CameraModel c;
    c.fx = fx;
    c.fy = fy;
    c.cx = cx;
    c.cy = cy;
    c.pose = pose;
    c.H = H;
    c.W = W;
    return c;
  }

  Mat3 rotation() const { return pose.topLeftCorner<3, 3>(); }
  Vec3 center() const { return pose.topRightCorner<3, 1>(); }

  Vec3 world_to_camera(const Vec3& p) const { return rotation().transpose() * (p - center()); }

  /// Pixel coordinates and z-depth of a world point; false when behind the camera.
  bool project(const Vec3& p, double& u, double& v, double& z) const {
    const Vec3 c = world_to_camera(p);
    z = c.z();
    if (!(z > 0)) return false;
    u = fx * c.x() / z + cx;
    v = fy * c.y() / z + cy;
    return true;
  }

  bool in_image(double u, double v) const {
    return u >= 0 && v >= 0 && u <= static_cast<double>(W - 1) && v <= static_cast<double>(H - 1);
  }

  /// World-frame ray direction with unit z-component in the camera frame, so
  /// the ray parameter equals z-depth.
  Vec3 ray_direction(double u, double v) const { return rotation() * Vec3((u - cx) / fx, (v - cy) / fy, 1.0); }

  Vec3 unproject(double u, double v, double depth) const { return center() + depth * ray_direction(u, v); }
};

/// Builds a world-from-camera pose looking from `eye` towards `target`.
inline Mat4 look_at(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3(0, 0, 1)) {
  Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3(0, 1, 0));
  x.normalize();
  Vec3 y = z.cross(x);
  Mat4 P = Mat4::Identity();
  P.block<3, 1>(0, 0) = x;
  P.block<3, 1>(0, 1) = y;
  P.block<3, 1>(0, 2) = z;
  P.block<3, 1>(0, 3) = eye;
  return P;
}

/// Axis-aligned voxel grid. `origin` is the minimum corner; voxel (i, j, k)
/// has its centre at origin + (idx + 0.5) * voxel_size. Linear index runs x
/// fastest.
struct GridSpec {
  Vec3 origin = Vec3::Zero();
  double voxel_size = 1.0;
  std::array<std::size_t, 3> dims{0, 0, 0};

  std::size_t count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (k * dims[1] + j) * dims[0] + i; }
  std::array<std::size_t, 3> coords(std::size_t idx) const {
    return {idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])};
  }
  Vec3 center(std::size_t i, std::size_t j, std::size_t k) const {
    return origin + voxel_size * Vec3(static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5,
                                      static_cast<double>(k) + 0.5);
  }
  Vec3 center(std::size_t idx) const {
    auto c = coords(idx);
    return center(c[0], c[1], c[2]);
  }
  /// Grid at twice the resolution over the same extent.
  GridSpec child() const { return {origin, voxel_size / 2, {dims[0] * 2, dims[1] * 2, dims[2] * 2}}; }

  bool same_as(const GridSpec& o) const {
    return dims == o.dims && voxel_size == o.voxel_size && origin == o.origin;
  }
};

/// Scalar-payload volume (TSDF), with per-voxel validity.
struct VoxelVolume {
  GridSpec grid;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;

  static VoxelVolume filled(const GridSpec& g, double v) {
    return {g, std::vector<double>(g.count(), v), std::vector<std::uint8_t>(g.count(), 1)};
  }
};

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) { return 0.5 * (b - a).cross(c - a).norm(); }

// ---------------------------------------------------------------------------
// Keyframes

inline double rotation_angle_deg(const Mat3& a, const Mat3& b) {
  const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * 180.0 / kPi;
}

/// Greedy sweep: keep frame i when it moved at least t_min metres or turned at
/// least r_min degrees relative to the last kept frame. Truncated to n_max.
inline std::vector<std::size_t> select_keyframes(const std::vector<CameraModel>& cams, std::size_t n_max,
                                                 double t_min = 0.1, double r_min = 15.0) {
  if (cams.empty()) throw ArgumentError("select_keyframes: no poses");
  if (n_max == 0) throw ArgumentError("select_keyframes: n_max must be positive");
  std::vector<std::size_t> keep{0};
  for (std::size_t i = 1; i < cams.size() && keep.size() < n_max; ++i) {
    const CameraModel& last = cams[keep.back()];
    const double dt = (cams[i].center() - last.center()).norm();
    const double dr = rotation_angle_deg(last.rotation(), cams[i].rotation());
    if (dt >= t_min || dr >= r_min) keep.push_back(i);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// Projection of voxel centres onto a (possibly strided) feature map

struct VoxelProjection {
  Tensor coords;                      // K x 2 normalized feature-map coordinates
  std::vector<std::uint8_t> valid;    // K
  std::vector<double> depth;          // K, z-depth (0 when behind the camera)
  std::vector<double> px, py;         // K, image pixel coordinates
};

/// Coordinate used for voxels that must sample nothing; far outside [-1, 1].
constexpr double kOutside = -8.0;

/// Projects voxel centres into a feature map of size fh x fw derived from the
/// camera image by an integer stride. A voxel is valid iff it lies in front of
/// the camera, inside the image, and (when a mask is given) on a kept pixel of
/// the feature map.
inline VoxelProjection project_voxels(const GridSpec& grid, const std::vector<std::size_t>& voxels,
                                      const CameraModel& cam, std::size_t fh, std::size_t fw,
                                      const std::vector<std::uint8_t>* mask = nullptr) {
  if (fh == 0 || fw == 0 || cam.W % fw != 0 || cam.H % fh != 0 || cam.W / fw != cam.H / fh)
    throw ArgumentError("project_voxels: feature map is not an integer-stride reduction of the image");
  if (mask && mask->size() != fh * fw) throw ArgumentError("project_voxels: mask size does not match feature map");
  const double stride = static_cast<double>(cam.W / fw);
  const std::size_t K = voxels.size();
  VoxelProjection pr;
  pr.coords = Tensor({K, 2});
  pr.valid.assign(K, 0);
  pr.depth.assign(K, 0.0);
  pr.px.assign(K, 0.0);
  pr.py.assign(K, 0.0);
  const double sx = fw > 1 ? 2.0 / static_cast<double>(fw - 1) : 0.0;
  const double sy = fh > 1 ? 2.0 / static_cast<double>(fh - 1) : 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    if (voxels[k] >= grid.count()) throw ArgumentError("project_voxels: voxel index out of range");
    const Vec3 c = cam.world_to_camera(grid.center(voxels[k]));
    pr.coords(k, 0) = kOutside;
    pr.coords(k, 1) = kOutside;
    if (!(c.z() > 0)) continue;
    const double u = cam.fx * c.x() / c.z() + cam.cx, v = cam.fy * c.y() / c.z() + cam.cy;
    pr.depth[k] = c.z();
    pr.px[k] = u;
    pr.py[k] = v;
    if (!cam.in_image(u, v)) continue;
    const double fu = u / stride, fv = v / stride;
    if (mask) {
      const auto mi = std::min(fh - 1, static_cast<std::size_t>(std::lround(fv)));
      const auto mj = std::min(fw - 1, static_cast<std::size_t>(std::lround(fu)));
      if (!(*mask)[mi * fw + mj]) continue;
    }
    pr.valid[k] = 1;
    pr.coords(k, 0) = fw > 1 ? fu * sx - 1.0 : 0.0;
    pr.coords(k, 1) = fh > 1 ? fv * sy - 1.0 : 0.0;
  }
  return pr;
}

inline std::vector<std::size_t> all_voxels(const GridSpec& g) {
  std::vector<std::size_t> v(g.count());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

struct BackProjection {
  ad::Var features;  // K x C, zero rows for invalid voxels
  VoxelProjection proj;
};

/// Lifts feat (C x fh x fw) to the listed voxels by bilinear sampling at each
/// voxel's projection.
inline BackProjection back_project(const GridSpec& grid, const std::vector<std::size_t>& voxels, const ad::Var& feat,
                                   const CameraModel& cam, const std::vector<std::uint8_t>* mask = nullptr) {
  ad::detail::require_rank(feat, 3, "back_project");
  BackProjection bp;
  bp.proj = project_voxels(grid, voxels, cam, feat.dim(1), feat.dim(2), mask);
  bp.features = ad::transpose(ad::bilinear_sample(feat, ad::constant(bp.proj.coords)));
  return bp;
}

// ---------------------------------------------------------------------------
// Depth rendering

struct DepthImage {
  std::size_t H = 0, W = 0;
  std::vector<double> depth;  // row-major, +inf where no surface
  double at(std::size_t i, std::size_t j) const { return depth[i * W + j]; }
};

/// Per-pixel nearest intersection (z-depth) with the mesh. Triangles are
/// bucketed by the image rows their projection can touch; triangles crossing
/// the camera plane are tested against every row.
inline DepthImage render_depth(const TriangleMesh& mesh, const CameraModel& cam) {
  DepthImage img{cam.H, cam.W, std::vector<double>(cam.H * cam.W, std::numeric_limits<double>::infinity())};
  const Mat3 Rt = cam.rotation().transpose();
  const Vec3 t = cam.center();
  std::vector<Vec3> vc(mesh.vertices.size());
  for (std::size_t i = 0; i < vc.size(); ++i) vc[i] = Rt * (mesh.vertices[i] - t);

  struct Span {
    std::size_t tri;
    long j0, j1;
  };
  std::vector<std::vector<Span>> rows(cam.H);
  const long Hl = static_cast<long>(cam.H), Wl = static_cast<long>(cam.W);
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& tri = mesh.faces[f];
    const Vec3 *a = &vc[tri[0]], *b = &vc[tri[1]], *c = &vc[tri[2]];
    if (a->z() <= 0 && b->z() <= 0 && c->z() <= 0) continue;
    long i0 = 0, i1 = Hl - 1, j0 = 0, j1 = Wl - 1;
    if (a->z() > 1e-9 && b->z() > 1e-9 && c->z() > 1e-9) {
      double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
      for (const Vec3* p : {a, b, c}) {
        const double u = cam.fx * p->x() / p->z() + cam.cx, v = cam.fy * p->y() / p->z() + cam.cy;
        umin = std::min(umin, u);
        umax = std::max(umax, u);
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
      }
      j0 = std::max(0L, static_cast<long>(std::floor(umin)) - 1);
      j1 = std::min(Wl - 1, static_cast<long>(std::ceil(umax)) + 1);
      i0 = std::max(0L, static_cast<long>(std::floor(vmin)) - 1);
      i1 = std::min(Hl - 1, static_cast<long>(std::ceil(vmax)) + 1);
      if (j0 > j1 || i0 > i1) continue;
    }
    for (long i = i0; i <= i1; ++i) rows[static_cast<std::size_t>(i)].push_back({f, j0, j1});
  }

  parallel_for(cam.H, [&](std::size_t rb, std::size_t re) {
    for (std::size_t i = rb; i < re; ++i) {
      const double dy = (static_cast<double>(i) - cam.cy) / cam.fy;
      for (const Span& s : rows[i]) {
        const auto& tri = mesh.faces[s.tri];
        const Vec3& p0 = vc[tri[0]];
        const Vec3 e1 = vc[tri[1]] - p0, e2 = vc[tri[2]] - p0;
        for (long j = s.j0; j <= s.j1; ++j) {
          // Moller-Trumbore with ray origin 0 and direction (dx, dy, 1)
          const Vec3 d((static_cast<double>(j) - cam.cx) / cam.fx, dy, 1.0);
          const Vec3 pv = d.cross(e2);
          const double det = e1.dot(pv);
          if (std::abs(det) < 1e-14) continue;
          const double inv = 1.0 / det;
          const Vec3 tv = -p0;
          const double bu = tv.dot(pv) * inv;
          if (bu < 0.0 || bu > 1.0) continue;
          const Vec3 qv = tv.cross(e1);
          const double bv = d.dot(qv) * inv;
          if (bv < 0.0 || bu + bv > 1.0) continue;
          const double z = e2.dot(qv) * inv;
          double& slot = img.depth[i * cam.W + static_cast<std::size_t>(j)];
          if (z > 1e-9 && z < slot) slot = z;
        }
      }
    }
  });
  return img;
}

}  // namespace ipdr::geom
