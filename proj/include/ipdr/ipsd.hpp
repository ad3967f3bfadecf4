#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipdr/geometry.hpp"
#include "ipdr/nn.hpp"
#include "ipdr/ssm.hpp"

namespace ipdr::ipsd {

/// Number of per-voxel ray-geometry cues appended to back-projected features:
/// z-depth in metres and the unit viewing direction in world axes.
inline constexpr std::size_t kCueWidth = 4;

struct IpsdParams {
  nn::Linear proj;       // 2C -> C_s
  ssm::SsmParams ssm_A;  // C_s -> C_s
  nn::Linear bias_net;   // pooled 2C -> C_s
  nn::Mlp2 mlp_d;        // [C_s + C_bp] -> C_bp, added to the residual input
  std::size_t C_cr = 0, C_s = 0, C_bp = 0;

  /// C_bp is the back-projection width including cues when they are used.
  static IpsdParams make(nn::ParamSet& ps, const std::string& name, std::size_t C_cr, std::size_t C_s,
                         std::size_t C_bp, std::size_t M, std::size_t hidden, nn::Rng& rng) {
    IpsdParams p;
    p.C_cr = C_cr;
    p.C_s = C_s;
    p.C_bp = C_bp;
    p.proj = nn::Linear::make(ps, name + ".proj", C_cr, C_s, rng);
    p.ssm_A = ssm::SsmParams::make(ps, name + ".ssm", C_s, M, C_s, rng);
    p.bias_net = nn::Linear::make(ps, name + ".bias", C_cr, C_s, rng);
    p.mlp_d = nn::Mlp2::make(ps, name + ".mlp_d", C_s + C_bp, hidden, C_bp, rng);
    return p;
  }
};

/// State = scan(proj(serialize(CR))) + bias_net(mean over pixels of CR),
/// returned as C_s x H x W. `disc` must come from p.ssm_A.
inline ad::Var state_project(const IpsdParams& p, const ad::Var& CR, const ssm::DiscretizedSsm& disc) {
  ad::detail::require_rank(CR, 3, "state_project");
  if (CR.dim(0) != p.C_cr)
    throw DimensionError("state_project: CR width " + std::to_string(CR.dim(0)) + ", expected " +
                         std::to_string(p.C_cr));
  if (!CR.value().all_finite()) throw NumericError("state_project: non-finite input");
  const std::size_t H = CR.dim(1), W = CR.dim(2);
  ad::Var seq = ssm::serialize(CR);
  ad::Var s = ssm::sequence_scan(p.ssm_A, disc, p.proj(seq));
  ad::Var b = p.bias_net(ad::reshape(ad::mean_rows(seq), {1, p.C_cr}));
  return ssm::deserialize(ad::add_rowvec(s, b), H, W);
}

inline ad::Var state_project(const IpsdParams& p, const ad::Var& CR) {
  return state_project(p, CR, ssm::discretize(p.ssm_A));
}

struct CostVolume {
  ad::Var features;  // K x C_bp, zero rows for invalid voxels
  std::vector<std::uint8_t> valid;
  std::size_t level = 0;
};

/// K x kCueWidth cue rows for the listed voxels; zero where invalid.
inline Tensor ray_cues(const geom::GridSpec& grid, const std::vector<std::size_t>& voxels,
                       const geom::VoxelProjection& proj, const geom::CameraModel& cam) {
  Tensor cues({voxels.size(), kCueWidth});
  const geom::Vec3 o = cam.center();
  for (std::size_t k = 0; k < voxels.size(); ++k) {
    if (!proj.valid[k]) continue;
    const geom::Vec3 d = (grid.center(voxels[k]) - o).normalized();
    cues(k, 0) = proj.depth[k];
    cues(k, 1) = d.x();
    cues(k, 2) = d.y();
    cues(k, 3) = d.z();
  }
  return cues;
}

/// TCV = F_BP' + MLP_D([F_spatial(state), F_BP']) where F_BP' is the
/// back-projected feature, optionally extended by ray cues, and F_spatial
/// samples `state` at each voxel's projection. Invalid voxels stay zero.
inline CostVolume build_cost_volume(const IpsdParams& p, const ad::Var& state, const geom::BackProjection& f_bp,
                                    const geom::CameraModel& cam, const geom::GridSpec& grid,
                                    const std::vector<std::size_t>& voxels, bool with_cues, std::size_t level = 0) {
  ad::detail::require_rank(state, 3, "build_cost_volume");
  const std::size_t K = voxels.size();
  if (state.dim(0) != p.C_s) throw DimensionError("build_cost_volume: state width mismatch");
  if (f_bp.proj.valid.size() != K || f_bp.features.dim(0) != K)
    throw ArgumentError("build_cost_volume: back-projection does not cover the voxel list");
  if (cam.W % state.dim(2) != 0 || cam.H % state.dim(1) != 0 || cam.W / state.dim(2) != cam.H / state.dim(1))
    throw ArgumentError("build_cost_volume: state map is not an integer-stride reduction of the camera image");
  for (auto v : voxels)
    if (v >= grid.count()) throw ArgumentError("build_cost_volume: voxel index outside the grid");
  ad::Var bp = f_bp.features;
  if (with_cues) bp = ad::concat_cols({bp, ad::constant(ray_cues(grid, voxels, f_bp.proj, cam))});
  if (bp.dim(1) != p.C_bp)
    throw DimensionError("build_cost_volume: back-projection width " + std::to_string(bp.dim(1)) + ", expected " +
                         std::to_string(p.C_bp));
  ad::Var spatial = ad::transpose(ad::bilinear_sample(state, ad::constant(f_bp.proj.coords)));
  ad::Var tcv = ad::add(bp, p.mlp_d(ad::concat_cols({spatial, bp})));
  Tensor mask({K});
  for (std::size_t k = 0; k < K; ++k) mask[k] = f_bp.proj.valid[k] ? 1.0 : 0.0;
  return {ad::mul_colvec(tcv, ad::constant(std::move(mask))), f_bp.proj.valid, level};
}

}  // namespace ipdr::ipsd
