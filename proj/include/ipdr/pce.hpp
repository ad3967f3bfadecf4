#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipdr/nn.hpp"
#include "ipdr/ssm.hpp"

namespace ipdr::pce {

struct PceParams {
  ssm::SsmParams ssm;
  nn::Mlp2 mlp_e;
  nn::Linear conf_head;
  std::size_t C_in = 0, C_r = 0;

  static PceParams make(nn::ParamSet& ps, const std::string& name, std::size_t C_in, std::size_t C_r, std::size_t M,
                        nn::Rng& rng) {
    PceParams p;
    p.C_in = C_in;
    p.C_r = C_r;
    p.ssm = ssm::SsmParams::make(ps, name + ".ssm", C_in, M, C_r, rng);
    p.conf_head = nn::Linear::make(ps, name + ".conf", C_r, 1, rng);
    p.mlp_e = nn::Mlp2::make(ps, name + ".mlp_e", C_r, 2 * C_r, C_r, rng);
    return p;
  }
};

struct PceOutput {
  ad::Var encoded;     // C_r x H x W
  ad::Var confidence;  // 1 x H x W, in (0, 1)
};

/// Light-cluster mapping by plane scan, scalar sigmoid confidence per pixel,
/// confidence-gated mapping, then MLP_E. `disc` must come from p.ssm; pass it
/// to share one discretization across several images.
inline PceOutput pce_forward(const PceParams& p, const ad::Var& feat, const ssm::DiscretizedSsm& disc) {
  ad::detail::require_rank(feat, 3, "pce_forward");
  if (feat.dim(0) != p.C_in)
    throw DimensionError("pce_forward: input width " + std::to_string(feat.dim(0)) + ", expected " +
                         std::to_string(p.C_in));
  const std::size_t H = feat.dim(1), W = feat.dim(2);
  ad::Var L = ssm::sequence_scan(p.ssm, disc, ssm::serialize(feat));  // T x C_r
  ad::Var conf = ad::sigmoid(p.conf_head(L));                          // T x 1
  ad::Var gated = ad::mul_colvec(L, conf);
  ad::Var enc = p.mlp_e(gated);
  return {ssm::deserialize(enc, H, W), ssm::deserialize(conf, H, W)};
}

inline PceOutput pce_forward(const PceParams& p, const ad::Var& feat) {
  return pce_forward(p, feat, ssm::discretize(p.ssm));
}

/// Pixels whose confidence reaches tau (row-major H x W, 1 = kept).
inline std::vector<std::uint8_t> confidence_mask(const PceOutput& out, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ArgumentError("confidence_mask: threshold must lie in (0, 1)");
  const Tensor& c = out.confidence.value();
  std::vector<std::uint8_t> mask(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) mask[i] = c[i] >= tau ? 1 : 0;
  return mask;
}

}  // namespace ipdr::pce
