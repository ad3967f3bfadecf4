#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ipdr/autodiff.hpp"
#include "ipdr/nn.hpp"

namespace ipdr::ssm {

/// HiPPO-LegS state matrix:
///   A[n][k] = -sqrt(2n+1) sqrt(2k+1)  (n > k),  -(n+1)  (n == k),  0  (n < k).
inline Tensor hippo_init(std::size_t M) {
  if (M == 0) throw ArgumentError("hippo_init: state size must be at least 1");
  Tensor a({M, M});
  for (std::size_t n = 0; n < M; ++n)
    for (std::size_t k = 0; k <= n; ++k)
      a(n, k) = n == k ? -static_cast<double>(n + 1)
                       : -std::sqrt(2.0 * static_cast<double>(n) + 1.0) * std::sqrt(2.0 * static_cast<double>(k) + 1.0);
  return a;
}

inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

/// Continuous-time parameters. `d_raw` is the unconstrained step size; the
/// positive per-channel step is softplus(d_raw).
struct SsmParams {
  ad::Var u;        // M x M
  ad::Var w;        // C x M
  ad::Var d_raw;    // C
  ad::Var readout;  // M x C_out
  std::size_t M = 0, C = 0, C_out = 0;

  static SsmParams make(nn::ParamSet& ps, const std::string& name, std::size_t C, std::size_t M, std::size_t C_out,
                        nn::Rng& rng, double d0 = 0.1) {
    SsmParams p;
    p.M = M;
    p.C = C;
    p.C_out = C_out;
    p.u = ps.add(name + ".u", hippo_init(M));
    p.w = ps.add(name + ".w", nn::randn({C, M}, 1.0 / std::sqrt(static_cast<double>(C)), rng));
    p.d_raw = ps.add(name + ".d", Tensor::full({C}, softplus_inverse(d0)));
    p.readout = ps.add(name + ".readout", nn::randn({M, C_out}, 1.0 / std::sqrt(static_cast<double>(M)), rng));
    return p;
  }

  /// Parameters built from fixed tensors (no registry); used by probes and tests.
  static SsmParams from_tensors(Tensor u, Tensor w, Tensor d, Tensor readout, bool trainable = false) {
    SsmParams p;
    p.M = u.dim(0);
    p.C = w.dim(0);
    p.C_out = readout.dim(1);
    if (u.rank() != 2 || u.dim(1) != p.M || w.rank() != 2 || w.dim(1) != p.M || d.size() != p.C ||
        readout.dim(0) != p.M)
      throw DimensionError("SsmParams: inconsistent shapes");
    Tensor draw(d.shape());
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(d[i] > 0.0)) throw ArgumentError("SsmParams: step size must be positive");
      draw[i] = softplus_inverse(d[i]);
    }
    p.u = ad::Var(std::move(u), trainable);
    p.w = ad::Var(std::move(w), trainable);
    p.d_raw = ad::Var(std::move(draw), trainable);
    p.readout = ad::Var(std::move(readout), trainable);
    return p;
  }

  ad::Var d() const { return ad::softplus(d_raw); }
};

/// Zero-order-hold form, one (q_hat, w_hat) pair per input channel because
/// each channel carries its own step size.
struct DiscretizedSsm {
  std::vector<ad::Var> q_hat;  // C entries, each M x M
  std::vector<ad::Var> w_hat;  // C entries, each M x 1
};

/// exp([[d u, d w_c^T], [0, 0]]) = [[e^{du}, (e^{du} - I) u^{-1} w_c^T], [0, 1]].
inline std::pair<ad::Var, ad::Var> discretize_channel(const ad::Var& u, const ad::Var& w_row, const ad::Var& d) {
  const std::size_t M = u.dim(0);
  ad::Var du = ad::mul_scalar(u, d);
  ad::Var dw = ad::mul_scalar(ad::transpose(w_row), d);
  ad::Var aug = ad::pad_to(ad::concat_cols({du, dw}), M + 1, M + 1);
  ad::Var e = ad::matexp(aug);
  ad::Var top = ad::slice_rows(e, 0, M);
  return {ad::slice_cols(top, 0, M), ad::slice_cols(top, M, M + 1)};
}

inline DiscretizedSsm discretize(const SsmParams& p) {
  if (!p.u.value().all_finite() || !p.w.value().all_finite() || !p.d_raw.value().all_finite())
    throw NumericError("discretize: non-finite parameters");
  DiscretizedSsm out;
  ad::Var d = p.d();
  for (std::size_t c = 0; c < p.C; ++c) {
    auto [q, wh] = discretize_channel(p.u, ad::slice_rows(p.w, c, c + 1), ad::slice_rows(d, c, c + 1));
    out.q_hat.push_back(std::move(q));
    out.w_hat.push_back(std::move(wh));
  }
  return out;
}

/// Summed per-channel state trajectories for a serialized sequence x (T x C).
inline ad::Var scan_states(const DiscretizedSsm& disc, const ad::Var& x) {
  const std::size_t C = disc.q_hat.size();
  if (x.dim(1) != C) throw DimensionError("scan: sequence has " + std::to_string(x.dim(1)) + " channels, expected " +
                                          std::to_string(C));
  const std::size_t M = disc.q_hat[0].dim(0);
  ad::Var h0 = ad::constant(Tensor({M}));
  ad::Var acc;
  for (std::size_t c = 0; c < C; ++c) {
    ad::Var hc = ad::scan_linear(disc.q_hat[c], disc.w_hat[c], ad::slice_cols(x, c, c + 1), h0);
    acc = acc.defined() ? ad::add(acc, hc) : hc;
  }
  return acc;
}

/// Bidirectional scan of a serialized sequence x (T x C) -> T x C_out.
inline ad::Var sequence_scan(const SsmParams& p, const DiscretizedSsm& disc, const ad::Var& x) {
  ad::Var hf = scan_states(disc, x);
  ad::Var hr = ad::reverse_rows(scan_states(disc, ad::reverse_rows(x)));
  return ad::matmul(ad::scale(ad::add(hf, hr), 0.5), p.readout);
}

/// C x H x W  <->  (H*W) x C in raster order.
inline ad::Var serialize(const ad::Var& feat) {
  ad::detail::require_rank(feat, 3, "serialize");
  return ad::transpose(ad::reshape(feat, {feat.dim(0), feat.dim(1) * feat.dim(2)}));
}

inline ad::Var deserialize(const ad::Var& seq, std::size_t H, std::size_t W) {
  return ad::reshape(ad::transpose(seq), {seq.dim(1), H, W});
}

/// Raster-order bidirectional image-plane scan: C x H x W -> C_out x H x W.
inline ad::Var plane_scan(const SsmParams& p, const ad::Var& feat) {
  ad::detail::require_rank(feat, 3, "plane_scan");
  if (feat.dim(0) != p.C)
    throw DimensionError("plane_scan: feature width " + std::to_string(feat.dim(0)) + " vs " + std::to_string(p.C));
  const DiscretizedSsm disc = discretize(p);
  return deserialize(sequence_scan(p, disc, serialize(feat)), feat.dim(1), feat.dim(2));
}

}  // namespace ipdr::ssm
