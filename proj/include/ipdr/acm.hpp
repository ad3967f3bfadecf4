#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ipdr/autodiff.hpp"
#include "ipdr/nn.hpp"

namespace ipdr::acm {

struct AcmParams {
  ad::Var A;    // 2 x 3, acts on homogeneous normalized coordinates
  ad::Var b_c;  // C
  std::size_t C = 0;

  static AcmParams make(nn::ParamSet& ps, const std::string& name, std::size_t C) {
    AcmParams p;
    p.C = C;
    p.A = ps.add(name + ".A", Tensor::matrix({{1, 0, 0}, {0, 1, 0}}));
    p.b_c = ps.add(name + ".b_c", Tensor::full({C}, 1.0));
    return p;
  }

  static AcmParams from_tensors(Tensor A, Tensor b_c, bool trainable = false) {
    if (A.shape() != Shape{2, 3} || b_c.rank() != 1) throw DimensionError("AcmParams: A must be 2x3, b_c a vector");
    AcmParams p;
    p.C = b_c.size();
    p.A = ad::Var(std::move(A), trainable);
    p.b_c = ad::Var(std::move(b_c), trainable);
    return p;
  }
};

/// Normalized sampling grid, H x W x 2 with (x, y) per pixel; corners map to
/// (+-1, +-1) and a unit extent maps to 0.
inline Tensor make_grid(std::size_t H, std::size_t W) {
  if (H == 0 || W == 0) throw ArgumentError("make_grid: extents must be positive");
  Tensor g({H, W, 2});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      g(i, j, 0) = W > 1 ? 2.0 * static_cast<double>(j) / static_cast<double>(W - 1) - 1.0 : 0.0;
      g(i, j, 1) = H > 1 ? 2.0 * static_cast<double>(i) / static_cast<double>(H - 1) - 1.0 : 0.0;
    }
  return g;
}

inline Tensor homogeneous_grid(std::size_t H, std::size_t W) {
  Tensor g = make_grid(H, W);
  Tensor h({H * W, 3});
  for (std::size_t k = 0; k < H * W; ++k) {
    h(k, 0) = g[2 * k];
    h(k, 1) = g[2 * k + 1];
    h(k, 2) = 1.0;
  }
  return h;
}

/// AP = bilinear(R, A [g; 1]) scaled per channel by b_c after interpolation.
inline ad::Var acm_warp(const AcmParams& p, const ad::Var& R) {
  ad::detail::require_rank(R, 3, "acm_forward");
  const std::size_t C = R.dim(0), H = R.dim(1), W = R.dim(2);
  if (C != p.C) throw DimensionError("acm_forward: feature width " + std::to_string(C) + " vs " + std::to_string(p.C));
  ad::Var coords = ad::matmul(ad::constant(homogeneous_grid(H, W)), ad::transpose(p.A));
  ad::Var ap = ad::mul_colvec(ad::bilinear_sample(R, coords), p.b_c);
  return ad::reshape(ap, {C, H, W});
}

/// CR = concat(R, AP) along channels.
inline ad::Var acm_forward(const AcmParams& p, const ad::Var& R) {
  return ad::concat_rows({R, acm_warp(p, R)});
}

enum class AffineFamily { Rotation90, Reflection, Translation, Shear, Scaling, General };

struct AffineProbe {
  AffineFamily family = AffineFamily::Translation;
  int quarter_turns = 1;  // Rotation90
  int axis = 0;           // Reflection / Shear: 0 acts along x, 1 along y
  double dx = 0.0, dy = 0.0;  // Translation, in pixels
  double shear = 0.0;
};

struct ProbeReport {
  double max_error = 0.0;
  std::size_t compared = 0;
};

namespace detail {

inline Tensor warp_with(const Tensor& R, const Tensor& A) {
  ad::NoGrad guard;
  auto p = AcmParams::from_tensors(A, Tensor::full({R.dim(0)}, 1.0));
  return acm_warp(p, ad::constant(R)).value();
}

// Direct bilinear evaluation at pixel coordinates (x, y), zero outside.
inline double bilinear_at(const Tensor& R, std::size_t c, double x, double y) {
  const long H = static_cast<long>(R.dim(1)), W = static_cast<long>(R.dim(2));
  const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
  double acc = 0.0;
  for (long yy = y0; yy <= y0 + 1; ++yy)
    for (long xx = x0; xx <= x0 + 1; ++xx) {
      if (xx < 0 || yy < 0 || xx >= W || yy >= H) continue;
      const double w = (1.0 - std::abs(x - static_cast<double>(xx))) * (1.0 - std::abs(y - static_cast<double>(yy)));
      acc += w * R(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
    }
  return acc;
}

}  // namespace detail

/// Checks the lattice-exact affine invariance properties of the warp on R
/// (C x H x W) and reports the largest deviation from the exact expectation.
///  - Rotation90: warped map is an exact permutation of R (square maps only).
///  - Reflection: mirror permutation.
///  - Translation: whole-pixel shifts preserve pairwise feature distances on
///    the interior; sub-pixel shifts match a direct bilinear evaluation.
///  - Shear: the shear-invariant centre line is reproduced unchanged.
inline ProbeReport affine_invariance_probe(const Tensor& R, const AffineProbe& probe) {
  if (R.rank() != 3) throw DimensionError("affine_invariance_probe: expected C x H x W");
  const std::size_t C = R.dim(0), H = R.dim(1), W = R.dim(2);
  if (H < 2 || W < 2) throw ArgumentError("affine_invariance_probe: map must be at least 2x2");
  ProbeReport rep;
  auto note = [&rep](double a, double b) {
    rep.max_error = std::max(rep.max_error, std::abs(a - b));
    ++rep.compared;
  };

  switch (probe.family) {
    case AffineFamily::Rotation90: {
      if (H != W) throw ArgumentError("affine_invariance_probe: 90-degree rotations need a square map");
      const int k = ((probe.quarter_turns % 4) + 4) % 4;
      const double cs[4] = {1, 0, -1, 0}, sn[4] = {0, 1, 0, -1};
      Tensor A = Tensor::matrix({{cs[k], -sn[k], 0}, {sn[k], cs[k], 0}});
      Tensor out = detail::warp_with(R, A);
      const long n = static_cast<long>(W) - 1;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            // lattice image of the output pixel (i, j) under the rotation
            long si = static_cast<long>(i), sj = static_cast<long>(j);
            for (int t = 0; t < k; ++t) {
              const long ni = sj, nj = n - si;
              si = ni;
              sj = nj;
            }
            note(out(c, i, j), R(c, static_cast<std::size_t>(si), static_cast<std::size_t>(sj)));
          }
      std::vector<double> a(out.data().begin(), out.data().end()), b(R.data().begin(), R.data().end());
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      for (std::size_t i = 0; i < a.size(); ++i) note(a[i], b[i]);
      break;
    }
    case AffineFamily::Reflection: {
      Tensor A = probe.axis == 0 ? Tensor::matrix({{-1, 0, 0}, {0, 1, 0}}) : Tensor::matrix({{1, 0, 0}, {0, -1, 0}});
      Tensor out = detail::warp_with(R, A);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j)
            note(out(c, i, j), probe.axis == 0 ? R(c, i, W - 1 - j) : R(c, H - 1 - i, j));
      break;
    }
    case AffineFamily::Translation: {
      const double tx = 2.0 * probe.dx / static_cast<double>(W - 1), ty = 2.0 * probe.dy / static_cast<double>(H - 1);
      Tensor out = detail::warp_with(R, Tensor::matrix({{1, 0, tx}, {0, 1, ty}}));
      const bool whole = probe.dx == std::round(probe.dx) && probe.dy == std::round(probe.dy);
      if (whole) {
        const long sx = static_cast<long>(probe.dx), sy = static_cast<long>(probe.dy);
        std::vector<std::pair<std::size_t, std::size_t>> interior;
        for (long i = 0; i < static_cast<long>(H); ++i)
          for (long j = 0; j < static_cast<long>(W); ++j)
            if (i + sy >= 0 && i + sy < static_cast<long>(H) && j + sx >= 0 && j + sx < static_cast<long>(W))
              interior.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        auto dist = [C](const Tensor& t, std::size_t i0, std::size_t j0, std::size_t i1, std::size_t j1) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double d = t(c, i0, j0) - t(c, i1, j1);
            s += d * d;
          }
          return std::sqrt(s);
        };
        for (std::size_t a = 0; a < interior.size(); ++a)
          for (std::size_t b = a + 1; b < interior.size(); ++b) {
            const auto [i0, j0] = interior[a];
            const auto [i1, j1] = interior[b];
            note(dist(out, i0, j0, i1, j1),
                 dist(R, i0 + static_cast<std::size_t>(sy), j0 + static_cast<std::size_t>(sx),
                      i1 + static_cast<std::size_t>(sy), j1 + static_cast<std::size_t>(sx)));
          }
      } else {
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
              note(out(c, i, j), detail::bilinear_at(R, c, static_cast<double>(j) + probe.dx,
                                                     static_cast<double>(i) + probe.dy));
      }
      break;
    }
    case AffineFamily::Shear: {
      if (probe.axis == 0 && H % 2 == 0) throw ArgumentError("affine_invariance_probe: x-shear needs an odd height");
      if (probe.axis == 1 && W % 2 == 0) throw ArgumentError("affine_invariance_probe: y-shear needs an odd width");
      Tensor A = probe.axis == 0 ? Tensor::matrix({{1, probe.shear, 0}, {0, 1, 0}})
                                 : Tensor::matrix({{1, 0, 0}, {probe.shear, 1, 0}});
      Tensor out = detail::warp_with(R, A);
      for (std::size_t c = 0; c < C; ++c) {
        if (probe.axis == 0)
          for (std::size_t j = 0; j < W; ++j) note(out(c, H / 2, j), R(c, H / 2, j));
        else
          for (std::size_t i = 0; i < H; ++i) note(out(c, i, W / 2), R(c, i, W / 2));
      }
      break;
    }
    default:
      throw ArgumentError("affine_invariance_probe: transform family is not length preserving");
  }
  return rep;
}

}  // namespace ipdr::acm
