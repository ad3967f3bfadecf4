#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "ipdr/grad_check.hpp"
#include "ipdr/ipsd.hpp"
#include "test_util.hpp"

using namespace ipdr;
using namespace ipdr::geom;
using testutil::uniform;

namespace {

ipsd::IpsdParams make_params(nn::ParamSet& ps, std::size_t C_cr, std::size_t C_s, std::size_t C_bp, std::size_t M,
                             std::uint64_t seed) {
  nn::Rng rng(seed);
  auto p = ipsd::IpsdParams::make(ps, "ipsd", C_cr, C_s, C_bp, M, 6, rng);
  // non-zero biases so the oracles see every term
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (ad::Var* b : {&p.proj.b, &p.bias_net.b, &p.mlp_d.l1.b, &p.mlp_d.l2.b})
    for (auto& v : b->mutable_value().data()) v = u(rng);
  return p;
}

CameraModel camera(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  const Mat4 P = look_at(Vec3(0.2 + u(rng), -1.2 + u(rng), 0.3 + u(rng)), Vec3(u(rng), u(rng), u(rng)));
  return CameraModel::make(50, 50, 31.5, 23.5, P, 48, 64);
}

void zero(ad::Var& v) {
  auto d = v.mutable_value().data();
  std::fill(d.begin(), d.end(), 0.0);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

// y = x W + b accumulated in input order, as a plain loop
std::vector<double> affine(const std::vector<double>& x, const nn::Linear& l) {
  const Tensor &w = l.w.value(), &b = l.b.value();
  std::vector<double> y(l.out, 0.0);
  for (std::size_t j = 0; j < l.out; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < l.in; ++i) acc += x[i] * w(i, j);
    y[j] = acc + b[j];
  }
  return y;
}

double pixel_bilinear(const Tensor& f, std::size_t c, double x, double y) {
  const long H = static_cast<long>(f.dim(1)), W = static_cast<long>(f.dim(2));
  const long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
  double s = 0.0;
  for (long yy = y0; yy <= y0 + 1; ++yy)
    for (long xx = x0; xx <= x0 + 1; ++xx)
      if (xx >= 0 && yy >= 0 && xx < W && yy < H)
        s += (1 - std::abs(x - xx)) * (1 - std::abs(y - yy)) * f(c, std::size_t(yy), std::size_t(xx));
  return s;
}

}  // namespace

TEST_CASE("state_project shapes and errors") {
  nn::ParamSet ps;
  auto p = make_params(ps, 6, 4, 5, 4, 1);
  ad::Var s = ipsd::state_project(p, ad::constant(uniform({6, 3, 5}, 2)));
  CHECK(s.shape() == Shape{4, 3, 5});
  CHECK(s.value().all_finite());
  CHECK_THROWS_AS(ipsd::state_project(p, ad::constant(uniform({5, 3, 5}, 2))), DimensionError);
  CHECK_THROWS_AS(ipsd::state_project(p, ad::constant(uniform({6, 15}, 2))), DimensionError);
  Tensor bad = uniform({6, 2, 2}, 3);
  bad[1] = std::nan("");
  CHECK_THROWS_AS(ipsd::state_project(p, ad::constant(bad)), NumericError);
}

TEST_CASE("zero projection leaves the dynamic bias at every pixel") {
  nn::ParamSet ps;
  auto p = make_params(ps, 6, 4, 5, 4, 4);
  zero(p.proj.w);
  zero(p.proj.b);
  Tensor cr = uniform({6, 4, 5}, 5);
  Tensor s = ipsd::state_project(p, ad::constant(cr)).value();
  std::vector<double> pooled(6, 0.0);
  for (std::size_t c = 0; c < 6; ++c) {
    double acc = 0.0;
    for (std::size_t t = 0; t < 20; ++t) acc += cr[c * 20 + t];
    pooled[c] = acc * (1.0 / 20.0);
  }
  const auto b = affine(pooled, p.bias_net);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 20; ++t) CHECK(s[c * 20 + t] == b[c]);
}

TEST_CASE("single pixel state is a readout of one step plus bias") {
  nn::ParamSet ps;
  auto p = make_params(ps, 4, 3, 5, 5, 6);
  Tensor cr = uniform({4, 1, 1}, 7);
  Tensor s = ipsd::state_project(p, ad::constant(cr)).value();
  const std::vector<double> x(cr.data().begin(), cr.data().end());
  const auto proj = affine(x, p.proj);
  const auto bias = affine(x, p.bias_net);
  auto disc = ssm::discretize(p.ssm_A);
  std::vector<double> h(5, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t m = 0; m < 5; ++m) h[m] += disc.w_hat[c].value()[m] * proj[c];
  for (std::size_t o = 0; o < 3; ++o) {
    double y = 0.0;  // forward and reverse scans agree on one step
    for (std::size_t m = 0; m < 5; ++m) y += h[m] * p.ssm_A.readout.value()(m, o);
    CHECK(std::abs(s[o] - (y + bias[o])) < 1e-12);
  }
}

TEST_CASE("state_project is linear in CR once the bias is removed") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    nn::ParamSet ps;
    auto p = make_params(ps, 6, 4, 5, 6, 10 + seed);
    zero(p.proj.b);
    Tensor x = uniform({6, 3, 4}, 20 + seed);
    auto centred = [&](const Tensor& cr) {
      Tensor s = ipsd::state_project(p, ad::constant(cr)).value();
      std::vector<double> pooled(6, 0.0);
      for (std::size_t c = 0; c < 6; ++c) {
        for (std::size_t t = 0; t < 12; ++t) pooled[c] += cr[c * 12 + t];
        pooled[c] /= 12.0;
      }
      const auto b = affine(pooled, p.bias_net);
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t t = 0; t < 12; ++t) s[c * 12 + t] -= b[c];
      return s;
    };
    const Tensor base = centred(x);
    for (double alpha : {-1.5, 0.3, 2.0, 7.0}) {
      Tensor xa = x;
      for (auto& v : xa.data()) v *= alpha;
      const Tensor sa = centred(xa);
      for (std::size_t i = 0; i < sa.size(); ++i) CHECK(std::abs(sa[i] - alpha * base[i]) < 1e-10);
    }
  }
}

TEST_CASE("build_cost_volume matches a per-voxel oracle on an 8^3 grid") {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    std::mt19937_64 rng(seed);
    GridSpec g{Vec3(-0.4, -0.4, -0.4), 0.1, {8, 8, 8}};
    const CameraModel cam = camera(rng);
    const std::size_t stride = 2 + 2 * (seed % 2);
    const std::size_t fh = cam.H / stride, fw = cam.W / stride;
    const bool cues = seed % 3 != 0;
    const std::size_t C = 3, C_s = 4, C_bp = C + (cues ? ipsd::kCueWidth : 0);
    nn::ParamSet ps;
    auto p = make_params(ps, 6, C_s, C_bp, 4, 30 + seed);
    Tensor feat = uniform({C, fh, fw}, seed + 100);
    Tensor state = uniform({C_s, fh, fw}, seed + 200);
    std::vector<std::uint8_t> mask(fh * fw);
    for (auto& m : mask) m = rng() % 4 != 0;
    const auto vox = all_voxels(g);
    auto bp = back_project(g, vox, ad::constant(feat), cam, &mask);
    auto cv = ipsd::build_cost_volume(p, ad::constant(state), bp, cam, g, vox, cues, 2);
    CHECK(cv.level == 2);
    REQUIRE(cv.features.shape() == Shape{g.count(), C_bp});
    const Tensor& out = cv.features.value();
    std::size_t n_valid = 0;
    for (std::size_t v = 0; v < g.count(); ++v) {
      REQUIRE(cv.valid[v] == bp.proj.valid[v]);
      if (!cv.valid[v]) {
        for (std::size_t c = 0; c < C_bp; ++c) CHECK(out(v, c) == 0.0);
        continue;
      }
      ++n_valid;
      // scalar chain: project, sample state and features, append cues, MLP, residual
      const Vec3 pc = cam.world_to_camera(g.center(v));
      const double u = cam.fx * pc.x() / pc.z() + cam.cx, w = cam.fy * pc.y() / pc.z() + cam.cy;
      Tensor coord({1, 2}, {(u / stride) * (2.0 / (fw - 1)) - 1.0, (w / stride) * (2.0 / (fh - 1)) - 1.0});
      const Tensor ss = ad::bilinear_sample(ad::constant(state), ad::constant(coord)).value();
      const Tensor fs = ad::bilinear_sample(ad::constant(feat), ad::constant(coord)).value();
      for (std::size_t c = 0; c < C_s; ++c) CHECK(std::abs(ss[c] - pixel_bilinear(state, c, u / stride, w / stride)) < 1e-12);
      std::vector<double> in(ss.data().begin(), ss.data().end());
      std::vector<double> bpv(fs.data().begin(), fs.data().end());
      if (cues) {
        const Vec3 d = (g.center(v) - cam.center()).normalized();
        bpv.insert(bpv.end(), {pc.z(), d.x(), d.y(), d.z()});
      }
      in.insert(in.end(), bpv.begin(), bpv.end());
      auto hid = affine(in, p.mlp_d.l1);
      for (auto& h : hid) h = gelu(h);
      const auto y = affine(hid, p.mlp_d.l2);
      for (std::size_t c = 0; c < C_bp; ++c) CHECK(out(v, c) == (bpv[c] + y[c]) * 1.0);
    }
    CHECK(n_valid > 20);
  }
}

TEST_CASE("residual contract") {
  std::mt19937_64 rng(3);
  GridSpec g{Vec3(-0.4, -0.4, -0.4), 0.1, {8, 8, 8}};
  const CameraModel cam = camera(rng);
  const auto vox = all_voxels(g);
  Tensor feat = uniform({3, 24, 32}, 40);
  auto bp = back_project(g, vox, ad::constant(feat), cam);

  SECTION("zero state and zero MLP_D reproduce F_BP exactly") {
    for (bool cues : {false, true}) {
      nn::ParamSet ps;
      auto p = make_params(ps, 6, 4, 3 + (cues ? ipsd::kCueWidth : 0), 4, 41);
      for (ad::Var* t : {&p.mlp_d.l1.w, &p.mlp_d.l1.b, &p.mlp_d.l2.w, &p.mlp_d.l2.b}) zero(*t);
      auto cv = ipsd::build_cost_volume(p, ad::constant(Tensor({4, 24, 32})), bp, cam, g, vox, cues);
      const Tensor &out = cv.features.value(), &ref = bp.features.value();
      for (std::size_t v = 0; v < g.count(); ++v) {
        for (std::size_t c = 0; c < 3; ++c) CHECK(out(v, c) == ref(v, c));
        if (cues && cv.valid[v]) CHECK(out(v, 3) == bp.proj.depth[v]);
      }
    }
  }
  SECTION("with the state zeroed, the result depends only on F_BP and MLP_D") {
    nn::ParamSet ps1, ps2;
    auto p1 = make_params(ps1, 6, 4, 7, 4, 50);
    auto p2 = make_params(ps2, 6, 4, 7, 6, 51);  // different state path, shared decoder
    p2.mlp_d = p1.mlp_d;
    const ad::Var none = ad::constant(Tensor({4, 24, 32}));
    auto a = ipsd::build_cost_volume(p1, none, bp, cam, g, vox, true);
    auto b = ipsd::build_cost_volume(p2, none, bp, cam, g, vox, true);
    CHECK(max_abs_diff(a.features.value(), b.features.value()) == 0.0);
    // and a non-zero state does change it
    auto c = ipsd::build_cost_volume(p1, ad::constant(uniform({4, 24, 32}, 52)), bp, cam, g, vox, true);
    CHECK(max_abs_diff(a.features.value(), c.features.value()) > 0.0);
  }
}

TEST_CASE("voxels behind the camera give an empty cost volume") {
  GridSpec g{Vec3(-0.4, -0.4, -3.0), 0.1, {8, 8, 8}};  // entirely at negative z
  const CameraModel cam = CameraModel::make(50, 50, 31.5, 23.5, Mat4::Identity(), 48, 64);
  const auto vox = all_voxels(g);
  nn::ParamSet ps;
  auto p = make_params(ps, 6, 4, 7, 4, 60);
  auto bp = back_project(g, vox, ad::constant(uniform({3, 24, 32}, 61)), cam);
  auto cv = ipsd::build_cost_volume(p, ad::constant(uniform({4, 24, 32}, 62)), bp, cam, g, vox, true);
  for (auto v : cv.valid) CHECK(v == 0);
  CHECK(cv.features.value().max_abs() == 0.0);
}

TEST_CASE("build_cost_volume argument checks") {
  std::mt19937_64 rng(8);
  GridSpec g{Vec3(-0.4, -0.4, -0.4), 0.1, {4, 4, 4}};
  const CameraModel cam = camera(rng);
  const auto vox = all_voxels(g);
  nn::ParamSet ps;
  auto p = make_params(ps, 6, 4, 7, 4, 70);
  auto bp = back_project(g, vox, ad::constant(uniform({3, 24, 32}, 71)), cam);
  CHECK_THROWS_AS(ipsd::build_cost_volume(p, ad::constant(Tensor({5, 24, 32})), bp, cam, g, vox, true),
                  DimensionError);
  CHECK_THROWS_AS(ipsd::build_cost_volume(p, ad::constant(Tensor({4, 24, 30})), bp, cam, g, vox, true),
                  ArgumentError);
  CHECK_THROWS_AS(ipsd::build_cost_volume(p, ad::constant(Tensor({4, 24, 32})), bp, cam, g, {0, 1}, true),
                  ArgumentError);
  CHECK_THROWS_AS(ipsd::build_cost_volume(p, ad::constant(Tensor({4, 24, 32})), bp, cam, g, vox, false),
                  DimensionError);
  GridSpec small{Vec3(-0.4, -0.4, -0.4), 0.1, {2, 2, 2}};
  CHECK_THROWS_AS(ipsd::build_cost_volume(p, ad::constant(Tensor({4, 24, 32})), bp, cam, small, vox, true),
                  ArgumentError);
}

TEST_CASE("gradients flow through state projection and cost volume") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    GridSpec g{Vec3(-0.3, -0.3, -0.3), 0.15, {4, 4, 4}};
    const CameraModel cam = CameraModel::make(12, 12, 7.5, 5.5, camera(rng).pose, 12, 16);
    const auto vox = all_voxels(g);
    nn::ParamSet ps;
    auto p = make_params(ps, 4, 3, 2 + ipsd::kCueWidth, 3, 80 + seed);
    const Tensor cr = uniform({4, 3, 4}, 90 + seed);
    const Tensor feat = uniform({2, 3, 4}, 95 + seed);
    const Tensor weights = uniform({g.count(), 2 + ipsd::kCueWidth}, 99 + seed);
    ad::Var cr_var = ad::param(cr);
    auto f = [&]() {
      ad::Var state = ipsd::state_project(p, cr_var);
      auto bp = back_project(g, vox, ad::constant(feat), cam);
      auto cv = ipsd::build_cost_volume(p, state, bp, cam, g, vox, true);
      return ad::sum(ad::mul(cv.features, ad::constant(weights)));
    };
    auto params = ps.vars();
    params.push_back(cr_var);
    auto res = grad_check(f, params);
    CHECK(res.max_rel_err < 1e-4);
  }
}
