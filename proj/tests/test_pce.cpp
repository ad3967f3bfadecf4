#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "ipdr/grad_check.hpp"
#include "ipdr/pce.hpp"
#include "test_util.hpp"

using namespace ipdr;
using Catch::Approx;
using testutil::uniform;

namespace {

pce::PceParams make_params(std::size_t C_in, std::size_t C_r, std::size_t M, std::uint64_t seed, nn::ParamSet& ps) {
  nn::Rng rng(seed);
  return pce::PceParams::make(ps, "pce", C_in, C_r, M, rng);
}

double l2(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("pce_forward shapes and ranges") {
  nn::ParamSet ps;
  auto p = make_params(3, 4, 6, 1, ps);
  auto out = pce::pce_forward(p, ad::constant(uniform({3, 5, 7}, 2)));
  CHECK(out.encoded.shape() == Shape{4, 5, 7});
  CHECK(out.confidence.shape() == Shape{1, 5, 7});
  for (double c : out.confidence.value().data()) {
    CHECK(c > 0.0);
    CHECK(c < 1.0);
  }
  CHECK_THROWS_AS(pce::pce_forward(p, ad::constant(Tensor({2, 5, 7}))), DimensionError);
}

TEST_CASE("zero input with zero-bias MLP gives zero encoding") {
  nn::ParamSet ps;
  auto p = make_params(3, 4, 6, 3, ps);
  auto out = pce::pce_forward(p, ad::constant(Tensor({3, 4, 4})));
  CHECK(out.encoded.value().max_abs() == 0.0);
}

TEST_CASE("single pixel input has no spatial mixing") {
  nn::ParamSet ps;
  auto p = make_params(3, 4, 5, 4, ps);
  Tensor x = uniform({3, 1, 1}, 5);
  auto out = pce::pce_forward(p, ad::constant(x));
  // Manual chain: state = sum_c w_hat_c x_c; L = readout^T state; gate; MLP_E.
  auto disc = ssm::discretize(p.ssm);
  std::vector<double> state(5, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 5; ++i) state[i] += disc.w_hat[c].value()[i] * x[c];
  Tensor L({1, 4});
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t i = 0; i < 5; ++i) L[o] += p.ssm.readout.value()(i, o) * state[i];
  double logit = p.conf_head.b.value()[0];
  for (std::size_t o = 0; o < 4; ++o) logit += L[o] * p.conf_head.w.value()(o, 0);
  const double conf = 1.0 / (1.0 + std::exp(-logit));
  for (auto& v : L.data()) v *= conf;
  Tensor enc = p.mlp_e(ad::constant(L)).value();
  CHECK(out.confidence.value()[0] == Approx(conf).epsilon(1e-14));
  for (std::size_t o = 0; o < 4; ++o) CHECK(out.encoded.value()[o] == Approx(enc[o]).margin(1e-14));
}

TEST_CASE("perturbing one pixel reaches every pixel") {
  nn::ParamSet ps;
  auto p = make_params(2, 3, 4, 6, ps);
  Tensor x = uniform({2, 5, 6}, 7);
  Tensor y = x;
  y(0, 0, 0) += 0.5;
  Tensor a = pce::pce_forward(p, ad::constant(x)).encoded.value();
  Tensor b = pce::pce_forward(p, ad::constant(y)).encoded.value();
  for (std::size_t pix = 0; pix < 30; ++pix) {
    double diff = 0.0;
    for (std::size_t c = 0; c < 3; ++c) diff += std::abs(a[c * 30 + pix] - b[c * 30 + pix]);
    CHECK(diff > 0.0);
  }
}

TEST_CASE("deterministic") {
  nn::ParamSet ps1, ps2;
  auto p1 = make_params(3, 4, 6, 8, ps1);
  auto p2 = make_params(3, 4, 6, 8, ps2);
  Tensor x = uniform({3, 6, 6}, 9);
  CHECK(pce::pce_forward(p1, ad::constant(x)).encoded.value() == pce::pce_forward(p2, ad::constant(x)).encoded.value());
}

TEST_CASE("confidence gating with a strongly negative head bias") {
  nn::ParamSet ps;
  auto p = make_params(3, 4, 6, 10, ps);
  // give MLP_E non-zero biases so MLP_E(0) is informative
  p.mlp_e.l1.b.mutable_value() = uniform({8}, 11);
  p.mlp_e.l2.b.mutable_value() = uniform({4}, 12);
  p.conf_head.b.mutable_value()[0] = -20.0;
  Tensor x = uniform({3, 4, 5}, 13, -0.2, 0.2);
  Tensor enc = pce::pce_forward(p, ad::constant(x)).encoded.value();
  Tensor base = p.mlp_e(ad::constant(Tensor({1, 4}))).value();
  Tensor expect(enc.shape());
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t k = 0; k < 20; ++k) expect[c * 20 + k] = base[c];
  CHECK(std::abs(l2(enc) - l2(expect)) < 1e-6);
  CHECK(max_abs_diff(enc, expect) < 1e-6);
}

TEST_CASE("confidence_mask") {
  SECTION("threshold domain") {
    pce::PceOutput out{ad::constant(Tensor({1, 2, 2})), ad::constant(Tensor::full({1, 2, 2}, 0.5))};
    CHECK_THROWS_AS(pce::confidence_mask(out, 0.0), ArgumentError);
    CHECK_THROWS_AS(pce::confidence_mask(out, 1.0), ArgumentError);
    CHECK_THROWS_AS(pce::confidence_mask(out, -0.1), ArgumentError);
  }
  SECTION("tiny threshold keeps everything") {
    nn::ParamSet ps;
    auto p = make_params(2, 3, 4, 14, ps);
    auto out = pce::pce_forward(p, ad::constant(uniform({2, 4, 4}, 15)));
    auto m = pce::confidence_mask(out, 1e-12);
    CHECK(std::all_of(m.begin(), m.end(), [](auto v) { return v == 1; }));
  }
  SECTION("uniform 0.5 above threshold 0.6 is empty") {
    pce::PceOutput out{ad::constant(Tensor({1, 3, 3})), ad::constant(Tensor::full({1, 3, 3}, 0.5))};
    auto m = pce::confidence_mask(out, 0.6);
    CHECK(std::none_of(m.begin(), m.end(), [](auto v) { return v == 1; }));
  }
  SECTION("median threshold keeps half") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const std::size_t n = 25 + seed;
      Tensor conf = uniform({1, 1, n}, seed, 0.01, 0.99);
      std::vector<double> sorted(conf.data().begin(), conf.data().end());
      std::sort(sorted.begin(), sorted.end());
      const double median = sorted[n / 2];  // upper median for even n
      auto m = pce::confidence_mask({ad::constant(Tensor({1, 1, n})), ad::constant(conf)}, median);
      const auto kept = static_cast<std::size_t>(std::count(m.begin(), m.end(), 1));
      CHECK(kept == n - n / 2);
      CHECK(kept == (n + 1) / 2);
    }
  }
}

TEST_CASE("pce gradients for every parameter group") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    nn::ParamSet ps;
    auto p = make_params(2, 3, 4, 100 + seed, ps);
    Tensor x = uniform({2, 3, 4}, 200 + seed);
    Tensor wts = uniform({3, 3, 4}, 300 + seed);
    Tensor wc = uniform({1, 3, 4}, 400 + seed);
    auto f = [&] {
      auto out = pce::pce_forward(p, ad::constant(x));
      return ad::add(ad::sum(ad::mul(out.encoded, ad::constant(wts))),
                     ad::sum(ad::mul(out.confidence, ad::constant(wc))));
    };
    CHECK(grad_check(f, ps.vars()).max_rel_err < 1e-4);
  }
}
