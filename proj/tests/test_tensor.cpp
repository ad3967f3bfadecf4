#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "ipdr/autodiff.hpp"
#include "ipdr/grad_check.hpp"
#include "test_util.hpp"

using namespace ipdr;
using Catch::Approx;

namespace {

// Plain Taylor series in extended precision, no scaling.
Tensor taylor_expm(const Tensor& a, int terms) {
  const std::size_t n = a.dim(0);
  std::vector<long double> result(n * n, 0.0L), term(n * n, 0.0L), tmp(n * n);
  for (std::size_t i = 0; i < n; ++i) result[i * n + i] = term[i * n + i] = 1.0L;
  for (int k = 1; k <= terms; ++k) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        long double s = 0.0L;
        for (std::size_t p = 0; p < n; ++p) s += term[i * n + p] * static_cast<long double>(a(p, j));
        tmp[i * n + j] = s / k;
      }
    term = tmp;
    for (std::size_t i = 0; i < n * n; ++i) result[i] += term[i];
  }
  Tensor out({n, n});
  for (std::size_t i = 0; i < n * n; ++i) out[i] = static_cast<double>(result[i]);
  return out;
}

}  // namespace

TEST_CASE("tensor construction enforces invariants") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(shape_numel(t.shape()) == t.size());
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}), NumericError);
  CHECK_THROWS_AS(Tensor({1}, {std::numeric_limits<double>::infinity()}), NumericError);
  CHECK_THROWS_AS(t.reshaped({4}), DimensionError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("matmul") {
  SECTION("identity") {
    Tensor b = testutil::uniform({3, 4}, 1);
    CHECK(kernels::matmul(Tensor::eye(3), b) == b);
  }
  SECTION("hand arithmetic") {
    Tensor c = kernels::matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{0}, {1}}));
    CHECK(c == Tensor::matrix({{2}, {4}}));
  }
  SECTION("inner dimension mismatch") {
    CHECK_THROWS_AS(kernels::matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
    CHECK_THROWS_AS(ad::matmul(ad::constant(Tensor({2, 3})), ad::constant(Tensor({2, 3}))), DimensionError);
  }
  SECTION("gradient vs finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      ad::Var a = ad::param(testutil::uniform({5, 7}, seed));
      ad::Var b = ad::param(testutil::uniform({7, 3}, seed + 100));
      Tensor wts = testutil::uniform({5, 3}, seed + 200);
      auto f = [&] { return ad::sum(ad::mul(ad::matmul(a, b), ad::constant(wts))); };
      CHECK(grad_check(f, {a, b}).max_rel_err < 1e-6);
    }
  }
}

TEST_CASE("matexp") {
  SECTION("zero matrix gives identity") { CHECK(kernels::expm(Tensor({4, 4})) == Tensor::eye(4)); }
  SECTION("diagonal") {
    Tensor e = kernels::expm(Tensor::matrix({{std::log(2.0), 0}, {0, std::log(3.0)}}));
    CHECK(e(0, 0) == Approx(2.0).epsilon(1e-14));
    CHECK(e(1, 1) == Approx(3.0).epsilon(1e-14));
    CHECK(e(0, 1) == 0.0);
    CHECK(e(1, 0) == 0.0);
  }
  SECTION("random 4x4 vs extended-precision Taylor series") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor u = testutil::uniform({4, 4}, seed, -0.5, 0.5);
      CHECK(max_abs_diff(kernels::expm(u), taylor_expm(u, 30)) < 1e-10);
    }
  }
  SECTION("large norm vs squared Taylor oracle") {
    // ||u|| up to 10: exp(u) = exp(u/16)^16 with a 30-term series on u/16.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Tensor u = testutil::uniform({4, 4}, seed + 50, -2.5, 2.5);
      Tensor small = u;
      for (auto& v : small.data()) v /= 16.0;
      Tensor ref = taylor_expm(small, 30);
      for (int i = 0; i < 4; ++i) ref = kernels::matmul(ref, ref);
      const double scale = std::max(1.0, ref.max_abs());
      CHECK(max_abs_diff(kernels::expm(u), ref) / scale < 1e-10);
    }
  }
  SECTION("exp(u) exp(-u) = I") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor u = testutil::uniform({5, 5}, seed, -1.0, 1.0);
      Tensor nu = u;
      for (auto& v : nu.data()) v = -v;
      CHECK(max_abs_diff(kernels::matmul(kernels::expm(u), kernels::expm(nu)), Tensor::eye(5)) < 1e-9);
    }
  }
  SECTION("non-square input") { CHECK_THROWS_AS(kernels::expm(Tensor({2, 3})), DimensionError); }
}

TEST_CASE("inverse") {
  Tensor a = testutil::uniform({6, 6}, 9);
  for (std::size_t i = 0; i < 6; ++i) a(i, i) += 3.0;
  CHECK(max_abs_diff(kernels::matmul(a, kernels::inverse(a)), Tensor::eye(6)) < 1e-12);
  CHECK_THROWS_AS(kernels::inverse(Tensor({3, 3})), NumericError);
}
