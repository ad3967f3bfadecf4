#include <catch_amalgamated.hpp>

#include <random>

#include "ipdr/io.hpp"
#include "test_util.hpp"

using namespace ipdr;
using namespace ipdr::geom;

namespace {

TriangleMesh tetra() {
  TriangleMesh m;
  m.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1.25)};
  m.faces = {{0, 2, 1}, {0, 1, 3}, {1, 2, 3}, {0, 3, 2}};
  return m;
}

}  // namespace

TEST_CASE("ply round trip") {
  for (bool binary : {false, true}) {
    TriangleMesh m = tetra();
    TriangleMesh r = io::parse_ply(io::ply_string(m, binary));
    REQUIRE(r.vertices.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK((r.vertices[i] - m.vertices[i]).norm() == 0.0);
    CHECK(r.faces == m.faces);
  }
  SECTION("empty mesh") {
    TriangleMesh r = io::parse_ply(io::ply_string(TriangleMesh{}));
    CHECK(r.vertices.empty());
    CHECK(r.faces.empty());
  }
  SECTION("quads are fanned; extra properties skipped") {
    const std::string s =
        "ply\nformat ascii 1.0\ncomment test\nelement vertex 4\nproperty float x\nproperty float y\n"
        "property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n"
        "end_header\n0 0 0 9\n1 0 0 9\n1 1 0 9\n0 1 0 9\n4 0 1 2 3\n";
    TriangleMesh r = io::parse_ply(s);
    CHECK(r.faces.size() == 2);
    CHECK(r.vertices[2] == Vec3(1, 1, 0));
  }
  SECTION("malformed") {
    CHECK_THROWS_AS(io::parse_ply("not a ply"), FormatError);
    CHECK_THROWS_AS(io::parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n"),
                    FormatError);
    CHECK_THROWS_AS(io::parse_ply("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\n"
                                  "property float z\nelement face 1\nproperty list uchar int vertex_indices\n"
                                  "end_header\n0 0 0\n3 0 1 2\n"),
                    FormatError);
  }
}

TEST_CASE("ppm round trip is exact on 8-bit values") {
  Tensor img({3, 5, 7});
  std::mt19937_64 rng(1);
  for (auto& v : img.data()) v = static_cast<double>(rng() % 256) / 255.0;
  Tensor r = io::parse_ppm(io::ppm_string(img));
  REQUIRE(r.shape() == img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(r[i] == img[i]);
  CHECK_THROWS_AS(io::parse_ppm("P3\n1 1\n255\n0 0 0"), FormatError);
  CHECK_THROWS_AS(io::parse_ppm("P6\n4 4\n255\nabc"), FormatError);
}

TEST_CASE("poses and intrinsics") {
  std::vector<Mat4> poses;
  for (int k = 0; k < 3; ++k) poses.push_back(look_at(Vec3(0.1 * k, 1.0 / 3.0, 0.7), Vec3(1, 2, 0.3)));
  auto r = io::parse_poses(io::poses_string(poses));
  REQUIRE(r.size() == 3);
  for (int k = 0; k < 3; ++k) CHECK((r[k] - poses[k]).norm() == 0.0);  // %.17g round-trips
  CHECK_THROWS_AS(io::parse_poses("1 2 3"), FormatError);
  CHECK_THROWS_AS(io::parse_poses(""), FormatError);

  io::Intrinsics k{36, 37.5, 31.5, 23.5, 64, 48};
  auto kr = io::parse_intrinsics(io::intrinsics_string(k));
  CHECK(kr.fx == 36);
  CHECK(kr.fy == 37.5);
  CHECK(kr.W == 64);
  CHECK(kr.H == 48);
  CHECK_THROWS_AS(io::parse_intrinsics("1 2 3 4 5"), FormatError);
  CHECK_THROWS_AS(io::parse_intrinsics("1 2 3 4 5.5 6"), FormatError);
}

TEST_CASE("tsdf binary") {
  GridSpec g{Vec3(-0.1, 0.2, 0.3), 0.04, {3, 4, 5}};
  VoxelVolume v = VoxelVolume::filled(g, 0.0);
  for (std::size_t i = 0; i < g.count(); ++i) v.values[i] = std::sin(double(i));
  const std::string s = io::tsdf_string(v);
  CHECK(s.substr(0, 4) == "TSDF");
  CHECK(s.size() == 4 + 12 + 24 + 8 + 4 * g.count());
  VoxelVolume r = io::parse_tsdf(s);
  CHECK(r.grid.same_as(g));
  for (std::size_t i = 0; i < g.count(); ++i) CHECK(r.values[i] == double(float(v.values[i])));
  CHECK_THROWS_AS(io::parse_tsdf(s.substr(0, s.size() - 1)), FormatError);
  CHECK_THROWS_AS(io::parse_tsdf("XSDF" + s.substr(4)), FormatError);
}

TEST_CASE("checkpoint") {
  nn::Rng rng(3);
  nn::ParamSet a;
  nn::Linear::make(a, "l1", 3, 4, rng);
  a.add("s", Tensor::scalar(2.5));
  const std::string bytes = io::checkpoint_string(a);
  CHECK(bytes.substr(0, 4) == "IPDR");

  nn::Rng rng2(9);
  nn::ParamSet b;
  nn::Linear::make(b, "l1", 3, 4, rng2);
  b.add("s", Tensor::scalar(0.0));
  io::load_checkpoint(b, bytes);
  for (std::size_t i = 0; i < a.items().size(); ++i)
    CHECK(a.items()[i].second.value().data()[0] == b.items()[i].second.value().data()[0]);
  CHECK(io::checkpoint_string(b) == bytes);

  SECTION("mismatches name the first offending record") {
    nn::ParamSet c;
    nn::Linear::make(c, "l1", 3, 5, rng2);
    c.add("s", Tensor::scalar(0.0));
    try {
      io::load_checkpoint(c, bytes);
      FAIL("expected a mismatch");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("l1.w") != std::string::npos);
    }
    nn::ParamSet d;
    nn::Linear::make(d, "l1", 3, 4, rng2);
    CHECK_THROWS_AS(io::load_checkpoint(d, bytes), FormatError);
  }
  SECTION("version and truncation") {
    std::string v2 = bytes;
    v2[4] = 2;
    CHECK_THROWS_AS(io::parse_checkpoint(v2), FormatError);
    CHECK_THROWS_AS(io::parse_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  }
}

TEST_CASE("config subset") {
  const std::string text =
      "# comment\nseed = 42\nvoxel_size_fine = 0.04  # trailing\nname = \"room # one\"\nflag = true\n"
      "room = [2.4, 2.0, 1.8]\n\n[train]\nsteps = 300\n";
  io::Config c = io::Config::parse(text);
  CHECK(c.get_int("seed", 0) == 42);
  CHECK(c.get_double("voxel_size_fine", 0) == 0.04);
  CHECK(c.get_string("name", "") == "room # one");
  CHECK(c.get_bool("flag", false));
  CHECK(c.get_array("room", {}) == std::vector<double>{2.4, 2.0, 1.8});
  CHECK(c.get_int("train.steps", 0) == 300);
  CHECK(c.get_int("missing", 7) == 7);
  CHECK_THROWS_AS(c.get_int("voxel_size_fine", 0), FormatError);
  CHECK_THROWS_AS(c.get_double("name", 0), FormatError);
  CHECK_THROWS_AS(io::Config::parse("novalue\n"), FormatError);
  CHECK_THROWS_AS(io::Config::parse("[open\n"), FormatError);
  // canonical text parses back to the same values
  io::Config r = io::Config::parse(c.to_string());
  CHECK(r.values() == c.values());
}

TEST_CASE("atomic_write replaces whole files") {
  const auto p = io::fs::temp_directory_path() / "ipdr_atomic_test" / "a.txt";
  io::fs::remove_all(p.parent_path());
  io::atomic_write(p, "first");
  io::atomic_write(p, "second");
  CHECK(io::read_file(p) == "second");
  std::size_t n = 0;
  for (const auto& e : io::fs::directory_iterator(p.parent_path())) {
    (void)e;
    ++n;
  }
  CHECK(n == 1);  // no temporaries left behind
  io::fs::remove_all(p.parent_path());
}
