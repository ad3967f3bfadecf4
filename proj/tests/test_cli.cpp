#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "ipdr/pipeline.hpp"

using namespace ipdr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path p = fs::temp_directory_path() / ("ipdr_cli_" + std::to_string(::getpid()));
  TempDir() {
    fs::remove_all(p);
    fs::create_directories(p);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(p, ec);
  }
};

const fs::path& root() {
  static const TempDir d;
  return d.p;
}

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::string& args) {
  static int n = 0;
  const fs::path o = root() / ("out" + std::to_string(n) + ".txt"), e = root() / ("err" + std::to_string(n) + ".txt");
  ++n;
  const std::string cmd = "cd '" + root().string() + "' && IPDR_THREADS=1 '" + IPDR_CLI_PATH + "' " + args + " > '" +
                          o.string() + "' 2> '" + e.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, io::read_file(o), io::read_file(e)};
}

std::string slurp(const fs::path& p) { return io::read_file(root() / p); }

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(root() / a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), root() / a));
  for (const auto& e : fs::recursive_directory_iterator(root() / b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), root() / b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb || fa.empty()) return false;
  for (const auto& f : fa)
    if (slurp(a / f) != slurp(b / f)) return false;
  return true;
}

void write(const fs::path& p, const std::string& s) { io::atomic_write(root() / p, s); }

const char* kTinySpec =
    "width = 16\nheight = 16\nfx = 9\nfy = 9\ncx = 7.5\ncy = 7.5\nvoxel_size_fine = 0.16\nn_views = 4\n";
const char* kTinyConfig =
    "[model]\nM = 2\nwidths = [6, 4, 3]\nhidden = 5\nkey_dim = 3\n"
    "[train]\nsteps = 3\nfine_samples = 40\nmedium_extra = 8\ncoarse_extra = 8\nviews_min = 2\nviews_max = 3\n";

// tiny bundle and tiny weights shared by several cases
void ensure_tiny() {
  if (fs::exists(root() / "tiny_w.bin")) return;
  write("tiny.toml", kTinySpec);
  write("tiny_cfg.toml", kTinyConfig);
  REQUIRE(run("synth --spec tiny.toml --seed 3 --out tiny").code == 0);
  REQUIRE(run("train --scenes tiny --config tiny_cfg.toml --out-weights tiny_w.bin --loss-csv tiny_loss.csv").code ==
          0);
}

}  // namespace

TEST_CASE("help documents every subcommand with units") {
  CHECK(run("--help").code == 0);
  for (const char* sub : {"synth", "train", "reconstruct", "eval", "stability", "verify"}) {
    const Run r = run(std::string(sub) + " --help");
    INFO(sub);
    CHECK(r.code == 0);
    CHECK(r.out.find("Options:") != std::string::npos);
  }
  CHECK(run("synth --help").out.find("metres") != std::string::npos);
  CHECK(run("train --help").out.find("count") != std::string::npos);
  CHECK(run("eval --help").out.find("metres") != std::string::npos);
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("synth").code == 2);  // --out is required
}

TEST_CASE("synth is deterministic, refuses to clobber and validates first") {
  write("small.toml", kTinySpec);
  REQUIRE(run("synth --spec small.toml --seed 42 --out s1").code == 0);
  REQUIRE(run("synth --spec small.toml --seed 42 --out s2").code == 0);
  CHECK(same_tree("s1", "s2"));

  const Run again = run("synth --spec small.toml --seed 42 --out s1");
  CHECK(again.code == 2);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(run("synth --spec small.toml --seed 42 --out s1 --force").code == 0);
  CHECK(same_tree("s1", "s2"));

  REQUIRE(run("synth --spec small.toml --seed 43 --out s3").code == 0);
  CHECK(!same_tree("s1", "s3"));

  write("bad.toml", "room = [-4, 3, 2.5]\n");
  CHECK(run("synth --spec bad.toml --out nothing").code == 2);
  CHECK(!fs::exists(root() / "nothing"));
  CHECK(run("synth --spec missing.toml --out nothing").code == 2);
  CHECK(!fs::exists(root() / "nothing"));
  CHECK(run("synth --spec small.toml --phase 1.5 --out nothing").code == 2);
  CHECK(!fs::exists(root() / "nothing"));
}

TEST_CASE("verify accepts a default bundle and catches corruption") {
  REQUIRE(run("synth --seed 42 --out dflt").code == 0);
  const Run ok = run("verify --scene dflt");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("FAIL") == std::string::npos);
  CHECK(ok.out.find("PASS GT mesh closed") != std::string::npos);

  fs::copy(root() / "dflt", root() / "broken", fs::copy_options::recursive);
  std::string t = slurp("broken/gt_tsdf_fine.bin");
  t[t.size() - 3] ^= 0x40;
  write("broken/gt_tsdf_fine.bin", t);
  const Run bad = run("verify --scene broken");
  CHECK(bad.code == 2);
  CHECK(bad.out.find("FAIL") != std::string::npos);

  CHECK(run("verify").code == 2);
  CHECK(run("verify --scene does_not_exist").code == 2);
}

TEST_CASE("train: zero steps, determinism, loss curve and failures") {
  ensure_tiny();
  SECTION("--steps 0 writes the initialization") {
    REQUIRE(run("train --scenes tiny --config tiny_cfg.toml --steps 0 --out-weights w0.bin --loss-csv l0.csv").code ==
            0);
    pipeline::ModelConfig c = pipeline::ModelConfig::from_config(io::Config::parse(kTinyConfig));
    CHECK(slurp("w0.bin") == io::checkpoint_string(pipeline::Model::make(c).ps));
    CHECK(slurp("l0.csv") == "step,l_fusion,l_occ,l_tsdf,total\n");
  }
  SECTION("same inputs give identical weights and loss curves") {
    REQUIRE(run("train --scenes tiny --config tiny_cfg.toml --out-weights w1.bin --loss-csv l1.csv").code == 0);
    CHECK(slurp("w1.bin") == slurp("tiny_w.bin"));
    CHECK(slurp("l1.csv") == slurp("tiny_loss.csv"));
    // 3 steps -> header + 3 rows
    const std::string csv = slurp("l1.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  }
  SECTION("default loss path sits beside the weights") {
    fs::create_directories(root() / "wdir");
    REQUIRE(run("train --scenes tiny --config tiny_cfg.toml --steps 1 --out-weights wdir/w.bin").code == 0);
    CHECK(fs::exists(root() / "wdir/loss.csv"));
    CHECK(run("train --scenes tiny --config tiny_cfg.toml --steps 1 --out-weights wdir/w.bin").code == 2);
    CHECK(run("train --scenes tiny --config tiny_cfg.toml --steps 1 --out-weights wdir/w.bin --force").code == 0);
  }
  SECTION("missing inputs exit 2") {
    CHECK(run("train --scenes nowhere --out-weights nw.bin --loss-csv nl.csv").code == 2);
    CHECK(!fs::exists(root() / "nw.bin"));
    CHECK(run("train --scenes tiny --config nofile.toml --out-weights nw.bin --loss-csv nl.csv").code == 2);
    write("neg.toml", "[train]\nlr = -1\n");
    CHECK(run("train --scenes tiny --config neg.toml --out-weights nw.bin --loss-csv nl.csv").code == 2);
  }
  SECTION("divergence exits 3 and names the last finite step") {
    write("div.toml", std::string(kTinyConfig) + "lr = 1e200\n");
    const Run r = run("train --scenes tiny --config div.toml --steps 4 --out-weights dw.bin --loss-csv dl.csv");
    CHECK(r.code == 3);
    CHECK(r.err.find("last finite step") != std::string::npos);
    CHECK(!fs::exists(root() / "dw.bin"));
    CHECK(!fs::exists(root() / "dl.csv"));
  }
}

TEST_CASE("reconstruct and eval") {
  ensure_tiny();
  SECTION("deterministic mesh output") {
    REQUIRE(run("reconstruct --weights tiny_w.bin --scene tiny --out m1.ply").code == 0);
    REQUIRE(run("reconstruct --weights tiny_w.bin --scene tiny --out m2.ply").code == 0);
    CHECK(slurp("m1.ply") == slurp("m2.ply"));
    CHECK(slurp("m1.ply").rfind("ply\n", 0) == 0);
    CHECK(run("reconstruct --weights tiny_w.bin --scene tiny --out m1.ply").code == 2);
    CHECK(run("reconstruct --weights tiny_w.bin --scene tiny --views 2 --out m3.ply --binary").code == 0);
    CHECK(run("reconstruct --weights tiny_w.bin --scene tiny --views 9 --out m4.ply").code == 2);
    CHECK(run("reconstruct --weights none.bin --scene tiny --out m5.ply").code == 2);
  }

  SECTION("configuration that disagrees with the checkpoint") {
    write("other.toml", "[model]\nM = 3\nwidths = [6, 4, 3]\nhidden = 5\nkey_dim = 3\n");
    const Run r = run("reconstruct --weights tiny_w.bin --scene tiny --config other.toml --out m6.ply");
    CHECK(r.code == 2);
    CHECK(r.err.find("model.M") != std::string::npos);
    CHECK(!fs::exists(root() / "m6.ply"));
    CHECK(run("reconstruct --weights tiny_w.bin --scene tiny --config tiny_cfg.toml --out m7.ply").code == 0);
  }
  SECTION("truncated checkpoint") {
    const std::string w = slurp("tiny_w.bin");
    write("cut.bin", w.substr(0, w.size() / 2));
    CHECK(run("reconstruct --weights cut.bin --scene tiny --out m8.ply").code == 2);
  }
  SECTION("eval of the GT mesh against itself") {
    const Run r = run("eval --scene tiny --mesh tiny/gt_mesh.ply --out e1.csv");
    REQUIRE(r.code == 0);
    const std::string csv = slurp("e1.csv");
    CHECK(csv.find("fscore,1\n") != std::string::npos);
    CHECK(csv.find("prec,1\n") != std::string::npos);
    CHECK(csv.find("acc,0\n") != std::string::npos);
    CHECK(csv.find("abs_rel,0\n") != std::string::npos);
    REQUIRE(run("eval --scene tiny --mesh tiny/gt_mesh.ply --out e2.csv").code == 0);
    CHECK(slurp("e2.csv") == csv);
    CHECK(run("eval --scene tiny --mesh tiny/gt_mesh.ply --weights tiny_w.bin --out e3.csv").code == 2);
    CHECK(run("eval --scene tiny --out e4.csv").code == 2);
  }
}

TEST_CASE("stability summaries") {
  write("const.csv", "views,prec,recall,fscore\n6,0.7,0.6,0.65\n8,0.7,0.6,0.65\n10,0.7,0.6,0.65\n");
  const Run r = run("stability --metrics const.csv --out st1.csv");
  REQUIRE(r.code == 0);
  CHECK(slurp("st1.csv") ==
        "views,prec,recall,fscore\n6,0.69999999999999996,0.59999999999999998,0.65000000000000002\n"
        "8,0.69999999999999996,0.59999999999999998,0.65000000000000002\n"
        "10,0.69999999999999996,0.59999999999999998,0.65000000000000002\n\n"
        "cv_percent,prr_prec,prr_recall,prr_fscore,mean_prr,max_drop_percent,si\n0,100,100,100,100,0,1\n");
  write("one.csv", "views,prec,recall,fscore\n6,0.7,0.6,0.65\n");
  CHECK(run("stability --metrics one.csv --out st2.csv").code == 3);
  write("junk.csv", "views,prec,recall,fscore\n6,abc,0.6,0.65\n");
  CHECK(run("stability --metrics junk.csv --out st3.csv").code == 2);
  CHECK(run("stability --out st4.csv").code == 2);
  ensure_tiny();
  CHECK(run("stability --weights tiny_w.bin --scene tiny --view-sweep 2,x --out st5.csv").code == 2);
  CHECK(run("stability --weights tiny_w.bin --scene tiny --view-sweep 2 --out st6.csv").code == 2);
  CHECK(!fs::exists(root() / "st6.csv"));
}
