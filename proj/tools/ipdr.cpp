// ipdr: scene synthesis, toy training, reconstruction and evaluation.
//
// Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include "ipdr/pipeline.hpp"

using namespace ipdr;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 2;
constexpr int kNumeric = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void refuse_existing(const fs::path& p, bool force) {
  if (force || !fs::exists(p)) return;
  if (fs::is_directory(p) && fs::is_empty(p)) return;
  throw UsageError(p.string() + " exists (pass --force to overwrite)");
}

std::vector<std::size_t> parse_counts(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t pos = 0;
    long v = 0;
    try {
      v = std::stol(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size() || v <= 0) throw UsageError("bad view count '" + tok + "' in --view-sweep");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.size() < 2) throw UsageError("--view-sweep needs at least two view counts");
  if (std::set<std::size_t>(out.begin(), out.end()).size() != out.size())
    throw UsageError("--view-sweep has repeated view counts");
  return out;
}

io::Config load_config(const std::string& path) {
  if (path.empty()) return {};
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  return io::Config::load(path);
}

bool has_section(const io::Config& c, const std::string& prefix) {
  for (const auto& [k, v] : c.values())
    if (k.rfind(prefix, 0) == 0) return true;
  return false;
}

/// Loads a checkpoint; a [model] section in `cfg` must agree with the
/// checkpoint's configuration record.
pipeline::Model load_weights(const std::string& path, const io::Config& cfg) {
  if (!fs::exists(path)) throw UsageError("weights not found: " + path);
  const std::string bytes = io::read_file(path);
  const pipeline::ModelConfig stored = pipeline::config_from_checkpoint(bytes);
  if (has_section(cfg, "model.")) {
    const pipeline::ModelConfig want = pipeline::ModelConfig::from_config(cfg);
    const std::string field = pipeline::config_mismatch(stored, want);
    if (!field.empty())
      throw FormatError("checkpoint/config mismatch at record meta.config: " + field + " differs from the configuration");
  }
  return pipeline::load_model(bytes);
}

std::string mesh_csv(const metrics::MeshMetrics& m, const metrics::DepthMetrics* d) {
  std::string s = "metric,value\n";
  auto row = [&](const char* k, double v) { s += io::csv_row({k, io::fmt_double(v)}); };
  row("acc", m.acc);
  row("comp", m.comp);
  row("chamfer", m.chamfer);
  row("prec", m.prec);
  row("recall", m.recall);
  row("fscore", m.fscore);
  if (d) {
    row("abs_rel", d->abs_rel);
    row("sq_rel", d->sq_rel);
    row("rmse", d->rmse);
    row("delta_1_25", d->delta_1_25);
    row("depth_pixels", static_cast<double>(d->count));
  }
  return s;
}

std::string stability_csv(const std::vector<metrics::StabilityRow>& rows, const metrics::StabilityReport& r) {
  std::string s = "views,prec,recall,fscore\n";
  for (const auto& x : rows)
    s += io::csv_row({io::fmt_double(x.views), io::fmt_double(x.prec), io::fmt_double(x.recall),
                      io::fmt_double(x.fscore)});
  s += "\ncv_percent,prr_prec,prr_recall,prr_fscore,mean_prr,max_drop_percent,si\n";
  s += io::csv_row({io::fmt_double(r.cv), io::fmt_double(r.prr_prec), io::fmt_double(r.prr_recall),
                    io::fmt_double(r.prr_fscore), io::fmt_double(r.mean_prr), io::fmt_double(r.max_drop),
                    io::fmt_double(r.si)});
  return s;
}

std::vector<metrics::StabilityRow> read_rows(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("metrics file not found: " + path);
  std::stringstream in(io::read_file(path));
  std::string line;
  std::vector<metrics::StabilityRow> rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) break;
    if (header) {
      header = false;
      if (line != "views,prec,recall,fscore") throw FormatError(path + ": expected header views,prec,recall,fscore");
      continue;
    }
    std::stringstream ls(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ls, cell, ',')) {
      char* end = nullptr;
      const double x = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') throw FormatError(path + ": bad number '" + cell + "'");
      v.push_back(x);
    }
    if (v.size() != 4) throw FormatError(path + ": rows need four columns");
    rows.push_back({v[0], v[1], v[2], v[3]});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// verify

struct Check {
  std::string name;
  bool ok;
  std::string detail;
};

bool closed_mesh(const geom::TriangleMesh& m) {
  std::map<std::pair<int, int>, int> edges;
  for (const auto& f : m.faces)
    for (int e = 0; e < 3; ++e) {
      const int a = f[e], b = f[(e + 1) % 3];
      ++edges[{std::min(a, b), std::max(a, b)}];
    }
  for (const auto& [e, n] : edges)
    if (n != 2) return false;
  return !edges.empty();
}

std::vector<Check> verify_bundle(const fs::path& dir) {
  std::vector<Check> out;
  scenes::Bundle b;
  try {
    b = scenes::load_bundle(dir);
    out.push_back({"bundle files parse", true, ""});
  } catch (const std::exception& e) {
    out.push_back({"bundle files parse", false, e.what()});
    return out;
  }
  out.push_back({"view count matches spec", b.cams.size() == static_cast<std::size_t>(b.spec.n_views),
                 std::to_string(b.cams.size()) + " views"});
  bool pix = true;
  for (const auto& im : b.images)
    for (double v : im.data()) pix = pix && v >= 0.0 && v <= 1.0;
  out.push_back({"image intensities in [0, 1]", pix, ""});

  const auto grids = scenes::scene_grids(b.spec.room, b.spec.voxel_size_fine);
  bool nested = true;
  for (std::size_t r = 0; r < 3; ++r) nested = nested && b.gt_tsdf[r].grid.same_as(grids[r]);
  out.push_back({"grids nested and derived from the room", nested, ""});

  bool range = true;
  for (const auto& v : b.gt_tsdf)
    for (double x : v.values) range = range && std::isfinite(x) && std::abs(x) <= 1.0;
  out.push_back({"TSDF values finite and within [-1, 1]", range, ""});

  bool monotone = true;
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t i = 0; i < b.gt_tsdf[r].values.size(); ++i)
      if (std::abs(b.gt_tsdf[r].values[i]) < 1.0) {
        const auto p = pipeline::parent_of(grids[r], grids[r - 1], i);
        monotone = monotone && std::abs(b.gt_tsdf[r - 1].values[p]) < 1.0;
      }
  out.push_back({"occupied voxels have occupied parents", monotone, ""});

  bool clear = true;
  for (const auto& cam : b.cams) {
    const geom::Vec3 c = cam.center();
    const auto& g = b.gt_tsdf[2];
    const auto ix = [&](int k) {
      return static_cast<long>(std::floor((c[k] - g.grid.origin[k]) / g.grid.voxel_size));
    };
    const long i = ix(0), j = ix(1), k = ix(2);
    if (i < 0 || j < 0 || k < 0 || i >= long(g.grid.dims[0]) || j >= long(g.grid.dims[1]) || k >= long(g.grid.dims[2])) {
      clear = false;
      continue;
    }
    clear = clear && g.values[g.grid.index(std::size_t(i), std::size_t(j), std::size_t(k))] > 0.0;
  }
  out.push_back({"cameras inside free space", clear, ""});
  out.push_back({"GT mesh closed", closed_mesh(b.gt_mesh), std::to_string(b.gt_mesh.faces.size()) + " faces"});

  const scenes::GeneratedScene g = scenes::generate_scene(b.seed, b.spec);
  bool same = true;
  for (std::size_t r = 0; r < 3; ++r) same = same && io::tsdf_string(g.gt_tsdf[r]) == io::tsdf_string(b.gt_tsdf[r]);
  out.push_back({"TSDF regenerates from seed and spec", same, ""});
  return out;
}

std::vector<Check> verify_weights(const fs::path& p) {
  std::vector<Check> out;
  try {
    const pipeline::Model m = pipeline::load_model(io::read_file(p));
    out.push_back({"checkpoint loads", true, std::to_string(m.ps.items().size()) + " records"});
    bool finite = true;
    for (const auto& [n, v] : m.ps.items()) finite = finite && v.value().all_finite();
    out.push_back({"parameters finite", finite, ""});
  } catch (const std::exception& e) {
    out.push_back({"checkpoint loads", false, e.what()});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Indoor scene reconstruction from posed images: synthetic scenes, toy training, meshing, metrics"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (count, >= 1); falls back to IPDR_THREADS")
      ->check(CLI::PositiveNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "Render a synthetic room into a scene bundle directory");
  std::string spec_path, out_dir;
  long seed = 42;
  double phase = -1;
  int views = 0;
  bool force = false;
  synth->add_option("--spec", spec_path, "Scene spec file (TOML subset; lengths in metres, angles in degrees)");
  synth->add_option("--seed", seed, "Scene seed (integer)");
  synth->add_option("--out", out_dir, "Output bundle directory")->required();
  synth->add_option("--phase", phase, "Trajectory phase as a fraction of the angular step, in [0, 1)");
  synth->add_option("--views", views, "Number of rendered views (count); overrides the spec");
  synth->add_flag("--force", force, "Overwrite a non-empty output directory");

  // train
  auto* train = app.add_subcommand("train", "Train the reconstruction network on scene bundles");
  std::string scene_list, config_path, weights_out, loss_out;
  long steps = -1, train_seed = -1;
  train->add_option("--scenes", scene_list, "Comma-separated scene bundle directories")->required();
  train->add_option("--config", config_path, "Config file with [model] and [train] sections");
  train->add_option("--out-weights", weights_out, "Checkpoint path to write")->required();
  train->add_option("--steps", steps, "Optimizer steps (count, >= 0); overrides train.steps");
  train->add_option("--seed", train_seed, "Seed for initialization and batch sampling; overrides model/train seeds");
  train->add_option("--loss-csv", loss_out, "Loss curve path (default: loss.csv beside the checkpoint)");
  train->add_flag("--force", force, "Overwrite existing outputs");

  // reconstruct
  auto* recon = app.add_subcommand("reconstruct", "Reconstruct a mesh from a scene bundle's images and poses");
  std::string weights, scene_dir, out_path;
  int k_views = 0;
  recon->add_option("--weights", weights, "Checkpoint path")->required();
  recon->add_option("--scene", scene_dir, "Scene bundle directory")->required();
  recon->add_option("--out", out_path, "Output PLY mesh (coordinates in metres)")->required();
  recon->add_option("--config", config_path, "Config file; a [model] section must match the checkpoint");
  recon->add_option("--views", k_views, "Use this many evenly spaced views (count; default all)");
  recon->add_flag("--binary", "Write binary little-endian PLY");
  recon->add_flag("--force", force, "Overwrite an existing output");

  // eval
  auto* eval = app.add_subcommand("eval", "Score a mesh (given or reconstructed) against a bundle's ground truth");
  std::string mesh_path;
  double tau = 0.05;
  eval->add_option("--scene", scene_dir, "Scene bundle directory")->required();
  auto* eval_mesh = eval->add_option("--mesh", mesh_path, "Mesh to score (PLY)");
  auto* eval_w = eval->add_option("--weights", weights, "Checkpoint to reconstruct with instead of --mesh");
  eval_mesh->excludes(eval_w);
  eval->add_option("--config", config_path, "Config file; a [model] section must match the checkpoint");
  eval->add_option("--views", k_views, "Views used for reconstruction (count; default all)");
  eval->add_option("--tau", tau, "Distance threshold for precision/recall (metres)")->check(CLI::PositiveNumber);
  eval->add_option("--out", out_path, "Output metrics CSV")->required();
  eval->add_flag("--force", force, "Overwrite an existing output");

  // stability
  auto* stab = app.add_subcommand("stability", "View-count sweep with CV, PRR, Max Drop and SI");
  std::string sweep = "6,8,10", rows_path;
  auto* stab_w = stab->add_option("--weights", weights, "Checkpoint path");
  stab->add_option("--scene", scene_dir, "Scene bundle directory (required with --weights)");
  auto* stab_rows = stab->add_option("--metrics", rows_path, "CSV of views,prec,recall,fscore rows to summarize");
  stab_rows->excludes(stab_w);
  stab->add_option("--config", config_path, "Config file; a [model] section must match the checkpoint");
  stab->add_option("--view-sweep", sweep, "Comma-separated view counts (default 6,8,10)");
  stab->add_option("--tau", tau, "Distance threshold for precision/recall (metres)")->check(CLI::PositiveNumber);
  stab->add_option("--out", out_path, "Output CSV: one row per view count, then the stability block")->required();
  stab->add_flag("--force", force, "Overwrite an existing output");

  // verify
  auto* verify = app.add_subcommand("verify", "Check a scene bundle's invariants and/or a checkpoint");
  verify->add_option("--scene", scene_dir, "Scene bundle directory");
  verify->add_option("--weights", weights, "Checkpoint path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  if (threads > 0) thread_cap().store(static_cast<std::size_t>(threads));

  try {
    if (*synth) {
      scenes::SceneSpec spec;
      if (!spec_path.empty()) spec = scenes::SceneSpec::from_config(load_config(spec_path));
      if (phase >= 0) spec.phase = phase;
      if (views > 0) spec.n_views = views;
      if (seed < 0) throw UsageError("--seed must be non-negative");
      spec.validate();
      refuse_existing(out_dir, force);
      const auto g = scenes::generate_scene(static_cast<std::uint64_t>(seed), spec);
      // render into a sibling temp dir, then swap it in
      const fs::path out(out_dir), tmp = fs::path(out_dir + ".tmp");
      fs::remove_all(tmp);
      scenes::write_bundle(tmp, g);
      fs::remove_all(out);
      fs::rename(tmp, out);
      std::printf("bundle %s: %d views, %zux%zu px, voxels coarse %zu medium %zu fine %zu, GT mesh %zu faces\n",
                  out_dir.c_str(), spec.n_views, spec.width, spec.height, g.grids[0].count(), g.grids[1].count(),
                  g.grids[2].count(), g.gt_mesh.faces.size());
      return 0;
    }

    if (*train) {
      const io::Config cfg = load_config(config_path);
      pipeline::ModelConfig mc = pipeline::ModelConfig::from_config(cfg);
      pipeline::TrainConfig tc;
      auto count = [&](const std::string& k, std::size_t dflt) {
        const long v = cfg.get_int(k, static_cast<long>(dflt));
        if (v < 0) throw UsageError(k + " must be non-negative");
        return static_cast<std::size_t>(v);
      };
      tc.steps = count("train.steps", tc.steps);
      tc.lr = cfg.get_double("train.lr", tc.lr);
      tc.seed = count("train.seed", tc.seed);
      tc.views_min = count("train.views_min", tc.views_min);
      tc.views_max = count("train.views_max", tc.views_max);
      tc.fine_samples = count("train.fine_samples", tc.fine_samples);
      tc.medium_extra = count("train.medium_extra", tc.medium_extra);
      tc.coarse_extra = count("train.coarse_extra", tc.coarse_extra);
      if (steps >= 0) tc.steps = static_cast<std::size_t>(steps);
      if (train_seed >= 0) tc.seed = mc.seed = static_cast<std::uint64_t>(train_seed);
      tc.validate();
      if (loss_out.empty()) loss_out = (fs::path(weights_out).parent_path() / "loss.csv").string();
      refuse_existing(weights_out, force);
      refuse_existing(loss_out, force);

      std::vector<pipeline::TrainingScene> sc;
      std::stringstream ss(scene_list);
      std::string dir;
      while (std::getline(ss, dir, ','))
        if (!dir.empty()) sc.push_back(pipeline::prepare_scene(scenes::load_bundle(dir)));
      if (sc.empty()) throw UsageError("--scenes lists no directories");

      pipeline::Model m = pipeline::Model::make(mc);
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<pipeline::LossRow> rows;
      try {
        rows = pipeline::train_toy(m, sc, tc, [&](const pipeline::LossRow& r) {
          if (r.step % 50 == 0) std::fprintf(stderr, "step %zu total %.6f\n", r.step, r.total);
        });
      } catch (const pipeline::TrainingError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        if (e.step > 0)
          std::fprintf(stderr, "last finite step: %zu\n", e.step - 1);
        else
          std::fprintf(stderr, "no finite step\n");
        return kNumeric;
      }
      io::atomic_write(weights_out, io::checkpoint_string(m.ps));
      io::atomic_write(loss_out, pipeline::loss_csv(rows));
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (rows.empty())
        std::printf("0 steps; wrote initial weights to %s\n", weights_out.c_str());
      else
        std::printf("%zu steps in %.1f s; total loss %.6f -> %.6f; weights %s, loss curve %s\n", rows.size(), secs,
                    rows.front().total, rows.back().total, weights_out.c_str(), loss_out.c_str());
      return 0;
    }

    if (*recon) {
      const pipeline::Model m = load_weights(weights, load_config(config_path));
      const scenes::Bundle b = scenes::load_bundle(scene_dir);
      refuse_existing(out_path, force);
      const auto r = pipeline::reconstruct_bundle(m, b, static_cast<std::size_t>(std::max(0, k_views)));
      io::write_ply(out_path, r.mesh, recon->count("--binary") > 0);
      std::printf("%zu views; voxels coarse %zu medium %zu fine %zu; mesh %zu vertices %zu faces -> %s\n",
                  r.views.size(), r.stage_voxels[0].size(), r.stage_voxels[1].size(), r.stage_voxels[2].size(),
                  r.mesh.vertices.size(), r.mesh.faces.size(), out_path.c_str());
      return 0;
    }

    if (*eval) {
      if (mesh_path.empty() == weights.empty()) throw UsageError("eval needs exactly one of --mesh or --weights");
      const scenes::Bundle b = scenes::load_bundle(scene_dir);
      refuse_existing(out_path, force);
      geom::TriangleMesh mesh;
      if (!mesh_path.empty()) {
        if (!fs::exists(mesh_path)) throw UsageError("mesh not found: " + mesh_path);
        mesh = io::read_ply(mesh_path);
      } else {
        mesh = pipeline::reconstruct_bundle(load_weights(weights, load_config(config_path)), b,
                                            static_cast<std::size_t>(std::max(0, k_views)))
                   .mesh;
      }
      const auto mm = pipeline::evaluate_mesh(mesh, b.gt_mesh, tau);
      const auto dm = pipeline::evaluate_depth(mesh, b);
      io::atomic_write(out_path, mesh_csv(mm, &dm));
      std::printf("acc %.4f m comp %.4f m prec %.4f recall %.4f fscore %.4f abs_rel %.4f -> %s\n", mm.acc, mm.comp,
                  mm.prec, mm.recall, mm.fscore, dm.abs_rel, out_path.c_str());
      return 0;
    }

    if (*stab) {
      refuse_existing(out_path, force);
      std::vector<metrics::StabilityRow> rows;
      if (!rows_path.empty()) {
        rows = read_rows(rows_path);
      } else {
        if (weights.empty() || scene_dir.empty()) throw UsageError("stability needs --metrics, or --weights and --scene");
        const pipeline::Model m = load_weights(weights, load_config(config_path));
        rows = pipeline::view_sweep(m, scenes::load_bundle(scene_dir), parse_counts(sweep), tau);
      }
      const auto rep = metrics::stability_report(rows);
      io::atomic_write(out_path, stability_csv(rows, rep));
      for (const auto& r : rows)
        std::printf("views %g: prec %.4f recall %.4f fscore %.4f\n", r.views, r.prec, r.recall, r.fscore);
      std::printf("CV %.4f %%, PRR(F) %.4f %%, mean PRR %.4f %%, max drop %.4f %%, SI %.4f -> %s\n", rep.cv,
                  rep.prr_fscore, rep.mean_prr, rep.max_drop, rep.si, out_path.c_str());
      return 0;
    }

    if (*verify) {
      if (scene_dir.empty() && weights.empty()) throw UsageError("verify needs --scene and/or --weights");
      std::vector<Check> checks;
      if (!scene_dir.empty()) checks = verify_bundle(scene_dir);
      if (!weights.empty())
        for (auto& c : verify_weights(weights)) checks.push_back(c);
      bool ok = true;
      for (const auto& c : checks) {
        std::printf("%s %s%s%s\n", c.ok ? "PASS" : "FAIL", c.name.c_str(), c.detail.empty() ? "" : ": ",
                    c.detail.c_str());
        ok = ok && c.ok;
      }
      return ok ? 0 : kUsage;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const EvaluationError& e) {
    std::fprintf(stderr, "evaluation failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
