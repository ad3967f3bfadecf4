#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ipdr/acm.hpp"
#include "ipdr/geometry.hpp"
#include "ipdr/io.hpp"
#include "ipdr/ipsd.hpp"
#include "ipdr/marching_cubes.hpp"
#include "ipdr/metrics.hpp"
#include "ipdr/nn.hpp"
#include "ipdr/parallel.hpp"
#include "ipdr/pce.hpp"
#include "ipdr/scenes.hpp"

namespace ipdr::pipeline {

using geom::CameraModel;
using geom::GridSpec;

/// Non-finite loss during training; `step` is the first failing step.
struct TrainingError : std::runtime_error {
  std::size_t step;
  TrainingError(std::size_t s, const std::string& msg) : std::runtime_error(msg), step(s) {}
};

enum Level : std::size_t { kCoarse = 0, kMedium = 1, kFine = 2 };
inline constexpr std::size_t kLevels = 3;
/// Feature-map stride relative to the input image, per level.
inline constexpr std::array<std::size_t, 3> kStride = {8, 4, 2};

struct ModelConfig {
  std::size_t M = 16;
  std::array<std::size_t, 3> widths{32, 24, 16};  // coarse, medium, fine
  std::size_t hidden = 32;
  std::size_t key_dim = 16;
  double conf_tau = 0.05;
  bool ablate = false;  // drop PCE and ACM; cost volume = plain back-projection
  bool cues = true;
  std::uint64_t seed = 42;

  void validate() const {
    if (M < 1 || M > 64) throw ArgumentError("model: state size M must lie in [1, 64]");
    if (!(widths[0] > widths[1] && widths[1] > widths[2] && widths[2] > 0))
      throw ArgumentError("model: widths must be strictly decreasing from coarse to fine");
    if (hidden == 0 || key_dim == 0) throw ArgumentError("model: hidden and key widths must be positive");
    if (!(conf_tau > 0 && conf_tau < 1)) throw ArgumentError("model: confidence threshold must lie in (0, 1)");
  }

  std::size_t value_width(std::size_t level) const { return widths[level] + (cues ? ipsd::kCueWidth : 0); }
  std::size_t desc_width(std::size_t level) const { return 2 * value_width(level); }

  io::Config to_config() const {
    io::Config c;
    c.set("model.M", std::to_string(M));
    c.set("model.widths",
          "[" + std::to_string(widths[0]) + ", " + std::to_string(widths[1]) + ", " + std::to_string(widths[2]) + "]");
    c.set("model.hidden", std::to_string(hidden));
    c.set("model.key_dim", std::to_string(key_dim));
    c.set("model.conf_tau", io::fmt_double(conf_tau));
    c.set("model.ablate", ablate ? "true" : "false");
    c.set("model.cues", cues ? "true" : "false");
    c.set("model.seed", std::to_string(seed));
    return c;
  }

  static ModelConfig from_config(const io::Config& c) {
    ModelConfig m;
    auto count = [&](const std::string& k, std::size_t dflt) {
      const long v = c.get_int(k, static_cast<long>(dflt));
      if (v < 0) throw ArgumentError(k + " must be non-negative");
      return static_cast<std::size_t>(v);
    };
    m.M = count("model.M", m.M);
    const auto w = c.get_array("model.widths", {double(m.widths[0]), double(m.widths[1]), double(m.widths[2])});
    if (w.size() != 3) throw ArgumentError("model.widths needs three entries");
    for (int i = 0; i < 3; ++i) {
      if (!(w[i] >= 1) || w[i] != std::floor(w[i])) throw ArgumentError("model.widths entries must be positive integers");
      m.widths[i] = static_cast<std::size_t>(w[i]);
    }
    m.hidden = count("model.hidden", m.hidden);
    m.key_dim = count("model.key_dim", m.key_dim);
    m.conf_tau = c.get_double("model.conf_tau", m.conf_tau);
    m.ablate = c.get_bool("model.ablate", m.ablate);
    m.cues = c.get_bool("model.cues", m.cues);
    m.seed = static_cast<std::uint64_t>(count("model.seed", m.seed));
    m.validate();
    return m;
  }
};

// ---------------------------------------------------------------------------
// 2D feature stack

using Pyramid = std::array<ad::Var, 3>;  // indexed by Level

struct Backbone {
  std::array<ad::Var, 3> w, b;        // stride-2 3x3 convs: image -> fine -> medium -> coarse
  std::array<ad::Var, 2> lat_w, lat_b;  // 1x1 convs: coarse -> medium, medium -> fine

  static Backbone make(nn::ParamSet& ps, const std::array<std::size_t, 3>& widths, nn::Rng& rng) {
    Backbone bb;
    const std::size_t chans[4] = {3, widths[kFine], widths[kMedium], widths[kCoarse]};
    for (std::size_t s = 0; s < 3; ++s) {
      const double sd = std::sqrt(2.0 / static_cast<double>(chans[s] * 9));
      bb.w[s] = ps.add("backbone.conv" + std::to_string(s) + ".w", nn::randn({chans[s + 1], chans[s], 3, 3}, sd, rng));
      bb.b[s] = ps.add("backbone.conv" + std::to_string(s) + ".b", Tensor({chans[s + 1]}));
    }
    for (std::size_t s = 0; s < 2; ++s) {
      const std::size_t in = chans[3 - s], out = chans[2 - s];
      bb.lat_w[s] = ps.add("backbone.lat" + std::to_string(s) + ".w",
                           nn::randn({out, in, 1, 1}, std::sqrt(1.0 / static_cast<double>(in)), rng));
      bb.lat_b[s] = ps.add("backbone.lat" + std::to_string(s) + ".b", Tensor({out}));
    }
    return bb;
  }
};

/// Three stride-2 conv + GELU stages, then coarse-to-fine fusion of each
/// upsampled map into the next finer one through a 1x1 conv.
inline Pyramid extract_features(const Backbone& bb, const ad::Var& image) {
  ad::detail::require_rank(image, 3, "extract_features");
  if (image.dim(0) != 3) throw ArgumentError("extract_features: images must have 3 channels");
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0)
    throw ArgumentError("extract_features: image height and width must be multiples of 8");
  ad::Var c1 = ad::gelu(ad::conv2d(image, bb.w[0], bb.b[0], 2, 1));
  ad::Var c2 = ad::gelu(ad::conv2d(c1, bb.w[1], bb.b[1], 2, 1));
  ad::Var c3 = ad::gelu(ad::conv2d(c2, bb.w[2], bb.b[2], 2, 1));
  Pyramid p;
  p[kCoarse] = c3;
  p[kMedium] = ad::add(c2, ad::conv2d(ad::upsample2(c3), bb.lat_w[0], bb.lat_b[0], 1, 0));
  p[kFine] = ad::add(c1, ad::conv2d(ad::upsample2(p[kMedium]), bb.lat_w[1], bb.lat_b[1], 1, 0));
  return p;
}

struct FeaturePyramid {
  std::vector<Pyramid> views;
};

inline FeaturePyramid extract_features(const Backbone& bb, const std::vector<Tensor>& images) {
  FeaturePyramid fp;
  for (const auto& im : images) {
    if (im.shape() != images.front().shape()) throw ArgumentError("extract_features: images differ in size");
    fp.views.push_back(extract_features(bb, ad::constant(im)));
  }
  return fp;
}

// ---------------------------------------------------------------------------
// Multi-view fusion

struct FusionHead {
  ad::Var query;  // d_k
  nn::Linear key, value;
  std::size_t C_v = 0, d_k = 0;

  static FusionHead make(nn::ParamSet& ps, const std::string& name, std::size_t C_v, std::size_t d_k, nn::Rng& rng) {
    FusionHead h;
    h.C_v = C_v;
    h.d_k = d_k;
    h.query = ps.add(name + ".query", nn::randn({d_k, 1}, 1.0 / std::sqrt(static_cast<double>(d_k)), rng));
    h.key = nn::Linear::make(ps, name + ".key", C_v, d_k, rng);
    h.value = nn::Linear::make(ps, name + ".value", C_v, C_v, rng);
    return h;
  }
};

struct FusionOutput {
  ad::Var fused;    // K x 2C_v: attention-weighted mean of values, then weighted variance
  ad::Var scores;   // K x N
  ad::Var weights;  // K x N, rows on the simplex over valid views (zero rows when none)
  std::vector<std::uint8_t> mask;   // K x N
  std::vector<std::uint8_t> valid;  // K, at least one valid view
};

/// Single-head attention across views with a learned query. Scores are
/// <key(TCV_i), q> / sqrt(d_k); the softmax runs over the views valid at each
/// voxel. The weighted variance of the values rides along the weighted mean.
inline FusionOutput fuse_views(const FusionHead& h, const std::vector<ipsd::CostVolume>& vols) {
  if (vols.empty()) throw ArgumentError("fuse_views: no views");
  const std::size_t K = vols[0].valid.size(), N = vols.size();
  for (const auto& v : vols)
    if (v.valid.size() != K || v.features.dim(0) != K || v.features.dim(1) != h.C_v)
      throw ArgumentError("fuse_views: cost volumes do not share one voxel list and width");
  const double inv = 1.0 / std::sqrt(static_cast<double>(h.d_k));
  std::vector<ad::Var> cols, values;
  for (const auto& v : vols) {
    cols.push_back(ad::scale(ad::matmul(h.key(v.features), h.query), inv));
    values.push_back(h.value(v.features));
  }
  FusionOutput out;
  out.mask.assign(K * N, 0);
  out.valid.assign(K, 0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < N; ++i)
      if (vols[i].valid[k]) {
        out.mask[k * N + i] = 1;
        out.valid[k] = 1;
      }
  out.scores = ad::concat_cols(cols);
  out.weights = ad::masked_softmax_rows(out.scores, out.mask);
  ad::Var mean, var;
  for (std::size_t i = 0; i < N; ++i) {
    ad::Var t = ad::mul_colvec(values[i], ad::slice_cols(out.weights, i, i + 1));
    mean = mean.defined() ? ad::add(mean, t) : t;
  }
  for (std::size_t i = 0; i < N; ++i) {
    ad::Var t = ad::mul_colvec(ad::square(ad::sub(values[i], mean)), ad::slice_cols(out.weights, i, i + 1));
    var = var.defined() ? ad::add(var, t) : t;
  }
  out.fused = ad::concat_cols({mean, var});
  return out;
}

// ---------------------------------------------------------------------------
// Model

struct StageModules {
  pce::PceParams pce;
  acm::AcmParams acm;
  ipsd::IpsdParams ipsd;
  FusionHead fusion;
  nn::Mlp2 head;  // 2 occupancy logits (coarse, medium) or one pre-tanh TSDF value (fine)
};

struct Model {
  ModelConfig cfg;
  nn::ParamSet ps;
  Backbone backbone;
  std::array<StageModules, 3> stages;

  static Model make(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    nn::Rng rng(cfg.seed);
    // configuration record first, so a checkpoint describes its own shape
    m.ps.add("meta.config", Tensor({9}, {double(cfg.M), double(cfg.widths[0]), double(cfg.widths[1]),
                                         double(cfg.widths[2]), double(cfg.hidden), double(cfg.key_dim),
                                         cfg.conf_tau, cfg.ablate ? 1.0 : 0.0, cfg.cues ? 1.0 : 0.0}));
    m.backbone = Backbone::make(m.ps, cfg.widths, rng);
    const char* names[3] = {"coarse", "medium", "fine"};
    for (std::size_t r = 0; r < kLevels; ++r) {
      const std::string n = names[r];
      const std::size_t C = cfg.widths[r], Cv = cfg.value_width(r);
      StageModules& s = m.stages[r];
      s.pce = pce::PceParams::make(m.ps, n + ".pce", C, C, cfg.M, rng);
      s.acm = acm::AcmParams::make(m.ps, n + ".acm", C);
      s.ipsd = ipsd::IpsdParams::make(m.ps, n + ".ipsd", 2 * C, C, Cv, cfg.M, cfg.hidden, rng);
      s.fusion = FusionHead::make(m.ps, n + ".fusion", Cv, cfg.key_dim, rng);
      const std::size_t in = cfg.desc_width(r) + (r == kCoarse ? 0 : cfg.desc_width(r - 1));
      s.head = nn::Mlp2::make(m.ps, n + ".head", in, cfg.hidden, r == kFine ? 1 : 2, rng);
    }
    return m;
  }
};

/// Reads the configuration record of a checkpoint (seed is not stored).
inline ModelConfig config_from_checkpoint(const std::string& bytes) {
  for (const auto& rec : io::parse_checkpoint(bytes)) {
    if (rec.name != "meta.config") continue;
    const Tensor& t = rec.value;
    if (t.size() != 9) throw FormatError("checkpoint record meta.config has " + std::to_string(t.size()) + " entries");
    ModelConfig c;
    c.M = static_cast<std::size_t>(t[0]);
    c.widths = {static_cast<std::size_t>(t[1]), static_cast<std::size_t>(t[2]), static_cast<std::size_t>(t[3])};
    c.hidden = static_cast<std::size_t>(t[4]);
    c.key_dim = static_cast<std::size_t>(t[5]);
    c.conf_tau = t[6];
    c.ablate = t[7] != 0.0;
    c.cues = t[8] != 0.0;
    c.validate();
    return c;
  }
  throw FormatError("checkpoint has no meta.config record");
}

/// Names the first configuration field that differs, or returns "".
inline std::string config_mismatch(const ModelConfig& a, const ModelConfig& b) {
  if (a.M != b.M) return "model.M";
  if (a.widths != b.widths) return "model.widths";
  if (a.hidden != b.hidden) return "model.hidden";
  if (a.key_dim != b.key_dim) return "model.key_dim";
  if (a.conf_tau != b.conf_tau) return "model.conf_tau";
  if (a.ablate != b.ablate) return "model.ablate";
  if (a.cues != b.cues) return "model.cues";
  return "";
}

inline Model load_model(const std::string& bytes) {
  Model m = Model::make(config_from_checkpoint(bytes));
  io::load_checkpoint(m.ps, bytes);
  return m;
}

// ---------------------------------------------------------------------------
// Per-view encoding

struct ViewEncoding {
  Pyramid feat;                            // raw backbone features, for back-projection
  Pyramid state;                           // IPSD state maps (unset when ablated)
  std::vector<std::uint8_t> coarse_mask;  // PCE confidence mask at the coarse level; empty when ablated
};

/// SSM discretizations of every stage, shared by all views of one forward pass.
struct Discretized {
  std::array<ssm::DiscretizedSsm, 3> pce, ipsd;
};

inline Discretized discretize_all(const Model& m) {
  Discretized d;
  if (m.cfg.ablate) return d;
  for (std::size_t r = 0; r < kLevels; ++r) {
    d.pce[r] = ssm::discretize(m.stages[r].pce.ssm);
    d.ipsd[r] = ssm::discretize(m.stages[r].ipsd.ssm_A);
  }
  return d;
}

inline ViewEncoding encode_view(const Model& m, const Tensor& image, const Discretized& d) {
  ViewEncoding e;
  e.feat = extract_features(m.backbone, ad::constant(image));
  if (m.cfg.ablate) return e;
  for (std::size_t r = 0; r < kLevels; ++r) {
    const StageModules& s = m.stages[r];
    pce::PceOutput po = pce::pce_forward(s.pce, e.feat[r], d.pce[r]);
    if (r == kCoarse) e.coarse_mask = pce::confidence_mask(po, m.cfg.conf_tau);
    e.state[r] = ipsd::state_project(s.ipsd, acm::acm_forward(s.acm, po.encoded), d.ipsd[r]);
  }
  return e;
}

inline ViewEncoding encode_view(const Model& m, const Tensor& image) {
  return encode_view(m, image, discretize_all(m));
}

inline std::vector<ViewEncoding> encode_views(const Model& m, const std::vector<const Tensor*>& images) {
  const Discretized d = discretize_all(m);
  std::vector<ViewEncoding> out;
  for (const Tensor* im : images) out.push_back(encode_view(m, *im, d));
  return out;
}

// ---------------------------------------------------------------------------
// Coarse-to-fine stages

/// Index of the parent voxel in `parent` (whose child() is `child`).
inline std::size_t parent_of(const GridSpec& child, const GridSpec& parent, std::size_t idx) {
  const auto c = child.coords(idx);
  return parent.index(c[0] / 2, c[1] / 2, c[2] / 2);
}

/// Children (in the 2x finer grid) of every listed voxel flagged occupied,
/// sorted ascending.
inline std::vector<std::size_t> occupancy_filter(const GridSpec& parent, const std::vector<std::size_t>& voxels,
                                                 const std::vector<std::uint8_t>& occupied) {
  if (occupied.size() != voxels.size()) throw ArgumentError("occupancy_filter: one flag per voxel expected");
  const GridSpec child = parent.child();
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < voxels.size(); ++k) {
    if (!occupied[k]) continue;
    const auto c = parent.coords(voxels[k]);
    for (std::size_t dz = 0; dz < 2; ++dz)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) out.push_back(child.index(2 * c[0] + dx, 2 * c[1] + dy, 2 * c[2] + dz));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Argmax of two logits per row.
inline std::vector<std::uint8_t> occupancy_state(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) throw DimensionError("occupancy_state: logits must be K x 2");
  std::vector<std::uint8_t> s(logits.dim(0));
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = logits(k, 1) > logits(k, 0) ? 1 : 0;
  return s;
}

/// Row of each query in a sorted voxel list.
inline std::vector<std::size_t> rows_in(const std::vector<std::size_t>& sorted, const std::vector<std::size_t>& q) {
  std::vector<std::size_t> rows(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) {
    auto it = std::lower_bound(sorted.begin(), sorted.end(), q[k]);
    if (it == sorted.end() || *it != q[k]) throw ArgumentError("parent voxel missing from the coarser stage");
    rows[k] = static_cast<std::size_t>(it - sorted.begin());
  }
  return rows;
}

/// Ablation cost volume: the back-projected features (plus ray cues), masked.
inline ipsd::CostVolume plain_cost_volume(const geom::BackProjection& bp, const CameraModel& cam, const GridSpec& grid,
                                          const std::vector<std::size_t>& voxels, bool cues, std::size_t level) {
  ad::Var f = bp.features;
  if (cues) f = ad::concat_cols({f, ad::constant(ipsd::ray_cues(grid, voxels, bp.proj, cam))});
  Tensor mask({voxels.size()});
  for (std::size_t k = 0; k < voxels.size(); ++k) mask[k] = bp.proj.valid[k] ? 1.0 : 0.0;
  return {ad::mul_colvec(f, ad::constant(std::move(mask))), bp.proj.valid, level};
}

struct StageResult {
  std::size_t level = 0;
  std::vector<std::size_t> voxels;
  FusionOutput fusion;
  ad::Var out;  // K x 2 logits, or K x 1 TSDF in [-1, 1]
  std::vector<geom::VoxelProjection> proj;  // per view
};

inline StageResult run_stage(const Model& m, std::size_t level, const GridSpec& grid,
                             const std::vector<std::size_t>& voxels, const std::vector<ViewEncoding>& enc,
                             const std::vector<CameraModel>& cams, const ad::Var& parent_fused = {},
                             const std::vector<std::size_t>& parent_rows = {}) {
  if (enc.size() != cams.size() || enc.empty()) throw ArgumentError("run_stage: one encoding per camera expected");
  if ((level == kCoarse) != !parent_fused.defined())
    throw ArgumentError("run_stage: only the coarse stage runs without a parent");
  const StageModules& s = m.stages[level];
  StageResult res;
  res.level = level;
  res.voxels = voxels;
  std::vector<ipsd::CostVolume> vols;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const std::vector<std::uint8_t>* mask =
        level == kCoarse && !enc[i].coarse_mask.empty() ? &enc[i].coarse_mask : nullptr;
    geom::BackProjection bp = geom::back_project(grid, voxels, enc[i].feat[level], cams[i], mask);
    if (m.cfg.ablate)
      vols.push_back(plain_cost_volume(bp, cams[i], grid, voxels, m.cfg.cues, level));
    else
      vols.push_back(
          ipsd::build_cost_volume(s.ipsd, enc[i].state[level], bp, cams[i], grid, voxels, m.cfg.cues, level));
    res.proj.push_back(std::move(bp.proj));
  }
  res.fusion = fuse_views(s.fusion, vols);
  ad::Var in = res.fusion.fused;
  if (level != kCoarse) in = ad::concat_cols({in, ad::gather_rows(parent_fused, parent_rows)});
  ad::Var y = s.head(in);
  res.out = level == kFine ? ad::tanh(y) : y;
  return res;
}

// ---------------------------------------------------------------------------
// Losses

struct StageTargets {
  std::vector<double> view_targets;        // K x N, rows sum to 1 where supervised
  std::vector<std::uint8_t> supervised;    // K, fusion supervision present
  std::vector<double> label;               // K: occupancy in {0, 1}, or GT TSDF at the fine level
  std::vector<std::uint8_t> label_valid;  // K
};

struct LossReport {
  std::array<double, 3> l_fusion{};
  std::array<double, 2> l_occ{};
  double l_tsdf = 0.0;
  double total = 0.0;
  ad::Var total_var;
};

/// Cross-entropy between target view distributions and the fusion weights,
/// averaged over supervised voxels.
inline ad::Var fusion_ce(const FusionOutput& f, const StageTargets& t) {
  const std::size_t K = f.valid.size(), N = K ? f.mask.size() / K : 0;
  if (t.view_targets.size() != K * N || t.supervised.size() != K)
    throw ArgumentError("fusion loss: targets do not match the stage's voxels and views");
  std::size_t n = 0;
  Tensor w({K, N});
  for (std::size_t k = 0; k < K; ++k) {
    if (!t.supervised[k]) continue;
    ++n;
    for (std::size_t i = 0; i < N; ++i) w[k * N + i] = t.view_targets[k * N + i];
  }
  if (n == 0) return ad::constant(Tensor::scalar(0.0));
  ad::Var logw = ad::masked_log_softmax_rows(f.scores, f.mask);
  return ad::scale(ad::sum(ad::mul(logw, ad::constant(std::move(w)))), -1.0 / static_cast<double>(n));
}

/// Mean of softplus(z) - y z with z = logit_1 - logit_0 over labelled voxels.
inline ad::Var occupancy_bce(const ad::Var& logits, const StageTargets& t) {
  const std::size_t K = logits.dim(0);
  if (logits.dim(1) != 2 || t.label.size() != K || t.label_valid.size() != K)
    throw ArgumentError("occupancy loss: labels do not match the stage's voxels");
  Tensor y({K, 1}), m({K, 1});
  std::size_t n = 0;
  for (std::size_t k = 0; k < K; ++k)
    if (t.label_valid[k]) {
      m[k] = 1.0;
      y[k] = t.label[k];
      ++n;
    }
  if (n == 0) return ad::constant(Tensor::scalar(0.0));
  ad::Var z = ad::sub(ad::slice_cols(logits, 1, 2), ad::slice_cols(logits, 0, 1));
  ad::Var per = ad::sub(ad::softplus(z), ad::mul(ad::constant(std::move(y)), z));
  return ad::scale(ad::sum(ad::mul(per, ad::constant(std::move(m)))), 1.0 / static_cast<double>(n));
}

/// Mean |tsdf - gt| over labelled voxels.
inline ad::Var tsdf_l1(const ad::Var& tsdf, const StageTargets& t) {
  const std::size_t K = tsdf.dim(0);
  if (tsdf.dim(1) != 1 || t.label.size() != K || t.label_valid.size() != K)
    throw ArgumentError("TSDF loss: labels do not match the stage's voxels");
  Tensor g({K, 1}), m({K, 1});
  std::size_t n = 0;
  for (std::size_t k = 0; k < K; ++k)
    if (t.label_valid[k]) {
      m[k] = 1.0;
      g[k] = t.label[k];
      ++n;
    }
  if (n == 0) return ad::constant(Tensor::scalar(0.0));
  ad::Var e = ad::abs(ad::sub(tsdf, ad::constant(std::move(g))));
  return ad::scale(ad::sum(ad::mul(e, ad::constant(std::move(m)))), 1.0 / static_cast<double>(n));
}

inline LossReport compute_losses(const std::array<StageResult, 3>& st, const std::array<StageTargets, 3>& gt) {
  LossReport r;
  std::vector<ad::Var> parts;
  for (std::size_t l = 0; l < kLevels; ++l) {
    if (st[l].level != l) throw ArgumentError("compute_losses: stages out of order");
    ad::Var lf = fusion_ce(st[l].fusion, gt[l]);
    r.l_fusion[l] = lf.value()[0];
    parts.push_back(lf);
  }
  for (std::size_t l = 0; l < 2; ++l) {
    ad::Var lo = occupancy_bce(st[l].out, gt[l]);
    r.l_occ[l] = lo.value()[0];
    parts.push_back(lo);
  }
  ad::Var lt = tsdf_l1(st[kFine].out, gt[kFine]);
  r.l_tsdf = lt.value()[0];
  parts.push_back(lt);
  r.total_var = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) r.total_var = ad::add(r.total_var, parts[i]);
  r.total = r.total_var.value()[0];
  return r;
}

/// Uniform mass on the views whose GT depth at the voxel's pixel lies within
/// `trunc` of the voxel's z-depth. Labels come from `gt` at the voxels.
inline StageTargets make_targets(const StageResult& s, const geom::VoxelVolume& gt,
                                 const std::vector<const geom::DepthImage*>& depth, double trunc) {
  const std::size_t K = s.voxels.size(), N = s.proj.size();
  if (depth.size() != N) throw ArgumentError("make_targets: one depth image per view expected");
  StageTargets t;
  t.view_targets.assign(K * N, 0.0);
  t.supervised.assign(K, 0);
  t.label.assign(K, 0.0);
  t.label_valid = s.fusion.valid;
  for (std::size_t k = 0; k < K; ++k) {
    if (s.voxels[k] >= gt.values.size()) throw ArgumentError("make_targets: voxel outside the GT grid");
    const double v = gt.values[s.voxels[k]];
    t.label[k] = s.level == kFine ? v : (std::abs(v) < 1.0 ? 1.0 : 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < N; ++i) {
      if (!s.proj[i].valid[k]) continue;
      const geom::DepthImage& d = *depth[i];
      const long pj = std::clamp<long>(std::lround(s.proj[i].px[k]), 0, static_cast<long>(d.W) - 1);
      const long pi = std::clamp<long>(std::lround(s.proj[i].py[k]), 0, static_cast<long>(d.H) - 1);
      const double D = d.at(static_cast<std::size_t>(pi), static_cast<std::size_t>(pj));
      if (std::isfinite(D) && std::abs(s.proj[i].depth[k] - D) < trunc) {
        t.view_targets[k * N + i] = 1.0;
        ++n;
      }
    }
    if (n == 0) continue;
    t.supervised[k] = 1;
    for (std::size_t i = 0; i < N; ++i) t.view_targets[k * N + i] /= static_cast<double>(n);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t steps = 500;
  double lr = 1e-3;
  std::uint64_t seed = 42;
  std::size_t views_min = 6, views_max = 10;  // views drawn per step (0 = all)
  std::size_t fine_samples = 1536;            // 0 = every fine candidate
  std::size_t medium_extra = 512, coarse_extra = 512;

  void validate() const {
    if (!(lr >= 0 && std::isfinite(lr))) throw ArgumentError("train: lr must be finite and non-negative");
    if (views_min > views_max) throw ArgumentError("train: views_min exceeds views_max");
  }
};

struct LossRow {
  std::size_t step = 0;
  double l_fusion = 0, l_occ = 0, l_tsdf = 0, total = 0;
};

inline std::string loss_csv(const std::vector<LossRow>& rows) {
  std::string s = "step,l_fusion,l_occ,l_tsdf,total\n";
  for (const auto& r : rows)
    s += io::csv_row({std::to_string(r.step), io::fmt_double(r.l_fusion), io::fmt_double(r.l_occ),
                      io::fmt_double(r.l_tsdf), io::fmt_double(r.total)});
  return s;
}

struct TrainingScene {
  std::vector<Tensor> images;
  std::vector<CameraModel> cams;
  std::array<GridSpec, 3> grids;
  std::array<geom::VoxelVolume, 3> gt;
  std::vector<geom::DepthImage> gt_depth;
  std::vector<std::size_t> medium_cand, fine_cand, fine_band;
};

inline TrainingScene prepare_scene(const scenes::Bundle& b) {
  TrainingScene s;
  s.images = b.images;
  s.cams = b.cams;
  s.gt = b.gt_tsdf;
  for (std::size_t l = 0; l < kLevels; ++l) s.grids[l] = b.gt_tsdf[l].grid;
  s.gt_depth.resize(b.cams.size());
  for (std::size_t i = 0; i < b.cams.size(); ++i) s.gt_depth[i] = geom::render_depth(b.gt_mesh, b.cams[i]);
  auto occupied = [&](std::size_t l) {
    std::vector<std::uint8_t> o(s.gt[l].values.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(s.gt[l].values[i]) < 1.0;
    return o;
  };
  s.medium_cand = occupancy_filter(s.grids[kCoarse], geom::all_voxels(s.grids[kCoarse]), occupied(kCoarse));
  std::vector<std::uint8_t> om = occupied(kMedium), sel(s.medium_cand.size());
  for (std::size_t k = 0; k < sel.size(); ++k) sel[k] = om[s.medium_cand[k]];
  s.fine_cand = occupancy_filter(s.grids[kMedium], s.medium_cand, sel);
  for (auto v : s.fine_cand)
    if (std::abs(s.gt[kFine].values[v]) < 1.0) s.fine_band.push_back(v);
  return s;
}

struct Batch {
  std::vector<std::size_t> views;
  std::array<std::vector<std::size_t>, 3> voxels;
};

/// Fine samples (half from the truncation band), their medium and coarse
/// ancestors, plus extra random voxels at the coarser levels drawn from the
/// GT-occupied children (teacher forcing).
inline Batch sample_batch(const TrainingScene& s, const TrainConfig& c, std::mt19937_64& rng) {
  Batch b;
  const std::size_t N = s.cams.size();
  std::size_t nv = N;
  if (c.views_max > 0) {
    const std::size_t lo = std::min(c.views_min, N), hi = std::min(c.views_max, N);
    nv = lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
  }
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  b.views.assign(order.begin(), order.begin() + static_cast<long>(std::max<std::size_t>(nv, 1)));
  std::sort(b.views.begin(), b.views.end());

  auto draw = [&](const std::vector<std::size_t>& from, std::size_t n, std::vector<std::size_t>& into) {
    if (from.empty()) return;
    for (std::size_t i = 0; i < n; ++i) into.push_back(from[rng() % from.size()]);
  };
  auto finish = [](std::vector<std::size_t>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  if (c.fine_samples == 0) {
    b.voxels[kFine] = s.fine_cand;
    b.voxels[kMedium] = s.medium_cand;
    b.voxels[kCoarse] = geom::all_voxels(s.grids[kCoarse]);
    return b;
  }
  draw(s.fine_band, c.fine_samples / 2, b.voxels[kFine]);
  draw(s.fine_cand, c.fine_samples - c.fine_samples / 2, b.voxels[kFine]);
  finish(b.voxels[kFine]);
  for (auto v : b.voxels[kFine]) b.voxels[kMedium].push_back(parent_of(s.grids[kFine], s.grids[kMedium], v));
  draw(s.medium_cand, c.medium_extra, b.voxels[kMedium]);
  finish(b.voxels[kMedium]);
  for (auto v : b.voxels[kMedium]) b.voxels[kCoarse].push_back(parent_of(s.grids[kMedium], s.grids[kCoarse], v));
  const auto all_coarse = geom::all_voxels(s.grids[kCoarse]);
  draw(all_coarse, c.coarse_extra, b.voxels[kCoarse]);
  finish(b.voxels[kCoarse]);
  return b;
}

struct BatchForward {
  std::array<StageResult, 3> stages;
  std::array<StageTargets, 3> targets;
};

inline BatchForward forward_batch(const Model& m, const TrainingScene& s, const Batch& b) {
  std::vector<const Tensor*> images;
  std::vector<CameraModel> cams;
  std::vector<const geom::DepthImage*> depth;
  for (auto i : b.views) {
    images.push_back(&s.images[i]);
    cams.push_back(s.cams[i]);
    depth.push_back(&s.gt_depth[i]);
  }
  const std::vector<ViewEncoding> enc = encode_views(m, images);
  BatchForward f;
  for (std::size_t l = 0; l < kLevels; ++l) {
    if (l == kCoarse) {
      f.stages[l] = run_stage(m, l, s.grids[l], b.voxels[l], enc, cams);
    } else {
      std::vector<std::size_t> parents;
      for (auto v : b.voxels[l]) parents.push_back(parent_of(s.grids[l], s.grids[l - 1], v));
      f.stages[l] = run_stage(m, l, s.grids[l], b.voxels[l], enc, cams, f.stages[l - 1].fusion.fused,
                              rows_in(b.voxels[l - 1], parents));
    }
    f.targets[l] = make_targets(f.stages[l], s.gt[l], depth, scenes::truncation(s.grids[l]));
  }
  return f;
}

/// Adam over every parameter; each step draws a view subset and voxel batch
/// from scene (step mod #scenes). Row `step` holds the loss before that
/// step's update.
inline std::vector<LossRow> train_toy(Model& m, const std::vector<TrainingScene>& scenes, const TrainConfig& c,
                                      const std::function<void(const LossRow&)>& progress = {}) {
  c.validate();
  if (scenes.empty()) throw ArgumentError("train_toy: no scenes");
  std::mt19937_64 rng(c.seed);
  nn::Adam opt(nn::AdamConfig{c.lr, 0.9, 0.999, 1e-8});
  std::vector<LossRow> rows;
  for (std::size_t step = 0; step < c.steps; ++step) {
    const TrainingScene& s = scenes[step % scenes.size()];
    const Batch b = sample_batch(s, c, rng);
    LossReport lr;
    try {
      BatchForward f = forward_batch(m, s, b);
      lr = compute_losses(f.stages, f.targets);
    } catch (const NumericError& e) {
      throw TrainingError(step, "training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(lr.total))
      throw TrainingError(step, "training diverged: non-finite loss at step " + std::to_string(step));
    LossRow row{step, lr.l_fusion[0] + lr.l_fusion[1] + lr.l_fusion[2], lr.l_occ[0] + lr.l_occ[1], lr.l_tsdf,
                lr.total};
    rows.push_back(row);
    if (progress) progress(row);
    m.ps.zero_grad();
    ad::backward(lr.total_var);
    opt.step(m.ps);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Inference

struct ReconstructOptions {
  std::size_t max_views = 20;
  std::size_t chunk = 4096;
};

struct Reconstruction {
  geom::TriangleMesh mesh;
  geom::VoxelVolume tsdf;                // fine grid; valid where predicted
  std::array<std::vector<std::size_t>, 3> stage_voxels;  // processed voxels per stage, sorted
  std::array<std::vector<std::uint8_t>, 2> occupied;     // coarse and medium decisions (valid and argmax)
  std::vector<std::size_t> views;                        // input indices used, in processing order
};

/// Views ordered by pose (then image bytes), so input order cannot change
/// floating-point reduction order.
inline std::vector<std::size_t> canonical_order(const std::vector<Tensor>& images,
                                                const std::vector<CameraModel>& cams) {
  std::vector<std::size_t> idx(cams.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    for (int i = 0; i < 16; ++i) {
      const double x = cams[a].pose(i / 4, i % 4), y = cams[b].pose(i / 4, i % 4);
      if (x != y) return x < y;
    }
    const auto da = images[a].data(), db = images[b].data();
    return std::lexicographical_compare(da.begin(), da.end(), db.begin(), db.end());
  });
  return idx;
}

namespace detail {

struct StageTable {
  std::vector<std::size_t> voxels;
  Tensor fused;  // K x D
  Tensor out;    // K x 2 or K x 1
  std::vector<std::uint8_t> valid;
};

inline StageTable run_chunked(const Model& m, std::size_t level, const GridSpec& grid,
                              const std::vector<std::size_t>& voxels, const std::vector<ViewEncoding>& enc,
                              const std::vector<CameraModel>& cams, const StageTable* parent,
                              const GridSpec* parent_grid, std::size_t chunk) {
  StageTable t;
  t.voxels = voxels;
  const std::size_t K = voxels.size(), D = m.cfg.desc_width(level), O = level == kFine ? 1 : 2;
  t.fused = Tensor({K, D});
  t.out = Tensor({K, O});
  t.valid.assign(K, 0);
  if (K == 0) return t;
  ad::Var parent_var;
  if (parent) parent_var = ad::constant(parent->fused);
  const std::size_t n_chunks = (K + chunk - 1) / chunk;
  parallel_for(n_chunks, [&](std::size_t cb, std::size_t ce) {
    ad::NoGrad guard;
    for (std::size_t c = cb; c < ce; ++c) {
      const std::size_t b = c * chunk, e = std::min(K, b + chunk);
      std::vector<std::size_t> sub(voxels.begin() + static_cast<long>(b), voxels.begin() + static_cast<long>(e));
      StageResult r;
      if (parent) {
        std::vector<std::size_t> pv;
        for (auto v : sub) pv.push_back(parent_of(grid, *parent_grid, v));
        r = run_stage(m, level, grid, sub, enc, cams, parent_var, rows_in(parent->voxels, pv));
      } else {
        r = run_stage(m, level, grid, sub, enc, cams);
      }
      const Tensor &f = r.fusion.fused.value(), &o = r.out.value();
      std::copy(f.data().begin(), f.data().end(), t.fused.data().begin() + static_cast<long>(b * D));
      std::copy(o.data().begin(), o.data().end(), t.out.data().begin() + static_cast<long>(b * O));
      std::copy(r.fusion.valid.begin(), r.fusion.valid.end(), t.valid.begin() + static_cast<long>(b));
    }
  });
  return t;
}

}  // namespace detail

/// Keyframes -> per-view encoding -> coarse occupancy over the whole grid ->
/// medium occupancy on the children of occupied coarse voxels -> fine TSDF on
/// the children of occupied medium voxels -> marching cubes. Voxels never
/// reached or seen by no view stay invalid.
inline Reconstruction reconstruct(const Model& m, const std::vector<Tensor>& images,
                                  const std::vector<CameraModel>& cams, const std::array<GridSpec, 3>& grids,
                                  const ReconstructOptions& opt = {}) {
  if (images.size() != cams.size()) throw ArgumentError("reconstruct: one camera per image expected");
  if (images.empty()) throw ArgumentError("reconstruct: no views");
  if (opt.chunk == 0) throw ArgumentError("reconstruct: chunk size must be positive");
  for (std::size_t l = 1; l < kLevels; ++l)
    if (!grids[l].same_as(grids[l - 1].child())) throw ArgumentError("reconstruct: grids are not nested");
  const auto order = canonical_order(images, cams);
  std::vector<CameraModel> sorted;
  for (auto i : order) sorted.push_back(cams[i]);
  const auto keep = geom::select_keyframes(sorted, opt.max_views);
  Reconstruction rec;
  std::vector<ViewEncoding> enc;
  std::vector<CameraModel> kc;
  {
    ad::NoGrad guard;
    std::vector<const Tensor*> kept;
    for (auto k : keep) {
      rec.views.push_back(order[k]);
      kept.push_back(&images[order[k]]);
      kc.push_back(sorted[k]);
    }
    enc = encode_views(m, kept);
  }
  rec.tsdf = geom::VoxelVolume::filled(grids[kFine], 1.0);
  rec.tsdf.valid.assign(grids[kFine].count(), 0);

  detail::StageTable coarse =
      detail::run_chunked(m, kCoarse, grids[kCoarse], geom::all_voxels(grids[kCoarse]), enc, kc, nullptr, nullptr,
                          opt.chunk);
  auto children = [&](const detail::StageTable& t, std::size_t level) {
    std::vector<std::uint8_t> occ = occupancy_state(t.out);
    for (std::size_t k = 0; k < occ.size(); ++k) occ[k] = occ[k] && t.valid[k];
    rec.stage_voxels[level] = t.voxels;
    rec.occupied[level] = occ;
    return occupancy_filter(grids[level], t.voxels, occ);
  };
  detail::StageTable medium = detail::run_chunked(m, kMedium, grids[kMedium], children(coarse, kCoarse), enc, kc,
                                                  &coarse, &grids[kCoarse], opt.chunk);
  detail::StageTable fine = detail::run_chunked(m, kFine, grids[kFine], children(medium, kMedium), enc, kc, &medium,
                                                &grids[kMedium], opt.chunk);
  rec.stage_voxels[kFine] = fine.voxels;
  for (std::size_t k = 0; k < fine.voxels.size(); ++k) {
    if (!fine.valid[k]) continue;
    rec.tsdf.values[fine.voxels[k]] = fine.out[k];
    rec.tsdf.valid[fine.voxels[k]] = 1;
  }
  rec.mesh = geom::marching_cubes(rec.tsdf);
  return rec;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// k indices spread over [0, n): floor(i n / k).
inline std::vector<std::size_t> even_subset(std::size_t n, std::size_t k) {
  if (k == 0 || k > n) throw ArgumentError("view subset of " + std::to_string(k) + " from " + std::to_string(n) + " views");
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i * n / k;
  return idx;
}

inline std::array<GridSpec, 3> bundle_grids(const scenes::Bundle& b) {
  return {b.gt_tsdf[0].grid, b.gt_tsdf[1].grid, b.gt_tsdf[2].grid};
}

/// Reconstruction from `k` evenly spaced views of a bundle (all when k = 0).
inline Reconstruction reconstruct_bundle(const Model& m, const scenes::Bundle& b, std::size_t k = 0,
                                         const ReconstructOptions& opt = {}) {
  std::vector<Tensor> images;
  std::vector<CameraModel> cams;
  for (auto i : even_subset(b.cams.size(), k == 0 ? b.cams.size() : k)) {
    images.push_back(b.images[i]);
    cams.push_back(b.cams[i]);
  }
  return reconstruct(m, images, cams, bundle_grids(b), opt);
}

/// Mesh metrics on area-sampled point sets of both meshes.
inline metrics::MeshMetrics evaluate_mesh(const geom::TriangleMesh& pred, const geom::TriangleMesh& gt,
                                          double tau = 0.05) {
  if (pred.faces.empty()) throw EvaluationError("evaluation: predicted mesh is empty");
  return metrics::mesh_metrics(metrics::sample_mesh(pred), metrics::sample_mesh(gt), tau);
}

/// Per-view depth of `pred` against the bundle's GT mesh, pooled over views.
inline metrics::DepthMetrics evaluate_depth(const geom::TriangleMesh& pred, const scenes::Bundle& b) {
  std::vector<double> d, g;
  for (const auto& cam : b.cams) {
    const auto pd = geom::render_depth(pred, cam), gd = geom::render_depth(b.gt_mesh, cam);
    d.insert(d.end(), pd.depth.begin(), pd.depth.end());
    g.insert(g.end(), gd.depth.begin(), gd.depth.end());
  }
  return metrics::depth_metrics(d, g);
}

/// Reconstruct and score once per view count.
inline std::vector<metrics::StabilityRow> view_sweep(const Model& m, const scenes::Bundle& b,
                                                     const std::vector<std::size_t>& counts, double tau = 0.05) {
  std::vector<metrics::StabilityRow> rows;
  for (auto k : counts) {
    const auto mm = evaluate_mesh(reconstruct_bundle(m, b, k).mesh, b.gt_mesh, tau);
    rows.push_back({static_cast<double>(k), mm.prec, mm.recall, mm.fscore});
  }
  return rows;
}

}  // namespace ipdr::pipeline
