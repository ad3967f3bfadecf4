#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <unordered_map>
#include <vector>

#include "ipdr/geometry.hpp"
#include "ipdr/parallel.hpp"

namespace ipdr::metrics {

using geom::Vec3;

// ---------------------------------------------------------------------------
// 2D depth metrics

struct DepthMetrics {
  double abs_rel = 0, sq_rel = 0, rmse = 0, delta_1_25 = 0;
  std::size_t count = 0;
};

/// Averages over pixels with a positive finite ground truth, a finite
/// prediction and (if given) a set mask entry.
inline DepthMetrics depth_metrics(const std::vector<double>& d, const std::vector<double>& gt,
                                  const std::vector<std::uint8_t>* mask = nullptr) {
  if (d.size() != gt.size() || (mask && mask->size() != gt.size()))
    throw DimensionError("depth_metrics: size mismatch");
  DepthMetrics m;
  double se = 0.0;
  std::size_t good = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    if (!(std::isfinite(gt[i]) && gt[i] > 0 && std::isfinite(d[i]) && d[i] > 0)) continue;
    const double e = d[i] - gt[i];
    m.abs_rel += std::abs(e) / gt[i];
    m.sq_rel += e * e / gt[i];
    se += e * e;
    if (std::max(d[i] / gt[i], gt[i] / d[i]) < 1.25) ++good;
    ++m.count;
  }
  if (m.count == 0) throw EvaluationError("depth_metrics: no valid pixels");
  const double n = static_cast<double>(m.count);
  m.abs_rel /= n;
  m.sq_rel /= n;
  m.rmse = std::sqrt(se / n);
  m.delta_1_25 = static_cast<double>(good) / n;
  return m;
}

inline DepthMetrics depth_metrics(const geom::DepthImage& d, const geom::DepthImage& gt) {
  return depth_metrics(d.depth, gt.depth);
}

// ---------------------------------------------------------------------------
// Nearest neighbours

/// Uniform-grid hash over a fixed reference cloud. Queries search rings of
/// cells outward and stop once no unvisited cell can hold a closer point;
/// far queries fall back to an exhaustive scan. Distances are computed with
/// the same expression in both paths, so results equal brute force exactly.
class NearestNeighbor {
 public:
  NearestNeighbor(const std::vector<Vec3>& ref, double cell) : ref_(ref), cell_(cell) {
    if (ref.empty()) throw EvaluationError("nearest neighbour: empty reference cloud");
    if (!(cell > 0)) throw ArgumentError("nearest neighbour: cell size must be positive");
    lo_ = ref[0];
    hi_ = ref[0];
    for (const auto& p : ref) {
      lo_ = lo_.cwiseMin(p);
      hi_ = hi_.cwiseMax(p);
    }
    for (std::size_t i = 0; i < ref.size(); ++i) cells_[key(cell_of(ref[i]))].push_back(static_cast<std::uint32_t>(i));
    for (int k = 0; k < 3; ++k) span_[k] = static_cast<long>(std::floor((hi_[k] - lo_[k]) / cell_)) + 1;
  }

  static double dist(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

  double brute(const Vec3& q) const {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : ref_) best = std::min(best, dist(q, p));
    return best;
  }

  double query(const Vec3& q) const {
    const std::array<long, 3> c = cell_of(q);
    // rings needed to cover the whole reference box from this cell
    long reach = 0;
    for (int k = 0; k < 3; ++k) reach = std::max({reach, -c[k], c[k] - (span_[k] - 1)});
    const long cover = reach + *std::max_element(span_.begin(), span_.end());
    double best = std::numeric_limits<double>::infinity();
    for (long r = 0; r <= cover; ++r) {
      if (r > kMaxRings) return brute(q);
      for (long dz = -r; dz <= r; ++dz)
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
            auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
            if (it == cells_.end()) continue;
            for (auto i : it->second) best = std::min(best, dist(q, ref_[i]));
          }
      // every unvisited point lies at least r cells away along some axis
      if (best <= static_cast<double>(r) * cell_) return best;
    }
    return best;
  }

 private:
  static constexpr long kMaxRings = 6;

  std::array<long, 3> cell_of(const Vec3& p) const {
    return {static_cast<long>(std::floor((p.x() - lo_.x()) / cell_)),
            static_cast<long>(std::floor((p.y() - lo_.y()) / cell_)),
            static_cast<long>(std::floor((p.z() - lo_.z()) / cell_))};
  }
  static std::int64_t key(const std::array<long, 3>& c) {
    return (static_cast<std::int64_t>(c[0]) * 73856093) ^ (static_cast<std::int64_t>(c[1]) * 19349663) ^
           (static_cast<std::int64_t>(c[2]) * 83492791);
  }

  const std::vector<Vec3>& ref_;
  double cell_;
  Vec3 lo_, hi_;
  std::array<long, 3> span_{};
  std::unordered_map<std::int64_t, std::vector<std::uint32_t>> cells_;
};

inline std::vector<double> nearest_distances(const std::vector<Vec3>& query, const std::vector<Vec3>& ref,
                                             double cell) {
  if (query.empty()) throw EvaluationError("nearest neighbour: empty query cloud");
  NearestNeighbor nn(ref, cell);
  std::vector<double> out(query.size());
  parallel_for(query.size(), [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out[i] = nn.query(query[i]);
  });
  return out;
}

inline std::vector<double> nearest_distances_brute(const std::vector<Vec3>& query, const std::vector<Vec3>& ref) {
  if (query.empty() || ref.empty()) throw EvaluationError("nearest neighbour: empty cloud");
  std::vector<double> out(query.size(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < query.size(); ++i)
    for (const auto& p : ref) out[i] = std::min(out[i], NearestNeighbor::dist(query[i], p));
  return out;
}

// ---------------------------------------------------------------------------
// 3D mesh metrics

struct MeshMetrics {
  double acc = 0, comp = 0, chamfer = 0, prec = 0, recall = 0, fscore = 0;
};

inline double fscore_of(double prec, double recall) {
  return prec + recall > 0 ? 2.0 * prec * recall / (prec + recall) : 0.0;
}

inline MeshMetrics mesh_metrics(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau = 0.05) {
  if (pred.empty() || gt.empty()) throw EvaluationError("mesh_metrics: empty point cloud");
  const auto d_pg = nearest_distances(pred, gt, tau);
  const auto d_gp = nearest_distances(gt, pred, tau);
  MeshMetrics m;
  for (double d : d_pg) {
    m.acc += d;
    m.prec += d < tau ? 1.0 : 0.0;
  }
  for (double d : d_gp) {
    m.comp += d;
    m.recall += d < tau ? 1.0 : 0.0;
  }
  m.acc /= static_cast<double>(pred.size());
  m.prec /= static_cast<double>(pred.size());
  m.comp /= static_cast<double>(gt.size());
  m.recall /= static_cast<double>(gt.size());
  m.chamfer = 0.5 * (m.acc + m.comp);
  m.fscore = fscore_of(m.prec, m.recall);
  return m;
}

/// Mesh vertices plus area-weighted surface samples at `density` points per
/// square metre (each triangle receives floor(area * density) samples plus
/// one more with probability equal to the remainder). Deterministic in seed.
inline std::vector<Vec3> sample_mesh(const geom::TriangleMesh& mesh, double density = 2500.0,
                                     std::uint64_t seed = 0) {
  std::vector<Vec3> pts = mesh.vertices;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (const auto& f : mesh.faces) {
    const Vec3 &a = mesh.vertices[static_cast<std::size_t>(f[0])], &b = mesh.vertices[static_cast<std::size_t>(f[1])],
               &c = mesh.vertices[static_cast<std::size_t>(f[2])];
    const double expect = geom::triangle_area(a, b, c) * density;
    auto n = static_cast<std::size_t>(expect);
    if (U(rng) < expect - static_cast<double>(n)) ++n;
    for (std::size_t s = 0; s < n; ++s) {
      double u = U(rng), v = U(rng);
      if (u + v > 1) {
        u = 1 - u;
        v = 1 - v;
      }
      pts.push_back(a + u * (b - a) + v * (c - a));
    }
  }
  return pts;
}

// ---------------------------------------------------------------------------
// View-count stability

struct StabilityRow {
  double views = 0;
  double prec = 0, recall = 0, fscore = 0;
};

struct StabilityReport {
  double cv = 0;  // percent
  double prr_prec = 0, prr_recall = 0, prr_fscore = 0, mean_prr = 0;  // percent
  double max_drop = 0;  // percent
  double si = 0;
};

/// Rounds a percentage to the number of decimals a table prints it with.
inline double round_to(double v, int decimals) {
  const double s = std::pow(10.0, decimals);
  return std::round(v * s) / s;
}

/// Rows are taken in order of increasing view count. CV uses the sample
/// (n - 1) standard deviation of the F-scores; PRR and Max Drop compare the
/// lowest against the highest view count; SI multiplies (1 - range / max)
/// over precision, recall and F-score.
inline StabilityReport stability_report(std::vector<StabilityRow> rows) {
  if (rows.size() < 2) throw EvaluationError("stability_report: need at least two view counts");
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.views < b.views; });
  const double n = static_cast<double>(rows.size());
  double mean = 0;
  for (const auto& r : rows) mean += r.fscore;
  mean /= n;
  auto positive = [](double v) { return v > 0; };
  for (const auto& r : rows)
    if (!positive(r.prec) || !positive(r.recall) || !positive(r.fscore))
      throw EvaluationError("stability_report: metrics must be positive");
  // deviations taken about the first sample so constant rows give exactly 0
  double shift = 0;
  for (const auto& r : rows) shift += r.fscore - rows[0].fscore;
  shift /= n;
  double ss = 0;
  for (const auto& r : rows) {
    const double e = (r.fscore - rows[0].fscore) - shift;
    ss += e * e;
  }
  StabilityReport s;
  s.cv = std::sqrt(ss / (n - 1)) / mean * 100.0;
  const StabilityRow &lo = rows.front(), &hi = rows.back();
  s.prr_prec = lo.prec / hi.prec * 100.0;
  s.prr_recall = lo.recall / hi.recall * 100.0;
  s.prr_fscore = lo.fscore / hi.fscore * 100.0;
  s.mean_prr = (s.prr_prec + s.prr_recall + s.prr_fscore) / 3.0;
  s.max_drop = (hi.fscore - lo.fscore) / hi.fscore * 100.0;
  auto factor = [&](double StabilityRow::*m) {
    double mn = rows[0].*m, mx = rows[0].*m;
    for (const auto& r : rows) {
      mn = std::min(mn, r.*m);
      mx = std::max(mx, r.*m);
    }
    return 1.0 - (mx - mn) / mx;
  };
  s.si = factor(&StabilityRow::fscore) * factor(&StabilityRow::prec) * factor(&StabilityRow::recall);
  return s;
}

}  // namespace ipdr::metrics
