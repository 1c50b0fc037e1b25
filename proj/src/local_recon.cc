#include "pmsfm/local_recon.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "pmsfm/geometry.h"

namespace pmsfm {

void MatchSet::Validate(int width, int height) const {
  std::set<std::pair<Pixel, Pixel>> seen;
  for (const auto& m : pairs) {
    PMSFM_CHECK(m.a.i >= 0 && m.a.j >= 0 && m.a.i < width && m.a.j < height &&
                    m.b.i >= 0 && m.b.j >= 0 && m.b.i < width && m.b.j < height,
                ErrorKind::kInvalidArgument, "match pixel out of bounds");
    PMSFM_CHECK(std::isfinite(m.confidence) && m.confidence >= 0,
                ErrorKind::kInvalidArgument, "invalid match confidence");
    PMSFM_CHECK(seen.insert({m.a, m.b}).second, ErrorKind::kInvalidArgument,
                "duplicate match");
  }
}

void PairPrediction::Validate() const {
  for (const PointMap* pm : {&x_nn, &x_mn, &x_mm, &x_nm}) {
    pm->Validate();
    PMSFM_CHECK(pm->width == x_nn.width && pm->height == x_nn.height,
                ErrorKind::kShapeMismatch, "pair pointmaps differ in size");
  }
  PMSFM_CHECK(x_nn.frame == n && x_mn.frame == n && x_mm.frame == m && x_nm.frame == m,
              ErrorKind::kInvalidArgument, "pointmap frame tags inconsistent");
  PMSFM_CHECK(matches.edge == Edge(n, m), ErrorKind::kInvalidArgument,
              "match set edge differs from prediction edge");
  matches.Validate(width(), height());
}

Pixel AnchorGrid::AnchorPixel(int u, int v) const {
  return {std::min(u * spacing + spacing / 2, width - 1),
          std::min(v * spacing + spacing / 2, height - 1)};
}

AnchorGrid BuildAnchorGrid(const VectorXd& depth, int width, int height,
                           int spacing) {
  PMSFM_CHECK(spacing >= 1, ErrorKind::kInvalidArgument, "anchor spacing must be >= 1");
  PMSFM_CHECK(depth.size() == static_cast<Eigen::Index>(width) * height,
              ErrorKind::kShapeMismatch, "depth map size mismatch");
  PMSFM_CHECK((depth.array() > 0).all(), ErrorKind::kNonPositiveDepth,
              "canonical depth must be positive");
  AnchorGrid g;
  g.spacing = spacing;
  g.width = width;
  g.height = height;
  g.grid_w = (width + spacing - 1) / spacing;
  g.grid_h = (height + spacing - 1) / spacing;
  g.anchor_depths.resize(g.anchor_count());
  for (int v = 0; v < g.grid_h; ++v)
    for (int u = 0; u < g.grid_w; ++u) {
      const Pixel p = g.AnchorPixel(u, v);
      g.anchor_depths(v * g.grid_w + u) = depth(p.j * width + p.i);
    }
  g.offsets.resize(depth.size());
  for (int j = 0; j < height; ++j)
    for (int i = 0; i < width; ++i)
      g.offsets(j * width + i) = depth(j * width + i) / g.anchor_depths(g.AnchorOf(i, j));
  return g;
}

namespace {

int NearestToken(const FeatureMap& fm, const Eigen::RowVectorXd& q) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int t = 0; t < fm.size(); ++t) {
    const double d = (fm.features.row(t) - q).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = t;
    }
  }
  return best;
}

}  // namespace

MatchSet FastReciprocalNN(const FeatureMap& da, const FeatureMap& db,
                          int seed_spacing, int max_iters) {
  PMSFM_CHECK(da.dim() == db.dim(), ErrorKind::kDimensionMismatch,
              "feature dimensions differ");
  PMSFM_CHECK(seed_spacing >= 1, ErrorKind::kInvalidArgument, "bad seed spacing");
  std::vector<int> nn_b(da.size(), -1), nn_a(db.size(), -1);
  auto hop_ab = [&](int a) {
    if (nn_b[a] < 0) nn_b[a] = NearestToken(db, da.features.row(a));
    return nn_b[a];
  };
  auto hop_ba = [&](int b) {
    if (nn_a[b] < 0) nn_a[b] = NearestToken(da, db.features.row(b));
    return nn_a[b];
  };

  std::set<std::pair<int, int>> found;
  for (int j = 0; j < da.height; j += seed_spacing)
    for (int i = 0; i < da.width; i += seed_spacing) {
      int a = da.Index(i, j);
      for (int it = 0; it < max_iters; ++it) {
        const int b = hop_ab(a);
        const int back = hop_ba(b);
        if (back == a) {
          found.emplace(a, b);
          break;
        }
        a = back;
      }
    }

  MatchSet out;
  for (const auto& [a, b] : found) {
    const auto fa = da.features.row(a);
    const auto fb = db.features.row(b);
    const double den = fa.norm() * fb.norm();
    const double cos = den > 0 ? fa.dot(fb) / den : 0.0;
    out.pairs.push_back({Pixel{a % da.width, a / da.width},
                         Pixel{b % db.width, b / db.width},
                         std::clamp((1.0 + cos) / 2.0, 0.0, 1.0)});
  }
  return out;
}

PointMap CanonicalPointmap(std::span<const PointMap> estimates) {
  PMSFM_CHECK(!estimates.empty(), ErrorKind::kEmptyEstimates, "no pointmap estimates");
  const PointMap& first = estimates[0];
  for (const auto& e : estimates)
    PMSFM_CHECK(e.width == first.width && e.height == first.height &&
                    e.points.rows() == first.size() && e.confidence.size() == first.size(),
                ErrorKind::kShapeMismatch, "estimates differ in size");
  if (estimates.size() == 1) return first;
  PointMap out(first.width, first.height, first.frame);
  out.points.setZero();
  out.confidence.setZero();
  VectorXd total = VectorXd::Zero(first.size());
  for (const auto& e : estimates) {
    out.points += e.confidence.asDiagonal() * e.points;
    total += e.confidence;
    out.confidence += e.confidence;
  }
  const double count = static_cast<double>(estimates.size());
  for (int p = 0; p < first.size(); ++p) {
    if (total(p) > 0) {
      out.points.row(p) /= total(p);
    } else {
      out.points.row(p).setZero();
      for (const auto& e : estimates) out.points.row(p) += e.points.row(p);
      out.points.row(p) /= count;
    }
  }
  out.confidence /= count;
  return out;
}

FocalEstimate EstimateFocalWeiszfeld(const PointMap& pm, int iterations) {
  std::vector<Vector2d> p, q;
  for (int j = 0; j < pm.height; ++j)
    for (int i = 0; i < pm.width; ++i) {
      const Vector3d x = pm.At(i, j);
      if (!(x.z() > kMinDepth)) continue;
      p.emplace_back(i - pm.width / 2.0, j - pm.height / 2.0);
      q.emplace_back(x.x() / x.z(), x.y() / x.z());
    }
  PMSFM_CHECK(p.size() >= 10, ErrorKind::kDegenerateGeometry,
              "fewer than 10 points in front of the camera");
  bool any_off_axis = false;
  for (const auto& v : q) any_off_axis |= v.norm() >= 1e-8;
  PMSFM_CHECK(any_off_axis, ErrorKind::kDegenerateGeometry,
              "all points lie on the optical axis");

  auto objective = [&](double f) {
    double s = 0;
    for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - f * q[k]).norm();
    return s;
  };
  auto weighted = [&](auto weight) {
    double num = 0, den = 0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double w = weight(k);
      num += w * p[k].dot(q[k]);
      den += w * q[k].squaredNorm();
    }
    return num / den;
  };

  FocalEstimate est;
  est.focal = weighted([](std::size_t) { return 1.0; });
  est.objective.push_back(objective(est.focal));
  for (int it = 0; it < iterations; ++it) {
    const double f = est.focal;
    est.focal = weighted([&](std::size_t k) {
      return 1.0 / std::max((p[k] - f * q[k]).norm(), 1e-8);
    });
    est.objective.push_back(objective(est.focal));
  }
  return est;
}

CanonicalView CanonicalFromEstimates(ImageId id, std::span<const PointMap> estimates,
                                     int anchor_spacing) {
  CanonicalView view;
  view.id = id;
  view.pointmap = CanonicalPointmap(estimates);
  view.pointmap.frame = id;
  view.depth = view.pointmap.points.col(2);
  view.focal = EstimateFocalWeiszfeld(view.pointmap).focal;
  PMSFM_CHECK(view.focal > 0 && std::isfinite(view.focal), ErrorKind::kDegenerateGeometry,
              "focal estimate is not positive");
  std::vector<double> sorted(view.depth.data(), view.depth.data() + view.depth.size());
  const std::size_t mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + mid, sorted.end());
  view.median_depth = sorted[mid];
  view.anchors = BuildAnchorGrid(view.depth, view.width(), view.height(), anchor_spacing);
  return view;
}

CanonicalView CanonicalizeView(const SceneGraph& graph,
                               std::span<const PairPrediction> predictions,
                               ImageId id, int anchor_spacing) {
  std::vector<PointMap> estimates;
  for (const Edge& e : graph.EdgesOf(id)) {
    const PairPrediction* found = nullptr;
    for (const auto& pred : predictions)
      if (Edge(std::min(pred.n, pred.m), std::max(pred.n, pred.m)) == e) {
        found = &pred;
        break;
      }
    PMSFM_CHECK(found != nullptr, ErrorKind::kMissingPrediction,
                "no prediction for edge (" + std::to_string(e.first) + ", " +
                    std::to_string(e.second) + ")");
    estimates.push_back(found->n == id ? found->x_nn : found->x_mm);
  }
  PMSFM_CHECK(!estimates.empty(), ErrorKind::kMissingPrediction,
              "image " + std::to_string(id) + " has no edges");
  return CanonicalFromEstimates(id, estimates, anchor_spacing);
}

}  // namespace pmsfm
