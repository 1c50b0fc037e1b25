#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "pmsfm/local_recon.h"
#include "pmsfm/synth.h"

namespace pmsfm {
namespace {

// Inverse-projects a depth map through a centered pinhole.
PointMap FromDepth(const VectorXd& depth, int w, int h, double focal) {
  PointMap pm(w, h, 0);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i) {
      const double z = depth(j * w + i);
      pm.points.row(pm.Index(i, j)) << (i - w / 2.0) * z / focal, (j - h / 2.0) * z / focal, z;
    }
  return pm;
}

VectorXd WavyDepth(int w, int h) {
  VectorXd d(w * h);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i) d(j * w + i) = 3.0 + 0.5 * std::sin(0.1 * i) * std::cos(0.07 * j);
  return d;
}

FeatureMap RandomFeatures(std::mt19937_64& rng, int w, int h, int dim) {
  std::normal_distribution<double> g(0.0, 1.0);
  FeatureMap f(w, h, dim);
  for (int r = 0; r < f.size(); ++r)
    for (int c = 0; c < dim; ++c) f.features(r, c) = g(rng);
  return f;
}

double Rms(const PointMap& a, const PointMap& b) {
  return std::sqrt((a.points - b.points).rowwise().squaredNorm().mean());
}

TEST(CanonicalPointmap, SingleEstimateIsUnchanged) {
  std::mt19937_64 rng(1);
  PointMap pm = FromDepth(WavyDepth(12, 9), 12, 9, 50);
  pm.confidence = VectorXd::Random(pm.size()).cwiseAbs();
  const PointMap out = CanonicalPointmap(std::span(&pm, 1));
  EXPECT_EQ(out.points, pm.points);
}

TEST(CanonicalPointmap, ConfidenceWeightedMean) {
  PointMap a = FromDepth(WavyDepth(8, 6), 8, 6, 40), b = a;
  b.points.array() += 1.0;
  a.confidence.setConstant(1.0);
  b.confidence.setConstant(3.0);
  const std::vector<PointMap> est{a, b};
  const PointMap out = CanonicalPointmap(est);
  EXPECT_LT((out.points - (a.points + 3 * b.points) / 4).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CanonicalPointmap, ZeroConfidenceFallsBackToMean) {
  PointMap a(4, 4, 0), b(4, 4, 0);
  a.points.setConstant(1.0);
  b.points.setConstant(5.0);
  a.confidence(3) = b.confidence(3) = 0.0;
  const std::vector<PointMap> est{a, b};
  const PointMap out = CanonicalPointmap(est);
  EXPECT_TRUE(out.points.allFinite());
  EXPECT_EQ(out.points.row(3), Eigen::RowVector3d::Constant(3.0));
}

TEST(CanonicalPointmap, StaysInTheConvexHull) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PointMap> est(3, PointMap(5, 4, 0));
    for (auto& e : est) {
      e.points = PointMap::Points::Random(20, 3);
      for (int p = 0; p < 20; ++p) e.confidence(p) = u(rng);
    }
    const PointMap out = CanonicalPointmap(est);
    for (int p = 0; p < 20; ++p)
      for (int c = 0; c < 3; ++c) {
        const double lo = std::min({est[0].points(p, c), est[1].points(p, c), est[2].points(p, c)});
        const double hi = std::max({est[0].points(p, c), est[1].points(p, c), est[2].points(p, c)});
        EXPECT_GE(out.points(p, c), lo - 1e-12);
        EXPECT_LE(out.points(p, c), hi + 1e-12);
      }
    for (auto& e : est) e.confidence.setConstant(0.7);
    const PointMap eq = CanonicalPointmap(est);
    EXPECT_LT((eq.points - (est[0].points + est[1].points + est[2].points) / 3).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(CanonicalPointmap, RejectsEmptyAndMismatched) {
  EXPECT_THROW(CanonicalPointmap({}), Error);
  const std::vector<PointMap> est{PointMap(4, 4, 0), PointMap(4, 5, 0)};
  EXPECT_THROW(CanonicalPointmap(est), Error);
}

TEST(Weiszfeld, RecoversFocalFromCleanPointmap) {
  const PointMap pm = FromDepth(WavyDepth(64, 48), 64, 48, 320);
  const FocalEstimate est = EstimateFocalWeiszfeld(pm);
  EXPECT_NEAR(est.focal, 320.0, 0.32);
}

TEST(Weiszfeld, RobustToOutliers) {
  std::mt19937_64 rng(3);
  PointMap pm = FromDepth(WavyDepth(64, 48), 64, 48, 320);
  std::uniform_int_distribution<int> pick(0, pm.size() - 1);
  std::uniform_real_distribution<double> u(-2.0, 2.0), z(1.0, 5.0);
  for (int k = 0; k < pm.size() / 20; ++k) pm.points.row(pick(rng)) << u(rng), u(rng), z(rng);

  // Closed-form least-squares focal on the same data.
  double num = 0, den = 0;
  for (int j = 0; j < 48; ++j)
    for (int i = 0; i < 64; ++i) {
      const Vector3d x = pm.At(i, j);
      const Vector2d p(i - 32.0, j - 24.0), q(x.x() / x.z(), x.y() / x.z());
      num += p.dot(q);
      den += q.squaredNorm();
    }
  const double l2 = num / den;

  const FocalEstimate est = EstimateFocalWeiszfeld(pm);
  EXPECT_NEAR(est.focal, 320.0, 3.2);
  EXPECT_LT(std::abs(est.focal - 320.0), std::abs(l2 - 320.0));
  EXPECT_NEAR(est.objective.front(), [&] {
    double s = 0;
    for (int j = 0; j < 48; ++j)
      for (int i = 0; i < 64; ++i) {
        const Vector3d x = pm.At(i, j);
        s += (Vector2d(i - 32.0, j - 24.0) - l2 * Vector2d(x.x() / x.z(), x.y() / x.z())).norm();
      }
    return s;
  }(), 1e-6);
}

TEST(Weiszfeld, ObjectiveNeverIncreases) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3.0, 3.0), z(0.5, 6.0);
  for (int trial = 0; trial < 30; ++trial) {
    PointMap pm = FromDepth(WavyDepth(20, 15), 20, 15, 30 + 10 * trial);
    for (int k = 0; k < 5 * trial; ++k) pm.points.row(k % pm.size()) << u(rng), u(rng), z(rng);
    const FocalEstimate est = EstimateFocalWeiszfeld(pm, 25);
    ASSERT_EQ(est.objective.size(), 26u);
    for (std::size_t k = 1; k < est.objective.size(); ++k)
      EXPECT_LE(est.objective[k], est.objective[k - 1] * (1 + 1e-12) + 1e-9);
  }
}

TEST(Weiszfeld, PointsOnTheOpticalAxisAreDegenerate) {
  PointMap pm(8, 8, 0);
  for (int p = 0; p < pm.size(); ++p) pm.points.row(p) << 0, 0, 1 + p;
  try {
    EstimateFocalWeiszfeld(pm);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDegenerateGeometry);
  }
}

TEST(AnchorGrid, SixteenBySixteenHasFourAnchors) {
  const VectorXd d = WavyDepth(16, 16);
  const AnchorGrid g = BuildAnchorGrid(d, 16, 16, 8);
  EXPECT_EQ(g.anchor_count(), 4);
  EXPECT_EQ(d.size() / g.anchor_count(), 64);
  EXPECT_EQ(g.AnchorPixel(0, 0), (Pixel{4, 4}));
  EXPECT_EQ(g.AnchorPixel(1, 1), (Pixel{12, 12}));
  EXPECT_EQ(g.AnchorOf(7, 8), 2);
}

TEST(AnchorGrid, UnitSpacingAnchorsEveryPixel) {
  const VectorXd d = WavyDepth(9, 7);
  const AnchorGrid g = BuildAnchorGrid(d, 9, 7, 1);
  EXPECT_EQ(g.anchor_count(), 63);
  EXPECT_EQ(g.offsets, VectorXd::Ones(63));
  EXPECT_EQ(g.anchor_depths, d);
}

TEST(AnchorGrid, ConstantDepthHasUnitOffsets) {
  const AnchorGrid g = BuildAnchorGrid(VectorXd::Constant(30 * 20, 2.5), 30, 20, 8);
  EXPECT_EQ(g.grid_w, 4);
  EXPECT_EQ(g.grid_h, 3);
  EXPECT_EQ(g.offsets, VectorXd::Ones(600));
  EXPECT_EQ(g.anchor_depths, VectorXd::Constant(12, 2.5));
  EXPECT_EQ(g.AnchorPixel(3, 2), (Pixel{28, 19}));  // boundary cells clamp
}

TEST(AnchorGrid, ReconstructsDepthExactly) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.1, 20.0);
  for (int spacing : {1, 3, 8, 16}) {
    VectorXd d(37 * 23);
    for (auto& v : d) v = u(rng);
    const AnchorGrid g = BuildAnchorGrid(d, 37, 23, spacing);
    for (int v = 0; v < g.grid_h; ++v)
      for (int u2 = 0; u2 < g.grid_w; ++u2) {
        const Pixel p = g.AnchorPixel(u2, v);
        EXPECT_EQ(g.Depth(p.i, p.j), d(p.j * 37 + p.i));
      }
    for (int j = 0; j < 23; ++j)
      for (int i = 0; i < 37; ++i) {
        const double exact = d(j * 37 + i);
        EXPECT_LE(std::abs(g.Depth(i, j) - exact),
                  std::nextafter(exact, INFINITY) - exact);
      }
  }
  EXPECT_THROW(BuildAnchorGrid(VectorXd::Zero(4), 2, 2, 1), Error);
}

TEST(FastReciprocalNN, IdenticalMapsMatchThemselves) {
  std::mt19937_64 rng(6);
  const FeatureMap f = RandomFeatures(rng, 24, 16, 8);
  const MatchSet m = FastReciprocalNN(f, f, 4);
  EXPECT_EQ(m.pairs.size(), 6u * 4u);
  for (const auto& p : m.pairs) {
    EXPECT_EQ(p.a, p.b);
    EXPECT_NEAR(p.confidence, 1.0, 1e-12);
  }
  m.Validate(24, 16);
}

TEST(FastReciprocalNN, ShiftedMapDisplacesMatches) {
  std::mt19937_64 rng(7);
  const int w = 32, h = 16, delta = 8;
  const FeatureMap da = RandomFeatures(rng, w, h, 8);
  FeatureMap db = RandomFeatures(rng, w, h, 8);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i + delta < w; ++i) db.features.row(db.Index(i, j)) = da.features.row(da.Index(i + delta, j));
  const MatchSet m = FastReciprocalNN(da, db, delta);
  std::set<Pixel> shifted;
  for (const auto& p : m.pairs)
    if (p.a.i >= delta) {
      EXPECT_EQ(p.b, (Pixel{p.a.i - delta, p.a.j}));
      shifted.insert(p.a);
    }
  // Seeds with a counterpart all land on it; others may hop elsewhere.
  for (int j = 0; j < h; j += delta)
    for (int i = delta; i < w; i += delta) EXPECT_TRUE(shifted.count(Pixel{i, j}));
}

TEST(FastReciprocalNN, IdenticalFeaturesTieToLowestIndex) {
  FeatureMap f(8, 8, 4);
  f.features.setOnes();
  const MatchSet m = FastReciprocalNN(f, f, 4);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0].a, (Pixel{0, 0}));
  EXPECT_EQ(m.pairs[0].b, (Pixel{0, 0}));
  m.Validate(8, 8);
}

TEST(FastReciprocalNN, EveryPairIsMutual) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const FeatureMap da = RandomFeatures(rng, 12, 10, 3), db = RandomFeatures(rng, 11, 9, 3);
    const MatchSet m = FastReciprocalNN(da, db, 2);
    m.Validate(12, 10);
    for (const auto& p : m.pairs) {
      const auto fa = da.features.row(da.Index(p.a.i, p.a.j));
      const auto fb = db.features.row(db.Index(p.b.i, p.b.j));
      Eigen::Index best;
      (db.features.rowwise() - fa).rowwise().squaredNorm().minCoeff(&best);
      EXPECT_EQ(best, db.Index(p.b.i, p.b.j));
      (da.features.rowwise() - fb).rowwise().squaredNorm().minCoeff(&best);
      EXPECT_EQ(best, da.Index(p.a.i, p.a.j));
      EXPECT_GE(p.confidence, 0.0);
      EXPECT_LE(p.confidence, 1.0);
    }
  }
  EXPECT_THROW(FastReciprocalNN(FeatureMap(2, 2, 3), FeatureMap(2, 2, 4)), Error);
}

TEST(CanonicalizeView, SingleEdgeUsesItsOwnFrameEstimate) {
  const SynthScene scene = GenerateScene(SurfaceKind::kBlobs, 2, 1);
  const std::vector<PairPrediction> preds{SimulatePair(scene, {0, 1}, {}).prediction};
  const SceneGraph g = BuildCompleteGraph(2);
  const CanonicalView v0 = CanonicalizeView(g, preds, 0);
  const CanonicalView v1 = CanonicalizeView(g, preds, 1);
  EXPECT_EQ(v0.pointmap.points, preds[0].x_nn.points);
  EXPECT_EQ(v1.pointmap.points, preds[0].x_mm.points);
  EXPECT_EQ(v0.depth, preds[0].x_nn.points.col(2));
  EXPECT_NEAR(v0.focal, scene.options.focal, 0.01 * scene.options.focal);
  EXPECT_THROW(CanonicalizeView(BuildCompleteGraph(3), preds, 2), Error);
}

TEST(CanonicalizeView, IdenticalEstimatesAreUnchanged) {
  const SynthScene scene = GenerateScene(SurfaceKind::kSphere, 1, 2);
  const PointMap own = scene.OwnPointmap(0);
  const std::vector<PointMap> est{own, own};
  const CanonicalView v = CanonicalFromEstimates(0, est);
  EXPECT_LT((v.pointmap.points - own.points).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(CanonicalizeView, AveragingNoisyEstimatesReducesError) {
  const SynthScene scene = GenerateScene(SurfaceKind::kBlobs, 1, 3);
  const PointMap truth = scene.OwnPointmap(0);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 0.05);
  std::vector<PointMap> est{truth, truth};
  for (auto& e : est)
    for (int p = 0; p < e.size(); ++p) e.points.row(p) *= std::exp(g(rng));
  const CanonicalView v = CanonicalFromEstimates(0, est);
  EXPECT_LT(Rms(v.pointmap, truth), Rms(est[0], truth));
  EXPECT_LT(Rms(v.pointmap, truth), Rms(est[1], truth));
  EXPECT_EQ(v.depth, v.pointmap.points.col(2));
  EXPECT_GT(v.focal, 0.0);
}

}  // namespace
}  // namespace pmsfm
