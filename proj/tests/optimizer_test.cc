#include <cmath>
#include <optional>
#include <random>

#include <gtest/gtest.h>

#include "pmsfm/optimizer.h"
#include "pmsfm/synth.h"
#include "optim_support.h"
#include "test_support.h"

namespace pmsfm {
namespace {

using testing::ClassError;
using testing::Fixture;
using testing::GradientError;
using testing::LossAt;
using testing::MakeFixture;
using testing::Perturb;
using testing::SetWorld;
using testing::ShiftsOf;
using testing::WorldOf;
using testing::OracleWorldPose;

// Independent world point: homogeneous tree walk, scale normalization by the
// smallest composed scale, then the pinhole inverse.
struct OracleScene {
  std::vector<Matrix4d> world;
  std::vector<double> focal;
  double min_scale = 0;
};

OracleScene MakeOracle(const SceneState& s, Stage stage) {
  OracleScene o;
  const auto shifts = ShiftsOf(s, stage);
  for (int n = 0; n < s.size(); ++n) {
    o.world.push_back(OracleWorldPose(s.tree, n, shifts));
    o.focal.push_back(stage == Stage::kCoarse ? s.views[n].focal
                                              : std::exp(s.log_focals[s.shared_focal ? 0 : n]));
  }
  o.min_scale = std::numeric_limits<double>::infinity();
  for (const auto& m : o.world) o.min_scale = std::min(o.min_scale, std::cbrt(m.topLeftCorner<3, 3>().determinant()));
  return o;
}

double OracleDepth(const SceneState& s, Stage stage, ImageId n, Pixel px) {
  const CanonicalView& v = s.views[n];
  const int idx = px.j * v.width() + px.i;
  if (stage == Stage::kCoarse || s.freeze_depth) return v.depth(idx);
  const int anchor = (px.j / v.anchors.spacing) * v.anchors.grid_w + px.i / v.anchors.spacing;
  return v.anchors.offsets(idx) * std::exp(s.log_anchor_depths[n](anchor));
}

Vector3d OraclePoint(const SceneState& s, const OracleScene& o, Stage stage, ImageId n, Pixel px) {
  const double z = OracleDepth(s, stage, n, px);
  const CanonicalView& v = s.views[n];
  const Vector4d xc((px.i - v.width() / 2.0) * z / o.focal[n], (px.j - v.height() / 2.0) * z / o.focal[n], z, 1);
  return o.min_scale * (o.world[n].inverse() * xc).head<3>();
}

// Empty when the point is behind the camera.
std::optional<Vector2d> OracleProject(const SceneState& s, const OracleScene& o, ImageId n,
                                      const Vector3d& x) {
  const Vector3d xc = (o.world[n] * (x / o.min_scale).homogeneous()).head<3>();
  if (!(xc.z() > kMinDepth)) return std::nullopt;
  const CanonicalView& v = s.views[n];
  return Vector2d(o.focal[n] * xc.x() / xc.z() + v.width() / 2.0,
                  o.focal[n] * xc.y() / xc.z() + v.height() / 2.0);
}

double OracleLoss(const SceneState& s, std::span<const MatchSet> matches, Stage stage,
                  const OptimConfig& cfg) {
  const OracleScene o = MakeOracle(s, stage);
  const double eps2 = cfg.smoothing * cfg.smoothing;
  double total = 0;
  for (const auto& ms : matches)
    for (const auto& mt : ms.pairs) {
      const Vector3d xn = OraclePoint(s, o, stage, ms.edge.first, mt.a);
      const Vector3d xm = OraclePoint(s, o, stage, ms.edge.second, mt.b);
      if (stage == Stage::kCoarse) {
        total += mt.confidence * std::pow((xn - xm).squaredNorm() + eps2, cfg.coarse_exponent / 2);
        continue;
      }
      const auto un = OracleProject(s, o, ms.edge.first, xm);
      const auto um = OracleProject(s, o, ms.edge.second, xn);
      if (un) total += mt.confidence * std::pow((Vector2d(mt.a.i, mt.a.j) - *un).squaredNorm() + eps2, cfg.refine_exponent / 2);
      if (um) total += mt.confidence * std::pow((Vector2d(mt.b.i, mt.b.j) - *um).squaredNorm() + eps2, cfg.refine_exponent / 2);
    }
  return total;
}

// Single-view state over a constant-depth plane.
CanonicalView PlaneView(ImageId id, int w, int h, double focal, double depth) {
  PointMap pm(w, h, id);
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i)
      pm.points.row(pm.Index(i, j)) << (i - w / 2.0) * depth / focal, (j - h / 2.0) * depth / focal, depth;
  return CanonicalFromEstimates(id, std::span(&pm, 1));
}

SceneState PlaneState(int views, const OptimConfig& cfg) {
  std::vector<CanonicalView> canon;
  for (int n = 0; n < views; ++n) canon.push_back(PlaneView(n, 64, 48, 100, 2));
  const SceneGraph g = BuildCompleteGraph(views);
  return MakeState(std::move(canon), BuildKinematicTree(g, MatrixXd::Ones(views, views), TreeMode::kStar), cfg);
}

TEST(Config, Validation) {
  OptimConfig c;
  EXPECT_NO_THROW(c.Validate());
  c.refine_exponent = 1.5;
  EXPECT_THROW(c.Validate(), Error);
  c.refine_exponent = 0.5;
  c.coarse_lr = 0;
  EXPECT_THROW(c.Validate(), Error);
}

TEST(ConstrainedPoint, IdentityCameraPrincipalPixel) {
  const OptimConfig cfg;
  SceneState s = PlaneState(1, cfg);
  SetWorld(&s, {Similarity<double>{}}, Stage::kRefine);
  EXPECT_NEAR(s.views[0].focal, 100.0, 1e-9);
  EXPECT_LT((ConstrainedPoint(s, 0, {32, 24}) - Vector3d(0, 0, 2)).norm(), 1e-12);
  EXPECT_LT((ConstrainedPoint(s, 0, {32, 24}, Stage::kCoarse) - Vector3d(0, 0, 2)).norm(), 1e-12);
  EXPECT_THROW(ConstrainedPoint(s, 0, {64, 0}), Error);
}

TEST(ConstrainedPoint, MatchesHandChainedOracle) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    OptimConfig cfg;
    cfg.shared_focal = trial % 2;
    Fixture fx = MakeFixture(4, 10 + trial, TreeMode::kHclustCorr, cfg);
    Perturb(&fx.state, Stage::kRefine, rng, 0.05);
    for (Stage stage : {Stage::kCoarse, Stage::kRefine}) {
      const OracleScene o = MakeOracle(fx.state, stage);
      for (int n = 0; n < 4; ++n)
        for (Pixel px : {Pixel{0, 0}, Pixel{31, 17}, Pixel{63, 47}}) {
          const Vector3d expect = OraclePoint(fx.state, o, stage, n, px);
          EXPECT_LT((ConstrainedPoint(fx.state, n, px, stage) - expect).norm(),
                    1e-9 * std::max(1.0, expect.norm()));
        }
    }
  }
}

TEST(ConstrainedPoint, UniformScaleCancels) {
  const OptimConfig cfg;
  Fixture fx = MakeFixture(4, 2, TreeMode::kMst, cfg);
  std::mt19937_64 rng(2);
  Perturb(&fx.state, Stage::kRefine, rng, 0.05);
  auto world = ComposeAllWorldPoses(fx.state.tree, ShiftsOf(fx.state, Stage::kRefine));
  SceneState doubled = fx.state;
  for (auto& w : world) w.s *= 2.0;
  SetWorld(&doubled, world, Stage::kRefine);
  for (int n = 0; n < 4; ++n)
    EXPECT_LT((ConstrainedPoint(doubled, n, {5, 9}) - ConstrainedPoint(fx.state, n, {5, 9})).norm(), 1e-12);
  for (Stage stage : {Stage::kCoarse, Stage::kRefine}) {
    const double a = EvaluateLoss(fx.state, fx.matches, stage, cfg, false).value;
    const double b = EvaluateLoss(doubled, fx.matches, stage, cfg, false).value;
    EXPECT_NEAR(a, b, 1e-12 * std::max(1.0, a));
  }
}

TEST(ConstrainedPoint, SmallestScaleIsOne) {
  const OptimConfig cfg;
  Fixture fx = MakeFixture(5, 3, TreeMode::kHclustSim, cfg);
  std::mt19937_64 rng(3);
  for (int k = 0; k < 10; ++k) {
    Perturb(&fx.state, Stage::kRefine, rng, 0.1);
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& c : fx.state.Cameras()) lo = std::min(lo, c.sigma);
    EXPECT_EQ(lo, 1.0);
  }
}

TEST(CoarseLoss, UnitDistanceSingleMatch) {
  const OptimConfig cfg;
  SceneState s = PlaneState(2, cfg);
  SetWorld(&s, {Similarity<double>{}, Similarity<double>{}}, Stage::kCoarse);
  // 50 pixels at depth 2 and focal 100 is one unit.
  const std::vector<MatchSet> m{{{0, 1}, {{{10, 10}, {60, 10}, 1.0}}}};
  EXPECT_NEAR(EvaluateLoss(s, m, Stage::kCoarse, cfg, false).value, 1.0, 1e-12);
}

TEST(RefineLoss, FourPixelResidualBothWays) {
  const OptimConfig cfg;
  SceneState s = PlaneState(2, cfg);
  SetWorld(&s, {Similarity<double>{}, Similarity<double>{}}, Stage::kRefine);
  const std::vector<MatchSet> m{{{0, 1}, {{{10, 10}, {14, 10}, 1.0}}}};
  EXPECT_NEAR(EvaluateLoss(s, m, Stage::kRefine, cfg, false).value, 4.0, 1e-9);
}

TEST(Loss, GroundTruthPlaneIsAtTheFloor) {
  const OptimConfig cfg;
  SceneState s = PlaneState(2, cfg);
  // The second camera sits 0.04 to the right: a 2-pixel shift at depth 2.
  Similarity<double> right;
  right.t = Vector3d(-0.04, 0, 0);
  SetWorld(&s, {Similarity<double>{}, right}, Stage::kCoarse);
  MatchSet ms{{0, 1}, {}};
  for (int j = 0; j < 48; j += 8)
    for (int i = 2; i < 64; i += 8) ms.pairs.push_back({{i, j}, {i - 2, j}, 0.5 + 0.01 * j});
  const std::vector<MatchSet> m{ms};
  EXPECT_LT(EvaluateLoss(s, m, Stage::kCoarse, cfg, false).value, 1e-10);
  double floor = 0;
  for (const auto& p : ms.pairs) floor += p.confidence * 2 * std::pow(cfg.smoothing, cfg.refine_exponent);
  SetWorld(&s, {Similarity<double>{}, right}, Stage::kRefine);
  EXPECT_LE(EvaluateLoss(s, m, Stage::kRefine, cfg, false).value, floor * (1 + 1e-6));
}

TEST(Loss, MatchesBruteForceOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    OptimConfig cfg;
    cfg.shared_focal = trial % 2;
    cfg.freeze_depth = trial % 3 == 0;
    Fixture fx = MakeFixture(3 + trial % 3, 20 + trial, TreeMode::kHclustCorr, cfg);
    Perturb(&fx.state, Stage::kRefine, rng, 0.03);
    for (Stage stage : {Stage::kCoarse, Stage::kRefine}) {
      const double got = EvaluateLoss(fx.state, fx.matches, stage, cfg, false).value;
      const double want = OracleLoss(fx.state, fx.matches, stage, cfg);
      EXPECT_NEAR(got, want, 1e-9 * std::max(1.0, want));
    }
  }
}

TEST(Loss, GaugeInvariance) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const OptimConfig cfg;
    Fixture fx = MakeFixture(4, 30 + trial, TreeMode::kMst, cfg);
    const Matrix3d Q = testing::RandomPose(rng).Rotation();
    const Vector3d b = testing::RandomPose(rng).t;
    const double a = std::exp(std::uniform_real_distribution<double>(-1, 1)(rng));
    // Cameras seeing the world x' = a Q x + b.
    std::vector<Similarity<double>> moved;
    for (const auto& c : fx.scene.cameras) {
      Similarity<double> w;
      w.R = c.pose.Rotation() * Q.transpose();
      w.s = 1.0 / a;
      w.t = c.pose.t - w.R * b / a;
      moved.push_back(w);
    }
    for (Stage stage : {Stage::kCoarse, Stage::kRefine}) {
      SetWorld(&fx.state, WorldOf(fx.scene.cameras), stage);
      const double base = EvaluateLoss(fx.state, fx.matches, stage, cfg, false).value;
      SetWorld(&fx.state, moved, stage);
      const double gauged = EvaluateLoss(fx.state, fx.matches, stage, cfg, false).value;
      EXPECT_NEAR(base, gauged, 1e-9 * std::max(1.0, base));
    }
  }
}


TEST(Gradient, MatchesFiniteDifferencesOnRandomScenes) {
  std::mt19937_64 rng(6);
  const TreeMode modes[] = {TreeMode::kHclustCorr, TreeMode::kMst, TreeMode::kStar, TreeMode::kHclustSim};
  for (int trial = 0; trial < 20; ++trial) {
    OptimConfig cfg;
    cfg.shared_focal = trial % 2;
    cfg.freeze_depth = trial % 5 == 4;
    cfg.rotation_center = trial % 7 != 6;
    Fixture fx = MakeFixture(3 + trial % 2, 40 + trial, modes[trial % 4], cfg);
    Perturb(&fx.state, Stage::kRefine, rng, 0.03);
    for (Stage stage : {Stage::kCoarse, Stage::kRefine}) {
      const ClassError e = GradientError(fx.state, fx.matches, stage, cfg);
      EXPECT_LT(e.worst, 1e-4) << "trial " << trial << " stage " << static_cast<int>(stage) << " " << e.where;
    }
  }
}

TEST(Gradient, ConstantLossHasZeroGradient) {
  const OptimConfig cfg;
  Fixture fx = MakeFixture(3, 7, TreeMode::kStar, cfg);
  const std::vector<MatchSet> none{{{0, 1}, {}}};
  const LossResult r = EvaluateLoss(fx.state, none, Stage::kRefine, cfg, true);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.gradient, VectorXd::Zero(MakeLayout(fx.state, Stage::kRefine).size));
}

TEST(Layout, PackUnpackRoundTrip) {
  OptimConfig cfg;
  Fixture fx = MakeFixture(3, 8, TreeMode::kMst, cfg);
  EXPECT_EQ(MakeLayout(fx.state, Stage::kCoarse).size, 3 * 8);
  EXPECT_EQ(MakeLayout(fx.state, Stage::kRefine).size, 3 * 8 + 1 + 3 * 48);
  const VectorXd p = PackParameters(fx.state, Stage::kRefine);
  SceneState copy = fx.state;
  UnpackParameters(p, Stage::kRefine, &copy);
  EXPECT_LT((PackParameters(copy, Stage::kRefine) - p).cwiseAbs().maxCoeff(), 1e-12);
  cfg.freeze_depth = true;
  cfg.shared_focal = false;
  Fixture frozen = MakeFixture(3, 8, TreeMode::kMst, cfg);
  EXPECT_EQ(MakeLayout(frozen.state, Stage::kRefine).size, 3 * 8 + 3);
}

TEST(Init, RecoversExactRelativeRotation) {
  // Camera 1 is camera 0 turned 90 degrees about its optical axis, so every
  // pixel lands exactly on a pixel.
  const int size = 32, c = 16;
  const double focal = 30;
  VectorXd d0(size * size), d1(size * size);
  for (int j = 0; j < size; ++j)
    for (int i = 0; i < size; ++i) d0(j * size + i) = 2.0 + 0.3 * std::sin(0.4 * i) + 0.2 * std::cos(0.3 * j);
  for (int j = 0; j < size; ++j)
    for (int i = 0; i < size; ++i) d1(j * size + i) = i > 0 ? d0((2 * c - i) * size + j) : 2.0;
  auto to_view = [&](ImageId id, const VectorXd& d) {
    PointMap pm(size, size, id);
    for (int j = 0; j < size; ++j)
      for (int i = 0; i < size; ++i) {
        const double z = d(j * size + i);
        pm.points.row(pm.Index(i, j)) << (i - c) * z / focal, (j - c) * z / focal, z;
      }
    return CanonicalFromEstimates(id, std::span(&pm, 1));
  };
  MatchSet ms{{0, 1}, {}};
  for (int j = 1; j < size; j += 2)
    for (int i = 0; i < size; i += 2) ms.pairs.push_back({{i, j}, {2 * c - j, i}, 1.0});
  const SceneGraph g = BuildCompleteGraph(2);
  const OptimConfig cfg;
  SceneState s = MakeState({to_view(0, d0), to_view(1, d1)},
                           BuildKinematicTree(g, MatrixXd::Ones(2, 2), TreeMode::kMst), cfg);
  const std::vector<MatchSet> m{ms};
  const InitReport r = InitFromPairs(g, m, &s);
  EXPECT_TRUE(r.fallback_edges.empty());
  const auto cams = s.Cameras(Stage::kCoarse);
  const Matrix3d rel = cams[1].pose.Rotation() * cams[0].pose.Rotation().transpose();
  const Matrix3d expect = Eigen::AngleAxisd(std::numbers::pi / 2, Vector3d::UnitZ()).toRotationMatrix();
  EXPECT_LT(testing::OracleAngleDeg(rel, expect), 1e-6);
  EXPECT_LT((cams[1].pose.t - rel * cams[0].pose.t).norm(), 1e-9);
  EXPECT_LT(EvaluateLoss(s, m, Stage::kCoarse, cfg, false).value, 1e-9);
}

TEST(Init, IdenticalFramesGiveIdentity) {
  const OptimConfig cfg;
  SceneState s = PlaneState(2, cfg);
  MatchSet ms{{0, 1}, {}};
  for (int j = 0; j < 48; j += 4)
    for (int i = 0; i < 64; i += 4) ms.pairs.push_back({{i, j}, {i, j}, 1.0});
  const std::vector<MatchSet> m{ms};
  InitFromPairs(BuildCompleteGraph(2), m, &s);
  const auto cams = s.Cameras(Stage::kCoarse);
  EXPECT_LT((cams[1].pose.Matrix() - cams[0].pose.Matrix()).norm(), 1e-9);
  EXPECT_NEAR(cams[1].sigma, 1.0, 1e-12);
}

TEST(Init, TooFewMatchesFallsBack) {
  const OptimConfig cfg;
  SceneState s = PlaneState(2, cfg);
  const std::vector<MatchSet> m{{{0, 1}, {{{1, 1}, {1, 1}, 1.0}, {{5, 9}, {5, 9}, 1.0}}}};
  const InitReport r = InitFromPairs(BuildCompleteGraph(2), m, &s);
  EXPECT_EQ(r.fallback_edges, (std::vector<Edge>{{0, 1}}));
  EXPECT_EQ(r.unreached, (std::vector<ImageId>{1}));
}

TEST(Umeyama, RecoversSimilarity) {
  std::mt19937_64 rng(9);
  std::vector<Vector3d> src, dst;
  const Pose p = testing::RandomPose(rng);
  for (int k = 0; k < 20; ++k) {
    src.push_back(testing::RandomPose(rng).t);
    dst.push_back(2.5 * (p.Rotation() * src.back()) + p.t);
  }
  const Similarity<double> s = UmeyamaAlign(src, dst);
  EXPECT_NEAR(s.s, 2.5, 1e-12);
  EXPECT_LT((s.R - p.Rotation()).norm(), 1e-12);
  EXPECT_LT((s.t - p.t).norm(), 1e-12);
  const std::vector<Vector3d> line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  EXPECT_THROW(UmeyamaAlign(line, line), Error);
}

TEST(Schedule, CosineDecay) {
  EXPECT_DOUBLE_EQ(CosineLearningRate(0.07, 0, 300), 0.07);
  EXPECT_NEAR(CosineLearningRate(0.07, 150, 300), 0.035, 1e-15);
  EXPECT_NEAR(CosineLearningRate(0.07, 300, 300), 0.0, 1e-15);
}

TEST(Optimize, ConvergesFromPerturbedStateDeterministically) {
  OptimConfig cfg;
  cfg.coarse_iters = 60;
  cfg.refine_iters = 60;
  Fixture fx = MakeFixture(4, 11, TreeMode::kHclustCorr, cfg);
  std::mt19937_64 rng(10);
  Perturb(&fx.state, Stage::kCoarse, rng, 0.02);
  const OptimizeResult a = Optimize(fx.state, fx.matches, cfg);
  const OptimizeResult b = Optimize(fx.state, fx.matches, cfg);
  EXPECT_EQ(PackParameters(a.state, Stage::kRefine), PackParameters(b.state, Stage::kRefine));
  ASSERT_EQ(a.trace.size(), 120u);

  double best = a.trace[0].loss, first_refine = 0, best_refine = 0;
  for (const auto& t : a.trace) {
    if (t.stage == 2 && t.iter == 0) best = first_refine = best_refine = t.loss;
    const double next = std::min(best, t.loss);
    EXPECT_LE(next, best);
    best = next;
    if (t.stage == 2) best_refine = best;
    EXPECT_EQ(t.skipped, 0);
  }
  EXPECT_LT(best_refine, first_refine);
  EXPECT_LT(a.trace[59].loss, a.trace[0].loss);

  double lo = std::numeric_limits<double>::infinity();
  for (const auto& c : a.state.Cameras()) lo = std::min(lo, c.sigma);
  EXPECT_EQ(lo, 1.0);
  std::vector<Pose> poses;
  for (const auto& c : a.state.Cameras()) poses.push_back(c.pose);
  const auto metrics = RraRta(testing::TrajectoryOf(poses), fx.scene.GroundTruth(), 5);
  EXPECT_EQ(metrics.rra, 100.0);
}

TEST(Optimize, SingleViewIsUntouched) {
  const OptimConfig cfg;
  SceneState s = PlaneState(1, cfg);
  const OptimizeResult r = Optimize(s, {}, cfg);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(PackParameters(r.state, Stage::kRefine), PackParameters(s, Stage::kRefine));
}


}  // namespace
}  // namespace pmsfm
