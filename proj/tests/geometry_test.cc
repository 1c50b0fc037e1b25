#include <random>

#include <gtest/gtest.h>

#include "pmsfm/geometry.h"
#include "pmsfm/kinematic_tree.h"
#include "test_support.h"

namespace pmsfm {
namespace {

using testing::Homogeneous;
using testing::OracleWorldPose;
using testing::RandomPose;
using testing::RandomTree;

CameraParams PlainCamera(double focal, int w, int h) {
  CameraParams c;
  c.intrinsics = Intrinsics::Centered(focal, w, h);
  return c;
}

TEST(Reproject, OpticalAxisHitsPrincipalPoint) {
  const CameraParams c = PlainCamera(100, 100, 100);
  EXPECT_TRUE(Reproject(c, {0, 0, 1}).isApprox(Vector2d(50, 50)));
  EXPECT_TRUE(Reproject(c, {1, 0, 2}).isApprox(Vector2d(100, 50)));
}

TEST(Reproject, BehindCameraThrows) {
  const CameraParams c = PlainCamera(100, 100, 100);
  try {
    Reproject(c, {0, 0, -1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNonPositiveDepth);
  }
}

TEST(InverseReproject, UnitCamera) {
  CameraParams c;
  c.intrinsics.focal = 1;
  c.intrinsics.width = c.intrinsics.height = 1;
  c.intrinsics.principal_point = Vector2d(0.5, 0.5);
  const Vector3d x = InverseReproject(c, 0.5, 0.5, 1.0);
  EXPECT_TRUE(x.isApprox(Vector3d(0, 0, 1)));
}

TEST(InverseReproject, SigmaShrinksPoints) {
  CameraParams a = PlainCamera(80, 64, 48), b = a;
  b.sigma = 2.0;
  const Vector3d pa = InverseReproject(a, 10, 7, 3.0);
  const Vector3d pb = InverseReproject(b, 10, 7, 3.0);
  EXPECT_LT((pb - pa / 2).norm(), 1e-15);
}

TEST(InverseReproject, RejectsNonPositiveDepth) {
  EXPECT_THROW(InverseReproject(PlainCamera(80, 64, 48), 1, 1, 0.0), Error);
}

TEST(Reproject, RoundTripOnRandomCameras) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> f(20, 800), s(0.2, 5), z(0.05, 50);
  std::uniform_int_distribution<int> size(8, 1024);
  double worst = 0;
  for (int k = 0; k < 10000; ++k) {
    CameraParams c = PlainCamera(f(rng), size(rng), size(rng));
    c.pose = RandomPose(rng, 5.0);
    c.sigma = s(rng);
    std::uniform_real_distribution<double> ui(0, c.intrinsics.width), uj(0, c.intrinsics.height);
    const Vector2d px(ui(rng), uj(rng));
    const Vector3d x = InverseReproject(c, px.x(), px.y(), z(rng));
    worst = std::max(worst, (Reproject(c, x) - px).norm());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Reproject, OwnPointsAreSigmaIndependent) {
  std::mt19937_64 rng(3);
  for (int k = 0; k < 100; ++k) {
    CameraParams c = PlainCamera(300, 640, 480);
    c.pose = RandomPose(rng);
    const Vector3d x = InverseReproject(c, 100, 200, 4.0);
    c.sigma = 3.7;
    const Vector3d y = InverseReproject(c, 100, 200, 4.0);
    EXPECT_LT((Reproject(c, y) - Vector2d(100, 200)).norm(), 1e-9);
    EXPECT_LT((y * 3.7 - x).norm(), 1e-9);
  }
}

TEST(Pose, ComposeWithInverseIsIdentity) {
  std::mt19937_64 rng(11);
  for (int k = 0; k < 1000; ++k) {
    const Pose p = RandomPose(rng);
    const Pose id = Compose(p, p.Inverse());
    EXPECT_LT((id.Matrix() - Matrix4d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((Compose(p.Inverse(), p).Matrix() - Matrix4d::Identity()).cwiseAbs().maxCoeff(),
              1e-9);
  }
}

TEST(Pose, ComposeMatchesMatrixProduct) {
  std::mt19937_64 rng(12);
  const Pose a = RandomPose(rng), b = RandomPose(rng);
  EXPECT_LT((Compose(a, b).Matrix() - Homogeneous(a) * Homogeneous(b)).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(Pose, NormStaysUnitOverLongChains) {
  std::mt19937_64 rng(13);
  Pose acc;
  double drift = 0;
  for (int k = 0; k < 100000; ++k) {
    acc = Compose(acc, RandomPose(rng, 0.1));
    drift = std::max(drift, std::abs(acc.q.norm() - 1.0));
  }
  EXPECT_LT(drift, 1e-7);
}

TEST(Pose, QuaternionRoundTrip) {
  std::mt19937_64 rng(14);
  for (int k = 0; k < 100; ++k) {
    const Pose p = RandomPose(rng);
    const Vector4d q = RotationToQuaternion(p.Rotation());
    EXPECT_GE(q(0), 0.0);
    EXPECT_LT((QuaternionToRotation<double>(q) - p.Rotation()).norm(), 1e-12);
  }
}

TEST(Intrinsics, RejectsOffCenterPrincipalPoint) {
  Intrinsics k = Intrinsics::Centered(100, 64, 48);
  k.principal_point.x() += 0.5;
  EXPECT_THROW(k.Validate(), Error);
  EXPECT_THROW(Intrinsics::Centered(-1, 64, 48), Error);
  EXPECT_THROW(Intrinsics::Centered(10, 0, 48), Error);
}

TEST(KinematicTree, RootReturnsItsOwnLink) {
  std::mt19937_64 rng(21);
  const KinematicTree t = RandomTree(rng, 5);
  const auto w = ComposeWorldPose(t, t.root);
  EXPECT_LT((Homogeneous(w) - OracleWorldPose(t, t.root)).norm(), 1e-12);
  EXPECT_LT((w.R - t.links[t.root].relative.Rotation()).norm(), 1e-12);
}

TEST(KinematicTree, IdentityChainComposesToIdentity) {
  KinematicTree t;
  t.links.resize(3);
  t.links[1].parent = 0;
  t.links[2].parent = 1;
  const auto w = ComposeWorldPose(t, 2);
  EXPECT_LT((Homogeneous(w) - Matrix4d::Identity()).norm(), 1e-15);
  EXPECT_EQ(t.Depth(), 2);
  EXPECT_EQ(t.EdgeCount(), 2);
}

TEST(KinematicTree, ComposeMatchesMatrixWalk) {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 32)(rng);
    const KinematicTree t = RandomTree(rng, n);
    std::vector<double> shifts;
    for (int k = 0; k < n; ++k) shifts.push_back(std::uniform_real_distribution<double>(0, 3)(rng));
    const auto all = ComposeAllWorldPoses(t);
    const auto shifted = ComposeAllWorldPoses(t, shifts);
    for (int k = 0; k < n; ++k) {
      const Matrix4d oracle = OracleWorldPose(t, k);
      const double scale = oracle.norm();
      EXPECT_LT((Homogeneous(all[k]) - oracle).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, scale));
      EXPECT_LT((Homogeneous(ComposeWorldPose(t, k)) - oracle).cwiseAbs().maxCoeff(),
                1e-10 * std::max(1.0, scale));
      const Matrix4d oracle_shift = OracleWorldPose(t, k, shifts);
      EXPECT_LT((Homogeneous(shifted[k]) - oracle_shift).cwiseAbs().maxCoeff(),
                1e-10 * std::max(1.0, oracle_shift.norm()));
    }
  }
}

TEST(KinematicTree, SetLinksInvertsComposition) {
  std::mt19937_64 rng(23);
  KinematicTree t = RandomTree(rng, 12);
  std::vector<double> shifts(12, 1.5);
  std::vector<Similarity<double>> world;
  for (int k = 0; k < 12; ++k) {
    Similarity<double> s;
    s.R = RandomPose(rng).Rotation();
    s.t = RandomPose(rng).t;
    s.s = 0.5 + k * 0.1;
    world.push_back(s);
  }
  SetLinksFromWorldPoses(&t, world, shifts);
  const auto back = ComposeAllWorldPoses(t, shifts);
  for (int k = 0; k < 12; ++k)
    EXPECT_LT((Homogeneous(back[k]) - Homogeneous(world[k])).norm(), 1e-10);
}

TEST(KinematicTree, DetectsCyclesAndMissingNodes) {
  KinematicTree t;
  t.links.resize(3);
  t.links[0].parent = 2;
  t.links[1].parent = 0;
  t.links[2].parent = 1;
  try {
    t.TopologicalOrder();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCycleDetected);
  }
  t.links[0].parent = 7;
  try {
    t.Validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingNode);
  }
}

TEST(ReparametrizedPose, ZeroShiftIsIdentity) {
  std::mt19937_64 rng(31);
  const Pose raw = RandomPose(rng);
  const Pose p = ReparametrizedPose(raw, 0.0, 100, 100);
  EXPECT_LT((p.Matrix() - raw.Matrix()).norm(), 1e-15);
}

TEST(ReparametrizedPose, IdentityRawBecomesAxisTranslation) {
  const Pose p = ReparametrizedPose(Pose::Identity(), 3.0, 100, 100);
  EXPECT_LT((p.t - Vector3d(0, 0, 3)).norm(), 1e-15);
  EXPECT_LT((p.Rotation() - Matrix3d::Identity()).norm(), 1e-15);
  const Pose q = ReparametrizedPose(Pose::Identity(), 3.0, 200, 100);
  EXPECT_LT((q.t - Vector3d(0, 0, 6)).norm(), 1e-15);
}

TEST(ReparametrizedPose, SmallRotationPivotsAtMedianDepth) {
  std::mt19937_64 rng(32);
  const double m = 4.0, dtheta = 1e-4;
  const Pose raw = RandomPose(rng);
  const Vector3d axis = Vector3d(0.3, -0.5, 0.8).normalized();
  const Pose delta =
      Pose::FromRt(Eigen::AngleAxisd(dtheta, axis).toRotationMatrix(), Vector3d::Zero());

  // Reparametrized: the world point on the optical axis at depth m.
  const Pose p = ReparametrizedPose(raw, m, 1, 1);
  const Vector3d axis_point = p.Inverse().Apply(Vector3d(0, 0, m));
  const Pose p_rot = ReparametrizedPose(Compose(delta, raw), m, 1, 1);
  const double moved_reparam = (p_rot.Apply(axis_point) - Vector3d(0, 0, m)).norm();

  // Classical: rotating the pose itself.
  const Vector3d classical_point = raw.Inverse().Apply(Vector3d(0, 0, m));
  const double moved_classic =
      (Compose(delta, raw).Apply(classical_point) - Vector3d(0, 0, m)).norm();

  EXPECT_LT(moved_reparam, 1e-12);
  EXPECT_NEAR(moved_classic, dtheta * axis.cross(Vector3d(0, 0, m)).norm(), 1e-9);
}

}  // namespace
}  // namespace pmsfm
