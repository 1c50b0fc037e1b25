#include "pmsfm/geometry.h"

#include <cmath>
#include <string>

#include "pmsfm/kinematic_tree.h"

namespace pmsfm {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNonPositiveDepth: return "NonPositiveDepth";
    case ErrorKind::kCycleDetected: return "CycleDetected";
    case ErrorKind::kMissingNode: return "MissingNode";
    case ErrorKind::kInsufficientSamples: return "InsufficientSamples";
    case ErrorKind::kDimensionMismatch: return "DimensionMismatch";
    case ErrorKind::kBadCount: return "BadCount";
    case ErrorKind::kDisconnected: return "Disconnected";
    case ErrorKind::kEmptyEstimates: return "EmptyEstimates";
    case ErrorKind::kShapeMismatch: return "ShapeMismatch";
    case ErrorKind::kDegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::kMissingPrediction: return "MissingPrediction";
    case ErrorKind::kTooFewMatches: return "TooFewMatches";
    case ErrorKind::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::kDegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorKind::kNoOverlap: return "NoOverlap";
    case ErrorKind::kInvalidArgument: return "InvalidArgument";
    case ErrorKind::kParse: return "ParseError";
    case ErrorKind::kIo: return "IoError";
    case ErrorKind::kCorruptBundle: return "CorruptBundle";
  }
  return "Unknown";
}

Intrinsics Intrinsics::Centered(double focal, int width, int height) {
  Intrinsics k;
  k.focal = focal;
  k.width = width;
  k.height = height;
  k.principal_point = Vector2d(width / 2.0, height / 2.0);
  k.Validate();
  return k;
}

void Intrinsics::Validate() const {
  PMSFM_CHECK(focal > 0 && std::isfinite(focal), ErrorKind::kInvalidArgument,
              "focal must be positive");
  PMSFM_CHECK(width >= 1 && height >= 1, ErrorKind::kInvalidArgument,
              "image size must be positive");
  PMSFM_CHECK(principal_point == Vector2d(width / 2.0, height / 2.0),
              ErrorKind::kInvalidArgument,
              "principal point must be the image center");
}

Pose Pose::FromRt(const Matrix3d& R, const Vector3d& t) {
  Pose p;
  p.q = RotationToQuaternion(R);
  p.t = t;
  return p;
}

Matrix3d Pose::Rotation() const { return QuaternionToRotation<double>(q); }

Matrix4d Pose::Matrix() const {
  Matrix4d m = Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = Rotation();
  m.topRightCorner<3, 1>() = t;
  return m;
}

Pose Pose::Inverse() const {
  Pose inv;
  inv.q = Vector4d(q(0), -q(1), -q(2), -q(3)) / q.norm();
  inv.t = -(Rotation().transpose() * t);
  return inv;
}

void Pose::Normalize() { q /= q.norm(); }

Pose Compose(const Pose& a, const Pose& b) {
  const Eigen::Quaterniond qa(a.q(0), a.q(1), a.q(2), a.q(3));
  const Eigen::Quaterniond qb(b.q(0), b.q(1), b.q(2), b.q(3));
  Eigen::Quaterniond qc = qa * qb;
  qc.normalize();
  Pose out;
  out.q = Vector4d(qc.w(), qc.x(), qc.y(), qc.z());
  out.t = a.Rotation() * b.t + a.t;
  return out;
}

Vector4d RotationToQuaternion(const Matrix3d& R) {
  Eigen::Quaterniond q(R);
  q.normalize();
  if (q.w() < 0) q.coeffs() *= -1.0;
  return Vector4d(q.w(), q.x(), q.y(), q.z());
}

Vector2d Reproject(const CameraParams& cam, const Vector3d& x) {
  const Vector3d xc = cam.pose.Rotation() * (cam.sigma * x) + cam.pose.t;
  Vector2d pixel;
  const bool ok =
      ProjectCamera<double>(cam.intrinsics.focal, cam.intrinsics.principal_point(0),
                            cam.intrinsics.principal_point(1), xc, &pixel);
  PMSFM_CHECK(ok, ErrorKind::kNonPositiveDepth, "point behind camera");
  return pixel;
}

Vector3d InverseReproject(const CameraParams& cam, double i, double j,
                          double depth) {
  PMSFM_CHECK(depth > 0, ErrorKind::kNonPositiveDepth, "depth must be positive");
  const Vector3d xc = BackprojectCamera<double>(
      cam.intrinsics.focal, cam.intrinsics.principal_point(0),
      cam.intrinsics.principal_point(1), i, j, depth);
  return cam.pose.Rotation().transpose() * (xc - cam.pose.t) / cam.sigma;
}

Pose ReparametrizedPose(const Pose& raw, double median_canonical_depth,
                        double focal, double canonical_focal) {
  PMSFM_CHECK(median_canonical_depth >= 0 && focal > 0 && canonical_focal > 0,
              ErrorKind::kInvalidArgument, "invalid reparametrization input");
  Pose p = raw;
  p.t(2) += median_canonical_depth * focal / canonical_focal;
  return p;
}

// ---------------------------------------------------------------------------
// Kinematic tree

const char* TreeModeName(TreeMode mode) {
  switch (mode) {
    case TreeMode::kStar: return "star";
    case TreeMode::kMst: return "mst";
    case TreeMode::kHclustSim: return "hclust-sim";
    case TreeMode::kHclustCorr: return "hclust-corr";
    case TreeMode::kNone: return "none";
  }
  return "none";
}

TreeMode ParseTreeMode(const std::string& name) {
  if (name == "star") return TreeMode::kStar;
  if (name == "mst") return TreeMode::kMst;
  if (name == "hclust-sim") return TreeMode::kHclustSim;
  if (name == "hclust-corr") return TreeMode::kHclustCorr;
  if (name == "none") return TreeMode::kNone;
  throw Error(ErrorKind::kInvalidArgument, "unknown tree mode '" + name + "'");
}

int KinematicTree::EdgeCount() const {
  int n = 0;
  for (const auto& l : links) n += l.parent >= 0;
  return n;
}

std::vector<ImageId> KinematicTree::TopologicalOrder() const {
  const int n = size();
  std::vector<std::vector<ImageId>> children(n);
  std::vector<ImageId> roots;
  for (int i = 0; i < n; ++i) {
    const ImageId p = links[i].parent;
    PMSFM_CHECK(p < n && p != i, p == i ? ErrorKind::kCycleDetected
                                        : ErrorKind::kMissingNode,
                "bad parent for camera " + std::to_string(i));
    if (p < 0)
      roots.push_back(i);
    else
      children[p].push_back(i);
  }
  std::vector<ImageId> order;
  order.reserve(n);
  for (ImageId r : roots) {
    order.push_back(r);
    for (std::size_t k = order.size() - 1; k < order.size(); ++k)
      for (ImageId c : children[order[k]]) order.push_back(c);
  }
  PMSFM_CHECK(static_cast<int>(order.size()) == n, ErrorKind::kCycleDetected,
              "kinematic tree contains a cycle");
  return order;
}

int KinematicTree::Depth() const {
  const auto order = TopologicalOrder();
  std::vector<int> depth(size(), 0);
  int best = 0;
  for (ImageId id : order) {
    if (links[id].parent >= 0) depth[id] = depth[links[id].parent] + 1;
    best = std::max(best, depth[id]);
  }
  return best;
}

void KinematicTree::Validate() const {
  TopologicalOrder();
  if (mode == TreeMode::kNone) return;
  PMSFM_CHECK(root >= 0 && root < size() && links[root].parent < 0,
              ErrorKind::kMissingNode, "root missing");
  PMSFM_CHECK(EdgeCount() == size() - 1, ErrorKind::kDisconnected,
              "kinematic tree must have exactly one root");
}

namespace {

Similarity<double> LinkTransform(const TreeLink& link, double shift) {
  Similarity<double> s;
  s.R = link.relative.Rotation();
  s.t = link.relative.t;
  s.t(2) += shift;
  s.s = link.scale;
  return s;
}

Similarity<double> InverseSimilarity(const Similarity<double>& a) {
  Similarity<double> inv;
  inv.R = a.R.transpose();
  inv.s = 1.0 / a.s;
  inv.t = -(a.R.transpose() * a.t) / a.s;
  return inv;
}

}  // namespace

Similarity<double> ComposeWorldPose(const KinematicTree& tree, ImageId id,
                                    std::span<const double> shifts) {
  PMSFM_CHECK(id >= 0 && id < tree.size(), ErrorKind::kMissingNode,
              "camera " + std::to_string(id) + " not in tree");
  std::vector<ImageId> path;
  for (ImageId cur = id; cur >= 0; cur = tree.links[cur].parent) {
    PMSFM_CHECK(cur < tree.size(), ErrorKind::kMissingNode, "dangling parent");
    PMSFM_CHECK(static_cast<int>(path.size()) <= tree.size(),
                ErrorKind::kCycleDetected, "kinematic tree contains a cycle");
    path.push_back(cur);
  }
  Similarity<double> world;
  for (auto it = path.rbegin(); it != path.rend(); ++it) {
    const double shift = shifts.empty() ? 0.0 : shifts[*it];
    world = Compose(LinkTransform(tree.links[*it], shift), world);
  }
  return world;
}

std::vector<Similarity<double>> ComposeAllWorldPoses(
    const KinematicTree& tree, std::span<const double> shifts) {
  std::vector<Similarity<double>> world(tree.size());
  for (ImageId id : tree.TopologicalOrder()) {
    const double shift = shifts.empty() ? 0.0 : shifts[id];
    const Similarity<double> link = LinkTransform(tree.links[id], shift);
    const ImageId p = tree.links[id].parent;
    world[id] = p < 0 ? link : Compose(link, world[p]);
  }
  return world;
}

void SetLinksFromWorldPoses(KinematicTree* tree,
                            std::span<const Similarity<double>> world,
                            std::span<const double> shifts) {
  PMSFM_CHECK(static_cast<int>(world.size()) == tree->size(),
              ErrorKind::kShapeMismatch, "pose count differs from tree size");
  for (int id = 0; id < tree->size(); ++id) {
    TreeLink& link = tree->links[id];
    Similarity<double> rel = world[id];
    if (link.parent >= 0)
      rel = Compose(world[id], InverseSimilarity(world[link.parent]));
    if (!shifts.empty()) rel.t(2) -= shifts[id];
    link.relative = Pose::FromRt(rel.R, rel.t);
    link.scale = rel.s;
  }
}

}  // namespace pmsfm
