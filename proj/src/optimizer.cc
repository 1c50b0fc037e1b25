#include "pmsfm/optimizer.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <string>

#include <Eigen/SVD>

#include "pmsfm/autodiff.h"

namespace pmsfm {

void OptimConfig::Validate() const {
  PMSFM_CHECK(coarse_iters >= 0 && refine_iters >= 0, ErrorKind::kInvalidArgument,
              "iteration counts must be non-negative");
  PMSFM_CHECK(coarse_lr > 0 && refine_lr > 0, ErrorKind::kInvalidArgument,
              "learning rates must be positive");
  PMSFM_CHECK((refine_exponent > 0 && refine_exponent <= 1.0 + 1e-12) ||
                  refine_exponent == 2.0,
              ErrorKind::kInvalidArgument,
              "refinement exponent must lie in (0, 1] (2 allowed for ablation)");
  PMSFM_CHECK(coarse_exponent > 0, ErrorKind::kInvalidArgument,
              "coarse exponent must be positive");
  PMSFM_CHECK(smoothing > 0 && adam_eps > 0, ErrorKind::kInvalidArgument,
              "smoothing constants must be positive");
}

// ---------------------------------------------------------------------------
// State

double SceneState::Focal(ImageId n) const {
  return std::exp(log_focals[shared_focal ? 0 : n]);
}

double SceneState::Shift(ImageId n, Stage stage) const {
  if (!rotation_center) return 0.0;
  const CanonicalView& v = views[n];
  const double f = stage == Stage::kCoarse ? v.focal : Focal(n);
  return v.median_depth * f / v.focal;
}

namespace {

std::vector<double> Shifts(const SceneState& s, Stage stage) {
  std::vector<double> out(s.size());
  for (int n = 0; n < s.size(); ++n) out[n] = s.Shift(n, stage);
  return out;
}

}  // namespace

std::vector<CameraParams> SceneState::Cameras(Stage stage) const {
  const auto shifts = Shifts(*this, stage);
  const auto world = ComposeAllWorldPoses(tree, shifts);
  double min_scale = world.empty() ? 1.0 : world[0].s;
  for (const auto& w : world) min_scale = std::min(min_scale, w.s);
  std::vector<CameraParams> cams(size());
  for (int n = 0; n < size(); ++n) {
    const CanonicalView& v = views[n];
    const double f = stage == Stage::kCoarse ? v.focal : Focal(n);
    cams[n].intrinsics = Intrinsics::Centered(f, v.width(), v.height());
    cams[n].pose = Pose::FromRt(world[n].R, world[n].t);
    cams[n].sigma = world[n].s / min_scale;
    if (tree.links[n].parent >= 0) cams[n].parent = tree.links[n].parent;
  }
  return cams;
}

double SceneState::Depth(ImageId n, int i, int j, Stage stage) const {
  const CanonicalView& v = views[n];
  if (stage == Stage::kCoarse || freeze_depth) return v.depth(j * v.width() + i);
  return v.anchors.offsets(j * v.width() + i) *
         std::exp(log_anchor_depths[n](v.anchors.AnchorOf(i, j)));
}

SceneState MakeState(std::vector<CanonicalView> views, KinematicTree tree,
                     const OptimConfig& cfg) {
  PMSFM_CHECK(static_cast<int>(views.size()) == tree.size(), ErrorKind::kShapeMismatch,
              "view count differs from tree size");
  SceneState s;
  s.views = std::move(views);
  s.tree = std::move(tree);
  s.shared_focal = cfg.shared_focal;
  s.freeze_depth = cfg.freeze_depth;
  s.rotation_center = cfg.rotation_center;
  if (s.shared_focal) {
    std::vector<double> f;
    for (const auto& v : s.views) f.push_back(v.focal);
    std::nth_element(f.begin(), f.begin() + f.size() / 2, f.end());
    s.log_focals = {std::log(f[f.size() / 2])};
  } else {
    for (const auto& v : s.views) s.log_focals.push_back(std::log(v.focal));
  }
  for (const auto& v : s.views) s.log_anchor_depths.push_back(v.anchors.anchor_depths.array().log());
  std::vector<double> depths;
  for (const auto& v : s.views) depths.push_back(v.median_depth);
  std::nth_element(depths.begin(), depths.begin() + depths.size() / 2, depths.end());
  s.rotation_scale = depths[depths.size() / 2];
  return s;
}

// ---------------------------------------------------------------------------
// Parameters

ParameterLayout MakeLayout(const SceneState& state, Stage stage) {
  ParameterLayout l;
  l.cameras = state.size();
  l.focal_offset = l.cameras * ParameterLayout::kPoseBlock;
  l.size = l.focal_offset;
  if (stage == Stage::kCoarse) return l;
  l.focal_count = static_cast<int>(state.log_focals.size());
  l.size += l.focal_count;
  if (!state.freeze_depth) {
    for (int n = 0; n < state.size(); ++n) {
      l.anchor_offset.push_back(l.size);
      l.size += static_cast<int>(state.log_anchor_depths[n].size());
    }
  }
  return l;
}

VectorXd PackParameters(const SceneState& state, Stage stage) {
  const ParameterLayout l = MakeLayout(state, stage);
  VectorXd p(l.size);
  for (int n = 0; n < state.size(); ++n) {
    const TreeLink& link = state.tree.links[n];
    const int o = ParameterLayout::PoseOffset(n);
    p.segment<4>(o) = state.rotation_scale * link.relative.q;
    p.segment<3>(o + 4) = -(link.relative.Rotation().transpose() * link.relative.t);
    p(o + 7) = std::log(link.scale);
  }
  for (int k = 0; k < l.focal_count; ++k) p(l.focal_offset + k) = state.log_focals[k];
  for (std::size_t n = 0; n < l.anchor_offset.size(); ++n)
    p.segment(l.anchor_offset[n], state.log_anchor_depths[n].size()) = state.log_anchor_depths[n];
  return p;
}

void UnpackParameters(const VectorXd& p, Stage stage, SceneState* state) {
  const ParameterLayout l = MakeLayout(*state, stage);
  PMSFM_CHECK(p.size() == l.size, ErrorKind::kShapeMismatch, "parameter size mismatch");
  for (int n = 0; n < state->size(); ++n) {
    TreeLink& link = state->tree.links[n];
    const int o = ParameterLayout::PoseOffset(n);
    link.relative.q = p.segment<4>(o).normalized();
    link.relative.t = -(link.relative.Rotation() * p.segment<3>(o + 4));
    link.scale = std::exp(p(o + 7));
  }
  for (int k = 0; k < l.focal_count; ++k) state->log_focals[k] = p(l.focal_offset + k);
  for (std::size_t n = 0; n < l.anchor_offset.size(); ++n)
    state->log_anchor_depths[n] = p.segment(l.anchor_offset[n], state->log_anchor_depths[n].size());
}

// ---------------------------------------------------------------------------
// Loss evaluation. Per-camera quantities are computed with a templated scalar
// so they can be taped; per-match terms are plain double code.

namespace {

template <typename T>
struct CameraEval {
  Mat3<T> forward_R;  // sigma * R
  Vec3<T> t;
  Mat3<T> back_R;  // R^T / sigma
  Vec3<T> center;  // -R^T t / sigma
  T focal;
  double cx = 0, cy = 0;
};

template <typename T>
struct SceneEval {
  std::vector<CameraEval<T>> cams;
  std::vector<std::vector<T>> anchors;
};

template <typename T>
SceneEval<T> EvaluateScene(const SceneState& s, Stage stage,
                           const std::vector<T>& p, const ParameterLayout& l) {
  using std::exp;
  const int n_cams = s.size();
  std::vector<T> focal(n_cams);
  for (int n = 0; n < n_cams; ++n) {
    if (stage == Stage::kCoarse)
      focal[n] = T(s.views[n].focal);
    else
      focal[n] = exp(p[l.focal_offset + (s.shared_focal ? 0 : n)]);
  }

  std::vector<Similarity<T>> world(n_cams);
  for (ImageId n : s.tree.TopologicalOrder()) {
    const int o = ParameterLayout::PoseOffset(n);
    Vec4<T> q;
    q << p[o], p[o + 1], p[o + 2], p[o + 3];
    Vec3<T> c;
    c << p[o + 4], p[o + 5], p[o + 6];
    Similarity<T> link;
    link.R = QuaternionToRotation<T>(q);
    link.s = exp(p[o + 7]);
    link.t = -(link.R * c);
    if (s.rotation_center) {
      const CanonicalView& v = s.views[n];
      link.t(2) = link.t(2) + T(v.median_depth / v.focal) * focal[n];
    }
    const ImageId parent = s.tree.links[n].parent;
    world[n] = parent < 0 ? link : Compose(link, world[parent]);
  }

  int argmin = 0;
  for (int n = 1; n < n_cams; ++n)
    if (world[n].s < world[argmin].s) argmin = n;
  const T min_scale = world[argmin].s;

  SceneEval<T> out;
  out.cams.resize(n_cams);
  for (int n = 0; n < n_cams; ++n) {
    const T sigma = world[n].s / min_scale;
    CameraEval<T>& c = out.cams[n];
    c.forward_R = world[n].R * sigma;
    c.t = world[n].t;
    c.back_R = world[n].R.transpose() / sigma;
    c.center = -(c.back_R * world[n].t);
    c.focal = focal[n];
    c.cx = s.views[n].width() / 2.0;
    c.cy = s.views[n].height() / 2.0;
  }
  if (stage == Stage::kRefine && !s.freeze_depth) {
    out.anchors.resize(n_cams);
    for (int n = 0; n < n_cams; ++n) {
      const int count = static_cast<int>(s.log_anchor_depths[n].size());
      out.anchors[n].resize(count);
      for (int a = 0; a < count; ++a) out.anchors[n][a] = exp(p[l.anchor_offset[n] + a]);
    }
  }
  return out;
}

template <typename T>
T PixelDepth(const SceneState& s, const SceneEval<T>& ev, ImageId n, Pixel px) {
  const CanonicalView& v = s.views[n];
  const int idx = px.j * v.width() + px.i;
  if (ev.anchors.empty()) return T(v.depth(idx));
  return T(v.anchors.offsets(idx)) * ev.anchors[n][v.anchors.AnchorOf(px.i, px.j)];
}

template <typename T>
Vec3<T> WorldPoint(const SceneState& s, const SceneEval<T>& ev, ImageId n, Pixel px) {
  const CameraEval<T>& c = ev.cams[n];
  const Vec3<T> xc = BackprojectCamera<T>(c.focal, c.cx, c.cy, px.i, px.j,
                                          PixelDepth(s, ev, n, px));
  return c.back_R * xc + c.center;
}

SceneEval<double> ValuesOf(const SceneEval<ad::Var>& ev) {
  SceneEval<double> out;
  out.cams.resize(ev.cams.size());
  for (std::size_t n = 0; n < ev.cams.size(); ++n) {
    const CameraEval<ad::Var>& c = ev.cams[n];
    CameraEval<double>& d = out.cams[n];
    d.forward_R = c.forward_R.unaryExpr([](const ad::Var& v) { return v.value(); });
    d.back_R = c.back_R.unaryExpr([](const ad::Var& v) { return v.value(); });
    d.t = c.t.unaryExpr([](const ad::Var& v) { return v.value(); });
    d.center = c.center.unaryExpr([](const ad::Var& v) { return v.value(); });
    d.focal = c.focal.value();
    d.cx = c.cx;
    d.cy = c.cy;
  }
  out.anchors.resize(ev.anchors.size());
  for (std::size_t n = 0; n < ev.anchors.size(); ++n)
    for (const auto& a : ev.anchors[n]) out.anchors[n].push_back(a.value());
  return out;
}

struct CameraAdjoint {
  Matrix3d forward_R = Matrix3d::Zero();
  Matrix3d back_R = Matrix3d::Zero();
  Vector3d t = Vector3d::Zero();
  Vector3d center = Vector3d::Zero();
  double focal = 0.0;
};

struct TermAdjoints {
  std::vector<CameraAdjoint> cams;
  std::vector<VectorXd> anchors;

  TermAdjoints(const SceneState& s, const SceneEval<double>& ev) : cams(s.size()) {
    for (const auto& a : ev.anchors) anchors.push_back(VectorXd::Zero(a.size()));
  }
};

// Backprojected pixel plus the pieces its derivatives need.
struct PixelPoint {
  ImageId cam;
  Pixel px;
  Vector3d ray;    // ((i - cx) / f, (j - cy) / f, 1)
  double depth;
  Vector3d local;  // depth * ray
  Vector3d world;
};

PixelPoint Backproject(const SceneState& s, const SceneEval<double>& ev, ImageId n, Pixel px) {
  const CameraEval<double>& c = ev.cams[n];
  PixelPoint out{n, px, {(px.i - c.cx) / c.focal, (px.j - c.cy) / c.focal, 1.0}, 0.0, {}, {}};
  out.depth = PixelDepth(s, ev, n, px);
  out.local = out.depth * out.ray;
  out.world = c.back_R * out.local + c.center;
  return out;
}

// Pulls the gradient g of a world point back to its camera, focal and depth.
void PullBack(const SceneState& s, const SceneEval<double>& ev, Stage stage,
              const PixelPoint& pt, const Vector3d& g, TermAdjoints* adj) {
  CameraAdjoint& a = adj->cams[pt.cam];
  a.back_R += g * pt.local.transpose();
  a.center += g;
  if (stage == Stage::kCoarse) return;
  const Vector3d g_local = ev.cams[pt.cam].back_R.transpose() * g;
  const double f = ev.cams[pt.cam].focal;
  a.focal -= pt.depth / f * (g_local.x() * pt.ray.x() + g_local.y() * pt.ray.y());
  if (adj->anchors.empty()) return;
  const CanonicalView& v = s.views[pt.cam];
  const double g_depth = g_local.dot(pt.ray);
  adj->anchors[pt.cam](v.anchors.AnchorOf(pt.px.i, pt.px.j)) +=
      g_depth * v.anchors.offsets(pt.px.j * v.width() + pt.px.i);
}

// Adds the weighted rho of the reprojection of `x` into camera n against
// `target` and, when `adj` is set, its derivatives. False when x is behind
// the camera.
bool ReprojectionAdjoint(const SceneState& s, const SceneEval<double>& ev, ImageId n,
                         const PixelPoint& x, Pixel target, double weight, double eps2,
                         double half_exponent, double* value, TermAdjoints* adj) {
  const CameraEval<double>& c = ev.cams[n];
  const Vector3d xc = c.forward_R * x.world + c.t;
  if (!(xc.z() > kMinDepth)) return false;
  const double inv_z = 1.0 / xc.z();
  const double u = c.focal * xc.x() * inv_z + c.cx;
  const double v = c.focal * xc.y() * inv_z + c.cy;
  const double du = target.i - u, dv = target.j - v;
  const double s2 = du * du + dv * dv + eps2;
  const double rho = std::pow(s2, half_exponent);
  *value += weight * rho;
  if (!adj) return true;
  const double k = -weight * 2.0 * half_exponent * rho / s2;  // d(w rho)/d(u, v) = k (du, dv)
  const double gu = k * du, gv = k * dv;
  const Vector3d g_xc(gu * c.focal * inv_z, gv * c.focal * inv_z,
                      -(gu * xc.x() + gv * xc.y()) * c.focal * inv_z * inv_z);
  CameraAdjoint& a = adj->cams[n];
  a.focal += (gu * xc.x() + gv * xc.y()) * inv_z;
  a.forward_R += g_xc * x.world.transpose();
  a.t += g_xc;
  PullBack(s, ev, Stage::kRefine, x, c.forward_R.transpose() * g_xc, adj);
  return true;
}

int AccumulateTerms(const SceneState& s, const SceneEval<double>& ev,
                    std::span<const MatchSet> matches, Stage stage, const OptimConfig& cfg,
                    double* value, TermAdjoints* adj) {
  const double eps2 = cfg.smoothing * cfg.smoothing;
  int skipped = 0;
  for (const MatchSet& ms : matches) {
    const auto [n, m] = ms.edge;
    for (const Match& mt : ms.pairs) {
      const PixelPoint xn = Backproject(s, ev, n, mt.a);
      const PixelPoint xm = Backproject(s, ev, m, mt.b);
      if (stage == Stage::kCoarse) {
        const Vector3d r = xn.world - xm.world;
        const double s2 = r.squaredNorm() + eps2;
        const double term = std::pow(s2, cfg.coarse_exponent / 2);
        *value += mt.confidence * term;
        if (!adj) continue;
        const Vector3d g = mt.confidence * cfg.coarse_exponent * term / s2 * r;
        PullBack(s, ev, stage, xn, g, adj);
        PullBack(s, ev, stage, xm, -g, adj);
        continue;
      }
      const double half = cfg.refine_exponent / 2;
      skipped += !ReprojectionAdjoint(s, ev, n, xm, mt.a, mt.confidence, eps2, half, value, adj);
      skipped += !ReprojectionAdjoint(s, ev, m, xn, mt.b, mt.confidence, eps2, half, value, adj);
    }
  }
  return skipped;
}

}  // namespace

Vector3d ConstrainedPoint(const SceneState& state, ImageId n, Pixel pixel, Stage stage) {
  PMSFM_CHECK(n >= 0 && n < state.size(), ErrorKind::kMissingNode, "unknown camera");
  PMSFM_CHECK(pixel.i >= 0 && pixel.j >= 0 && pixel.i < state.views[n].width() &&
                  pixel.j < state.views[n].height(),
              ErrorKind::kInvalidArgument, "pixel out of bounds");
  const auto cams = state.Cameras(stage);
  return InverseReproject(cams[n], pixel.i, pixel.j, state.Depth(n, pixel.i, pixel.j, stage));
}

LossResult EvaluateLoss(const SceneState& state, std::span<const MatchSet> matches,
                        Stage stage, const OptimConfig& cfg, bool with_gradient) {
  const ParameterLayout layout = MakeLayout(state, stage);
  const VectorXd packed = PackParameters(state, stage);
  LossResult result;

  if (!with_gradient) {
    std::vector<double> p(packed.data(), packed.data() + packed.size());
    const SceneEval<double> ev = EvaluateScene(state, stage, p, layout);
    result.skipped = AccumulateTerms(state, ev, matches, stage, cfg, &result.value, nullptr);
    return result;
  }

  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  std::vector<ad::Var> p;
  p.reserve(packed.size());
  for (Eigen::Index k = 0; k < packed.size(); ++k) p.push_back(tape.Variable(packed(k)));
  const SceneEval<ad::Var> ev = EvaluateScene(state, stage, p, layout);

  // Per-match terms are differentiated in closed form with respect to the
  // per-camera quantities; the tape then carries those adjoints through the
  // tree composition and scale normalization.
  const SceneEval<double> evd = ValuesOf(ev);
  TermAdjoints adj(state, evd);
  result.skipped = AccumulateTerms(state, evd, matches, stage, cfg, &result.value, &adj);
  for (int n = 0; n < state.size(); ++n) {
    const CameraEval<ad::Var>& c = ev.cams[n];
    const CameraAdjoint& a = adj.cams[n];
    for (int r = 0; r < 3; ++r) {
      for (int k = 0; k < 3; ++k) {
        tape.Seed(c.forward_R(r, k), a.forward_R(r, k));
        tape.Seed(c.back_R(r, k), a.back_R(r, k));
      }
      tape.Seed(c.t(r), a.t(r));
      tape.Seed(c.center(r), a.center(r));
    }
    tape.Seed(c.focal, a.focal);
    if (!ev.anchors.empty())
      for (std::size_t k = 0; k < ev.anchors[n].size(); ++k)
        tape.Seed(ev.anchors[n][k], adj.anchors[n](k));
  }
  tape.Propagate();
  result.gradient.resize(packed.size());
  for (std::size_t k = 0; k < p.size(); ++k) result.gradient(k) = tape.adjoint(p[k]);
  return result;
}

// ---------------------------------------------------------------------------
// Initialization

Similarity<double> UmeyamaAlign(std::span<const Vector3d> src,
                                std::span<const Vector3d> dst,
                                std::span<const double> weights) {
  PMSFM_CHECK(src.size() == dst.size() && (weights.empty() || weights.size() == src.size()),
              ErrorKind::kShapeMismatch, "alignment inputs differ in size");
  PMSFM_CHECK(src.size() >= 3, ErrorKind::kDegenerateConfiguration,
              "need at least three correspondences");
  double wsum = 0;
  Vector3d mu_s = Vector3d::Zero(), mu_d = Vector3d::Zero();
  for (std::size_t k = 0; k < src.size(); ++k) {
    const double w = weights.empty() ? 1.0 : weights[k];
    wsum += w;
    mu_s += w * src[k];
    mu_d += w * dst[k];
  }
  PMSFM_CHECK(wsum > 0, ErrorKind::kDegenerateConfiguration, "zero total weight");
  mu_s /= wsum;
  mu_d /= wsum;
  Matrix3d cov = Matrix3d::Zero();
  double var_s = 0;
  for (std::size_t k = 0; k < src.size(); ++k) {
    const double w = weights.empty() ? 1.0 : weights[k];
    cov += w * (dst[k] - mu_d) * (src[k] - mu_s).transpose();
    var_s += w * (src[k] - mu_s).squaredNorm();
  }
  cov /= wsum;
  var_s /= wsum;
  Eigen::JacobiSVD<Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vector3d sv = svd.singularValues();
  PMSFM_CHECK(var_s > 0 && sv(1) > 1e-12 * std::max(1.0, sv(0)),
              ErrorKind::kDegenerateConfiguration, "collinear or coincident points");
  Matrix3d S = Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) S(2, 2) = -1;
  Similarity<double> out;
  out.R = svd.matrixU() * S * svd.matrixV().transpose();
  out.s = (sv.asDiagonal() * S).trace() / var_s;
  out.t = mu_d - out.s * out.R * mu_s;
  return out;
}

namespace {

Similarity<double> Invert(const Similarity<double>& a) {
  Similarity<double> inv;
  inv.R = a.R.transpose();
  inv.s = 1.0 / a.s;
  inv.t = -(a.R.transpose() * a.t) / a.s;
  return inv;
}

// Weighted alignment with a few rounds of residual trimming.
Similarity<double> RobustAlign(const std::vector<Vector3d>& src,
                               const std::vector<Vector3d>& dst,
                               const std::vector<double>& w) {
  std::vector<double> weights = w;
  Similarity<double> est = UmeyamaAlign(src, dst, weights);
  for (int round = 0; round < 3; ++round) {
    std::vector<double> res(src.size());
    for (std::size_t k = 0; k < src.size(); ++k) res[k] = (est.Apply(src[k]) - dst[k]).norm();
    std::vector<double> sorted = res;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double cutoff = 3.0 * sorted[sorted.size() / 2] + 1e-12;
    std::vector<Vector3d> s2, d2;
    std::vector<double> w2;
    for (std::size_t k = 0; k < src.size(); ++k)
      if (res[k] <= cutoff) {
        s2.push_back(src[k]);
        d2.push_back(dst[k]);
        w2.push_back(w[k]);
      }
    if (s2.size() < 3 || s2.size() == src.size()) break;
    try {
      est = UmeyamaAlign(s2, d2, w2);
    } catch (const Error&) {
      break;
    }
  }
  return est;
}

}  // namespace

InitReport InitFromPairs(const SceneGraph& graph, std::span<const MatchSet> matches,
                         SceneState* state) {
  const int n = state->size();
  InitReport report;
  struct Aligned {
    Edge edge;
    Similarity<double> n_to_m;  // canonical coords of n -> canonical coords of m
    std::size_t support = 0;
  };
  std::vector<Aligned> usable;
  std::map<Edge, const MatchSet*> by_edge;
  for (const auto& ms : matches) by_edge[ms.edge] = &ms;

  for (const Edge& e : graph.edges) {
    auto it = by_edge.find(e);
    const MatchSet* ms = nullptr;
    bool flipped = false;
    if (it != by_edge.end()) {
      ms = it->second;
    } else if (auto rit = by_edge.find({e.second, e.first}); rit != by_edge.end()) {
      ms = rit->second;
      flipped = true;
    }
    std::vector<Vector3d> src, dst;
    std::vector<double> w;
    if (ms) {
      const CanonicalView& va = state->views[ms->edge.first];
      const CanonicalView& vb = state->views[ms->edge.second];
      for (const Match& mt : ms->pairs) {
        if (mt.confidence <= 0) continue;
        src.push_back(va.pointmap.At(mt.a.i, mt.a.j));
        dst.push_back(vb.pointmap.At(mt.b.i, mt.b.j));
        w.push_back(mt.confidence);
      }
    }
    try {
      PMSFM_CHECK(src.size() >= 3, ErrorKind::kTooFewMatches, "fewer than 3 matches");
      Similarity<double> s = RobustAlign(src, dst, w);
      if (flipped) s = Invert(s);
      usable.push_back({e, s, src.size()});
    } catch (const Error&) {
      report.fallback_edges.push_back(e);
    }
  }

  // Maximum-support spanning tree, traversed from the kinematic root.
  std::stable_sort(usable.begin(), usable.end(),
                   [](const Aligned& a, const Aligned& b) { return a.support > b.support; });
  std::vector<int> comp(n);
  for (int k = 0; k < n; ++k) comp[k] = k;
  auto find = [&](int x) {
    while (comp[x] != x) x = comp[x] = comp[comp[x]];
    return x;
  };
  std::vector<std::vector<std::pair<ImageId, Similarity<double>>>> adj(n);
  for (const auto& a : usable) {
    const int ra = find(a.edge.first), rb = find(a.edge.second);
    if (ra == rb) continue;
    comp[std::max(ra, rb)] = std::min(ra, rb);
    adj[a.edge.first].push_back({a.edge.second, a.n_to_m});
    adj[a.edge.second].push_back({a.edge.first, Invert(a.n_to_m)});
  }

  const ImageId root = state->tree.root >= 0 && state->tree.root < n ? state->tree.root : 0;
  std::vector<Similarity<double>> world(n);
  std::vector<char> seen(n, 0);
  std::vector<ImageId> queue{root};
  seen[root] = 1;
  for (std::size_t k = 0; k < queue.size(); ++k) {
    const ImageId cur = queue[k];
    for (const auto& [next, rel] : adj[cur])
      if (!seen[next]) {
        seen[next] = 1;
        world[next] = Compose(rel, world[cur]);
        queue.push_back(next);
      }
  }
  for (int k = 0; k < n; ++k)
    if (!seen[k]) report.unreached.push_back(k);

  double min_scale = world[0].s;
  for (const auto& w : world) min_scale = std::min(min_scale, w.s);
  for (auto& w : world) w.s /= min_scale;
  // Dividing every scale by the same factor is a change of world units;
  // translations stay in camera units.
  SetLinksFromWorldPoses(&state->tree, world, Shifts(*state, Stage::kCoarse));
  return report;
}

void RandomizePoses(SceneState* state, double extent, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(-extent, extent);
  for (auto& link : state->tree.links) {
    Vector4d q(gauss(rng), gauss(rng), gauss(rng), gauss(rng));
    link.relative.q = q.normalized();
    const Vector3d c(uni(rng), uni(rng), uni(rng));
    link.relative.t = -(link.relative.Rotation() * c);
    link.scale = 1.0;
  }
}

// ---------------------------------------------------------------------------
// Adam with cosine decay

double CosineLearningRate(double base, int iter, int total) {
  if (total <= 0) return base;
  return base * (1.0 + std::cos(std::numbers::pi * iter / total)) / 2.0;
}

namespace {

void RunStage(SceneState* state, std::span<const MatchSet> matches, Stage stage,
              int iters, double base_lr, const OptimConfig& cfg,
              std::vector<TraceEntry>* trace) {
  VectorXd params = PackParameters(*state, stage);
  VectorXd m1 = VectorXd::Zero(params.size());
  VectorXd m2 = VectorXd::Zero(params.size());
  for (int t = 0; t < iters; ++t) {
    const double lr = CosineLearningRate(base_lr, t, iters);
    const LossResult loss = EvaluateLoss(*state, matches, stage, cfg, true);
    if (!std::isfinite(loss.value) || !loss.gradient.allFinite())
      throw Error(ErrorKind::kNonFiniteLoss,
                  "stage " + std::to_string(static_cast<int>(stage)) + " iteration " +
                      std::to_string(t));
    trace->push_back({static_cast<int>(stage), t, lr, loss.value, loss.skipped});
    m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * loss.gradient;
    m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * loss.gradient.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg.beta1, t + 1);
    const double c2 = 1.0 - std::pow(cfg.beta2, t + 1);
    params.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + cfg.adam_eps);
    UnpackParameters(params, stage, state);
    params = PackParameters(*state, stage);
  }
}

}  // namespace

OptimizeResult Optimize(SceneState state, std::span<const MatchSet> matches,
                        const OptimConfig& cfg) {
  cfg.Validate();
  OptimizeResult result;
  if (state.size() <= 1) {
    result.state = std::move(state);
    return result;
  }
  RunStage(&state, matches, Stage::kCoarse, cfg.coarse_iters, cfg.coarse_lr, cfg,
           &result.trace);

  // Refinement changes the focal entering each pivot shift; keep the world
  // cameras where the coarse stage left them.
  const auto world = ComposeAllWorldPoses(state.tree, Shifts(state, Stage::kCoarse));
  SetLinksFromWorldPoses(&state.tree, world, Shifts(state, Stage::kRefine));

  RunStage(&state, matches, Stage::kRefine, cfg.refine_iters, cfg.refine_lr, cfg,
           &result.trace);
  result.state = std::move(state);
  return result;
}

}  // namespace pmsfm
