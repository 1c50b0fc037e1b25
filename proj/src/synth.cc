#include "pmsfm/synth.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>

namespace pmsfm {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kRoomRadius = 10.0;

std::uint64_t MixSeed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x ^= x >> 33;
  x *= 0xff51afd7ed558ccdULL;
  x ^= x >> 33;
  return x;
}

Pose LookAt(const Vector3d& center, const Vector3d& target) {
  const Vector3d z = (target - center).normalized();
  Vector3d down(0, 1, 0);
  if (std::abs(z.dot(down)) > 0.99) down = Vector3d(0, 0, 1);
  const Vector3d x = down.cross(z).normalized();
  const Vector3d y = z.cross(x);
  Matrix3d R;
  R.row(0) = x.transpose();
  R.row(1) = y.transpose();
  R.row(2) = z.transpose();
  return Pose::FromRt(R, -R * center);
}

// Smallest positive ray parameter for the primitive, if any.
std::optional<double> Intersect(const Primitive& p, const Vector3d& o, const Vector3d& d) {
  constexpr double kEps = 1e-9;
  if (p.type == Primitive::Type::kPlane) {
    const double denom = p.center.dot(d);
    if (std::abs(denom) < 1e-12) return std::nullopt;
    const double t = (p.radius - p.center.dot(o)) / denom;
    if (t > kEps) return t;
    return std::nullopt;
  }
  const Vector3d oc = o - p.center;
  const double a = d.squaredNorm();
  const double b = 2.0 * oc.dot(d);
  const double c = oc.squaredNorm() - p.radius * p.radius;
  const double disc = b * b - 4 * a * c;
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  const double t0 = (-b - sq) / (2 * a);
  const double t1 = (-b + sq) / (2 * a);
  if (p.type == Primitive::Type::kSphereInside) {
    if (t1 > kEps) return t1;
    return std::nullopt;
  }
  if (t0 > kEps) return t0;
  return std::nullopt;
}

void CheckCamera(const SynthScene& s, ImageId cam) {
  PMSFM_CHECK(cam >= 0 && cam < s.size(), ErrorKind::kMissingNode,
              "camera id " + std::to_string(cam) + " not in scene");
}

}  // namespace

const char* SurfaceKindName(SurfaceKind kind) {
  switch (kind) {
    case SurfaceKind::kPlane: return "plane";
    case SurfaceKind::kSphere: return "sphere";
    case SurfaceKind::kBlobs: return "blobs";
  }
  return "?";
}

SurfaceKind ParseSurfaceKind(const std::string& name) {
  if (name == "plane") return SurfaceKind::kPlane;
  if (name == "sphere") return SurfaceKind::kSphere;
  if (name == "blobs") return SurfaceKind::kBlobs;
  throw Error(ErrorKind::kParse, "unknown surface kind '" + name + "'");
}

std::optional<double> SynthScene::RayDepth(ImageId cam, double i, double j) const {
  const CameraParams& c = cameras[cam];
  const Vector3d ray_cam = BackprojectCamera<double>(c.intrinsics.focal,
                                                     c.intrinsics.principal_point.x(),
                                                     c.intrinsics.principal_point.y(),
                                                     i, j, 1.0);
  const Matrix3d R = c.pose.Rotation();
  const Vector3d origin = c.pose.Center();
  const Vector3d dir = R.transpose() * ray_cam;
  std::optional<double> best;
  for (const auto& p : primitives) {
    const auto t = Intersect(p, origin, dir);
    if (t && (!best || *t < *best)) best = t;
  }
  return best;  // ray_cam has unit z, so the parameter is the depth
}

VectorXd SynthScene::RenderDepth(ImageId cam) const {
  CheckCamera(*this, cam);
  if (static_cast<std::size_t>(cam) < depth_cache_.size()) return depth_cache_[cam];
  const int W = width(), H = height();
  VectorXd depth(W * H);
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < W; ++i) {
      const auto z = RayDepth(cam, i, j);
      PMSFM_CHECK(z.has_value(), ErrorKind::kDegenerateGeometry,
                  "pixel ray escapes the scene");
      depth(j * W + i) = *z;
    }
  return depth;
}

Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> SynthScene::RenderPoints(
    ImageId cam) const {
  const VectorXd depth = RenderDepth(cam);
  const int W = width(), H = height();
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> pts(W * H, 3);
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < W; ++i)
      pts.row(j * W + i) = InverseReproject(cameras[cam], i, j, depth(j * W + i)).transpose();
  return pts;
}

namespace {

// Pixel of `cam` where world point x is seen unoccluded, if any.
std::optional<Vector2d> VisibleAt(const SynthScene& s, ImageId cam, const Vector3d& x) {
  const CameraParams& c = s.cameras[cam];
  const Vector3d xc = c.pose.Apply(x);
  Vector2d uv;
  if (!ProjectCamera<double>(c.intrinsics.focal, c.intrinsics.principal_point.x(),
                             c.intrinsics.principal_point.y(), xc, &uv))
    return std::nullopt;
  if (uv.x() < -0.5 || uv.y() < -0.5 || uv.x() > s.width() - 0.5 || uv.y() > s.height() - 0.5)
    return std::nullopt;
  const auto z = s.RayDepth(cam, uv.x(), uv.y());
  if (!z || std::abs(*z - xc.z()) > 1e-6 * xc.z()) return std::nullopt;
  return uv;
}

}  // namespace

double SynthScene::Overlap(ImageId a, ImageId b) const {
  CheckCamera(*this, a);
  CheckCamera(*this, b);
  const auto pts = RenderPoints(a);
  int seen = 0, total = 0;
  for (Eigen::Index k = 0; k < pts.rows(); k += 2) {
    ++total;
    if (VisibleAt(*this, b, pts.row(k).transpose())) ++seen;
  }
  return total ? static_cast<double>(seen) / total : 0.0;
}

VectorXd SynthScene::Encode(const Vector3d& x) const {
  const int levels = options.feature_levels;
  VectorXd f(6 * levels);
  for (int l = 0; l < levels; ++l) {
    const double w = kPi / (2.0 * kRoomRadius) * std::ldexp(1.0, l);
    for (int a = 0; a < 3; ++a) {
      f(6 * l + a) = std::sin(w * x(a));
      f(6 * l + 3 + a) = std::cos(w * x(a));
    }
  }
  return f;
}

FeatureMap SynthScene::PixelFeatures(ImageId cam, double noise, std::uint64_t seed) const {
  FeatureMap out;
  if (static_cast<std::size_t>(cam) < feature_cache_.size()) {
    out = feature_cache_[cam];
  } else {
    const auto pts = RenderPoints(cam);
    out = FeatureMap(width(), height(), feature_dim());
    for (Eigen::Index k = 0; k < pts.rows(); ++k)
      out.features.row(k) = Encode(pts.row(k).transpose()).transpose();
  }
  if (noise > 0) {
    std::mt19937_64 rng(MixSeed(seed, static_cast<std::uint64_t>(cam)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (Eigen::Index k = 0; k < out.features.size(); ++k)
      out.features.data()[k] += noise * gauss(rng);
  }
  return out;
}

void SynthScene::Render() {
  depth_cache_.clear();
  feature_cache_.clear();
  std::vector<VectorXd> depth;
  std::vector<FeatureMap> features;
  for (int n = 0; n < size(); ++n) {
    depth.push_back(RenderDepth(n));
    features.push_back(PixelFeatures(n));
  }
  depth_cache_ = std::move(depth);
  feature_cache_ = std::move(features);
}

FeatureMap SynthScene::TokenFeatures(ImageId cam) const {
  CheckCamera(*this, cam);
  const int s = options.token_stride;
  const int w = std::max(1, width() / s), h = std::max(1, height() / s);
  FeatureMap out(w, h, feature_dim());
  for (int b = 0; b < h; ++b)
    for (int a = 0; a < w; ++a) {
      const int i = std::min(a * s + s / 2, width() - 1);
      const int j = std::min(b * s + s / 2, height() - 1);
      const auto z = RayDepth(cam, i, j);
      PMSFM_CHECK(z.has_value(), ErrorKind::kDegenerateGeometry,
                  "token ray escapes the scene");
      out.features.row(out.Index(a, b)) =
          Encode(InverseReproject(cameras[cam], i, j, *z)).transpose();
    }
  return out;
}

PointMap SynthScene::OwnPointmap(ImageId cam) const {
  const auto pts = RenderPoints(cam);
  PointMap pm(width(), height(), cam);
  const Pose& pose = cameras[cam].pose;
  for (Eigen::Index k = 0; k < pts.rows(); ++k)
    pm.points.row(k) = pose.Apply(pts.row(k).transpose()).transpose();
  return pm;
}

Trajectory SynthScene::GroundTruth() const {
  Trajectory out;
  for (int n = 0; n < size(); ++n) out.push_back({n, cameras[n].pose});
  return out;
}

SynthScene GenerateScene(SurfaceKind kind, int n_views, std::uint64_t seed,
                         const SceneOptions& options) {
  PMSFM_CHECK(n_views >= 1, ErrorKind::kBadCount, "need at least one view");
  PMSFM_CHECK(options.width >= 2 && options.height >= 2 && options.focal > 0,
              ErrorKind::kInvalidArgument, "invalid image geometry");
  PMSFM_CHECK(options.orbit_radius > 0 && options.orbit_radius < 0.8 * kRoomRadius,
              ErrorKind::kInvalidArgument, "orbit radius out of range");
  PMSFM_CHECK(options.feature_levels >= 1 && options.token_stride >= 1,
              ErrorKind::kInvalidArgument, "invalid feature options");

  SynthScene scene;
  scene.kind = kind;
  scene.options = options;
  scene.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  switch (kind) {
    case SurfaceKind::kPlane:
      scene.primitives.push_back({Primitive::Type::kPlane, Vector3d(0, 0, 1), 1.5});
      break;
    case SurfaceKind::kSphere:
      scene.primitives.push_back({Primitive::Type::kSphereOutside, Vector3d::Zero(), 1.2});
      break;
    case SurfaceKind::kBlobs: {
      const int count = 7;
      for (int k = 0; k < count; ++k) {
        const Vector3d c(1.2 * unit(rng), 0.6 * unit(rng), 1.2 * unit(rng));
        const double r = 0.45 + 0.25 * unit(rng);
        scene.primitives.push_back({Primitive::Type::kSphereOutside, c, r});
      }
      break;
    }
  }
  scene.primitives.push_back({Primitive::Type::kSphereInside, Vector3d::Zero(), kRoomRadius});

  const Intrinsics K = Intrinsics::Centered(options.focal, options.width, options.height);
  const bool loop = options.arc_deg >= 360.0;
  const double arc = options.arc_deg * kPi / 180.0;
  for (int k = 0; k < n_views; ++k) {
    double theta;
    if (loop)
      theta = 2 * kPi * k / n_views;
    else
      theta = n_views == 1 ? 0.0 : -arc / 2 + arc * k / (n_views - 1);
    const double step = loop ? 2 * kPi / n_views : (n_views > 1 ? arc / (n_views - 1) : 0.0);
    theta += 0.15 * step * unit(rng);
    const double elev = 0.12 * unit(rng);
    CameraParams cam;
    cam.intrinsics = K;
    if (options.pure_rotation) {
      const Vector3d center(0, 0, -options.orbit_radius);
      const Vector3d dir(std::sin(theta) * std::cos(elev), std::sin(elev),
                         std::cos(theta) * std::cos(elev));
      cam.pose = LookAt(center, center + dir);
    } else {
      const double r = options.orbit_radius * (1.0 + 0.08 * unit(rng));
      const Vector3d center(r * std::sin(theta) * std::cos(elev), r * std::sin(elev),
                            -r * std::cos(theta) * std::cos(elev));
      const Vector3d target(0.15 * unit(rng), 0.15 * unit(rng), 0.15 * unit(rng));
      cam.pose = LookAt(center, target);
    }
    scene.cameras.push_back(cam);
  }
  if (options.shuffle) std::shuffle(scene.cameras.begin(), scene.cameras.end(), rng);
  scene.Render();
  return scene;
}

void NoiseConfig::Validate() const {
  PMSFM_CHECK(depth_noise >= 0 && std::isfinite(depth_noise), ErrorKind::kInvalidArgument,
              "depth noise must be >= 0");
  PMSFM_CHECK(match_outlier_rate >= 0 && match_outlier_rate < 1, ErrorKind::kInvalidArgument,
              "outlier rate must be in [0, 1)");
  PMSFM_CHECK(confidence_fidelity >= 0 && confidence_fidelity <= 1,
              ErrorKind::kInvalidArgument, "confidence fidelity must be in [0, 1]");
  PMSFM_CHECK(feature_noise >= 0, ErrorKind::kInvalidArgument, "feature noise must be >= 0");
  PMSFM_CHECK(subpixel_tolerance > 0 && subpixel_tolerance <= 0.5,
              ErrorKind::kInvalidArgument, "subpixel tolerance must be in (0, 0.5]");
  PMSFM_CHECK(match_spacing >= 1, ErrorKind::kInvalidArgument, "match spacing must be >= 1");
}

namespace {

struct Candidate {
  Pixel own;
  Pixel other;
  double error;
};

// Best near-exact correspondence in `to` of the pixels behind `pts`, one per
// grid cell.
std::vector<Candidate> Correspondences(const SynthScene& s, ImageId from, ImageId to,
                                       const Eigen::Matrix<double, Eigen::Dynamic, 3,
                                                           Eigen::RowMajor>& pts,
                                       const NoiseConfig& noise) {
  const int W = s.width(), H = s.height();
  std::map<std::pair<int, int>, Candidate> best;
  for (int j = 0; j < H; ++j)
    for (int i = 0; i < W; ++i) {
      const auto uv = VisibleAt(s, to, pts.row(j * W + i).transpose());
      if (!uv) continue;
      const int ri = static_cast<int>(std::lround(uv->x()));
      const int rj = static_cast<int>(std::lround(uv->y()));
      if (ri < 0 || rj < 0 || ri >= W || rj >= H) continue;
      const double err = std::max(std::abs(uv->x() - ri), std::abs(uv->y() - rj));
      if (err > noise.subpixel_tolerance) continue;
      // The surface point behind the rounded pixel must project back onto
      // (i, j) just as closely.
      const auto z = s.RayDepth(to, ri, rj);
      if (!z) continue;
      const Vector3d back = InverseReproject(s.cameras[to], ri, rj, *z);
      const auto uv_back = VisibleAt(s, from, back);
      if (!uv_back) continue;
      const double err_back = std::max(std::abs(uv_back->x() - i), std::abs(uv_back->y() - j));
      if (err_back > noise.subpixel_tolerance) continue;
      const auto cell = std::make_pair(j / noise.match_spacing, i / noise.match_spacing);
      auto it = best.find(cell);
      const double worst = std::max(err, err_back);
      if (it == best.end() || worst < it->second.error) best[cell] = {{i, j}, {ri, rj}, worst};
    }
  std::vector<Candidate> out;
  for (const auto& [cell, c] : best) out.push_back(c);
  return out;
}

PointMap FramePointmap(const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>& world,
                       const CameraParams& frame_cam, ImageId frame, int W, int H,
                       double gauge, const NoiseConfig& noise, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  PointMap pm(W, H, frame);
  for (Eigen::Index k = 0; k < world.rows(); ++k) {
    const double z = noise.depth_noise > 0 ? gauss(rng) : 0.0;
    const double factor = std::exp(noise.depth_noise * z);
    pm.points.row(k) = (gauge * factor * frame_cam.pose.Apply(world.row(k).transpose())).transpose();
    // High where the noise draw was small, flat when fidelity is zero.
    pm.confidence(k) = 1.0 - noise.confidence_fidelity * (1.0 - std::exp(-0.5 * z * z));
  }
  return pm;
}

}  // namespace

SimulatedPair SimulatePair(const SynthScene& scene, Edge edge, const NoiseConfig& noise) {
  noise.Validate();
  const auto [n, m] = edge;
  CheckCamera(scene, n);
  CheckCamera(scene, m);
  PMSFM_CHECK(n < m, ErrorKind::kInvalidArgument, "edge must satisfy n < m");
  const int W = scene.width(), H = scene.height();

  std::mt19937_64 rng(MixSeed(MixSeed(scene.seed, static_cast<std::uint64_t>(n)),
                              static_cast<std::uint64_t>(m)));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  SimulatedPair out;
  out.gauge_nm = std::exp(0.5 * unit(rng));
  out.gauge_mn = std::exp(0.5 * unit(rng));

  const auto pts_n = scene.RenderPoints(n);
  const auto pts_m = scene.RenderPoints(m);
  PairPrediction& p = out.prediction;
  p.n = n;
  p.m = m;
  p.x_nn = FramePointmap(pts_n, scene.cameras[n], n, W, H, out.gauge_nm, noise, rng);
  p.x_mn = FramePointmap(pts_m, scene.cameras[n], n, W, H, out.gauge_nm, noise, rng);
  p.x_mm = FramePointmap(pts_m, scene.cameras[m], m, W, H, out.gauge_mn, noise, rng);
  p.x_nm = FramePointmap(pts_n, scene.cameras[m], m, W, H, out.gauge_mn, noise, rng);
  const std::uint64_t feature_seed = MixSeed(scene.seed, 0x5eedULL);
  p.d_n = scene.PixelFeatures(n, noise.feature_noise, feature_seed);
  p.d_m = scene.PixelFeatures(m, noise.feature_noise, feature_seed);

  std::set<std::pair<Pixel, Pixel>> seen;
  std::vector<Match> inliers;
  for (const auto& c : Correspondences(scene, n, m, pts_n, noise))
    if (seen.insert({c.own, c.other}).second) inliers.push_back({c.own, c.other, 1.0});
  for (const auto& c : Correspondences(scene, m, n, pts_m, noise))
    if (seen.insert({c.other, c.own}).second) inliers.push_back({c.other, c.own, 1.0});
  if (inliers.empty() && !noise.allow_empty)
    throw Error(ErrorKind::kNoOverlap, "views " + std::to_string(n) + " and " +
                                           std::to_string(m) + " share no visible surface");

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> col(0, W - 1), row(0, H - 1);
  const double outlier_conf = 1.0 - 0.9 * noise.confidence_fidelity;
  p.matches.edge = edge;
  for (const Match& match : inliers) {
    if (u01(rng) < noise.match_outlier_rate) {
      Match bad;
      do {
        bad = {{col(rng), row(rng)}, {col(rng), row(rng)}, outlier_conf};
      } while (seen.contains({bad.a, bad.b}));
      seen.insert({bad.a, bad.b});
      p.matches.pairs.push_back(bad);
      out.outlier.push_back(1);
    } else {
      p.matches.pairs.push_back(match);
      out.outlier.push_back(0);
    }
  }
  return out;
}

}  // namespace pmsfm
