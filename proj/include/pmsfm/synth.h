#pragma once

// Synthetic ground-truth scenes and a stand-in for the pairwise predictor:
// ray-cast depth, pointmaps in the right frames under a per-prediction scale
// gauge, positional-encoding features and exact-correspondence matches.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pmsfm/eval.h"
#include "pmsfm/local_recon.h"

namespace pmsfm {

enum class SurfaceKind { kPlane, kSphere, kBlobs };

const char* SurfaceKindName(SurfaceKind kind);
SurfaceKind ParseSurfaceKind(const std::string& name);

struct Primitive {
  enum class Type { kSphereOutside, kSphereInside, kPlane };
  Type type = Type::kSphereOutside;
  Vector3d center = Vector3d::Zero();  // sphere center, or plane normal
  double radius = 1.0;                 // sphere radius, or plane offset (n.x = d)
};

struct SceneOptions {
  int width = 128;
  int height = 96;
  double focal = 112.0;
  double orbit_radius = 4.0;
  double arc_deg = 60.0;  // azimuth span of the orbit (360 for a full loop)
  bool pure_rotation = false;
  bool shuffle = false;  // permute camera order after generation
  int feature_levels = 4;
  int token_stride = 8;  // retrieval token grid spacing in pixels
};

struct SynthScene {
  SurfaceKind kind = SurfaceKind::kBlobs;
  SceneOptions options;
  std::vector<Primitive> primitives;
  std::vector<CameraParams> cameras;  // sigma == 1
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(cameras.size()); }
  int width() const { return options.width; }
  int height() const { return options.height; }

  // Depth along the pixel ray of camera `cam`, if anything is hit.
  std::optional<double> RayDepth(ImageId cam, double i, double j) const;
  VectorXd RenderDepth(ImageId cam) const;
  // World point for every pixel, row-major (W*H x 3).
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> RenderPoints(ImageId cam) const;
  // Fraction of camera a's pixels whose surface point is visible in b.
  double Overlap(ImageId a, ImageId b) const;

  VectorXd Encode(const Vector3d& x) const;
  int feature_dim() const { return 6 * options.feature_levels; }
  // Per-pixel features (predictor output).
  FeatureMap PixelFeatures(ImageId cam, double noise = 0.0, std::uint64_t seed = 0) const;
  // Coarser token grid used for retrieval.
  FeatureMap TokenFeatures(ImageId cam) const;
  // Monocular own-frame pointmap (used when an image has no pairs).
  PointMap OwnPointmap(ImageId cam) const;
  Trajectory GroundTruth() const;

  // Caches per-camera depth and noise-free pixel features. GenerateScene
  // calls it; call it again after editing cameras or primitives.
  void Render();

 private:
  std::vector<VectorXd> depth_cache_;
  std::vector<FeatureMap> feature_cache_;
};

SynthScene GenerateScene(SurfaceKind kind, int n_views, std::uint64_t seed,
                         const SceneOptions& options = {});

struct NoiseConfig {
  double depth_noise = 0.0;         // std of log-normal multiplicative noise
  double match_outlier_rate = 0.0;  // in [0, 1)
  double confidence_fidelity = 1.0; // in [0, 1]
  double feature_noise = 0.0;
  double subpixel_tolerance = 0.1;  // max rounding error of an inlier match
  int match_spacing = 8;            // at most one match per cell per direction
  bool allow_empty = false;         // no overlap yields no matches instead of throwing

  void Validate() const;
};

struct SimulatedPair {
  PairPrediction prediction;
  std::vector<char> outlier;  // per match, diagnostics only
  double gauge_nm = 1.0;      // scale of the (n, m) forward pass
  double gauge_mn = 1.0;
};

SimulatedPair SimulatePair(const SynthScene& scene, Edge edge, const NoiseConfig& noise);

}  // namespace pmsfm
