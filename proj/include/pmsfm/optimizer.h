#pragma once

// Two-stage first-order global alignment.
//
// Free variables live on the kinematic tree: every link is a scaled rigid
// transform parametrized as y -> R(q) (s y - c), with s = exp(log_scale) and
// c the pivot point in the parent's (scaled) coordinates. With the
// rotation-center option each camera's composed transform is additionally
// post-translated along z by its median canonical depth (times f / f~), so
// rotations pivot near the observed surface instead of the optical center.
//
// Per-camera scales are normalized inside every evaluation so that the
// smallest one equals 1. Focals and anchor depths are optimized in log space.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pmsfm/kinematic_tree.h"
#include "pmsfm/local_recon.h"

namespace pmsfm {

struct OptimConfig {
  int coarse_iters = 300;
  int refine_iters = 300;
  double coarse_lr = 0.07;
  double refine_lr = 0.014;
  double coarse_exponent = 1.5;
  double refine_exponent = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double smoothing = 1e-8;
  bool shared_focal = true;
  bool freeze_depth = false;
  bool rotation_center = true;
  std::uint64_t seed = 0;

  void Validate() const;
};

enum class Stage { kCoarse = 1, kRefine = 2 };

struct SceneState {
  std::vector<CanonicalView> views;
  KinematicTree tree;
  std::vector<double> log_focals;  // one entry when shared
  std::vector<VectorXd> log_anchor_depths;
  bool shared_focal = true;
  bool freeze_depth = false;
  bool rotation_center = true;
  // Packed quaternions carry this norm (the median canonical depth), so a
  // unit step turns points near the surface about as far as a pivot step.
  double rotation_scale = 1.0;

  int size() const { return static_cast<int>(views.size()); }
  double Focal(ImageId n) const;
  // z post-translation of camera n at the current focal.
  double Shift(ImageId n, Stage stage) const;
  // World cameras after tree composition and scale normalization; the pose
  // is the rigid part (x_cam = R * sigma * x + t).
  std::vector<CameraParams> Cameras(Stage stage = Stage::kRefine) const;
  double Depth(ImageId n, int i, int j, Stage stage = Stage::kRefine) const;
};

// Layout of the flat parameter vector for a stage.
struct ParameterLayout {
  int cameras = 0;
  int focal_offset = 0;
  int focal_count = 0;
  std::vector<int> anchor_offset;  // empty in the coarse stage
  int size = 0;

  static constexpr int kPoseBlock = 8;  // q(4), pivot(3), log scale(1)
  static int PoseOffset(ImageId n) { return n * kPoseBlock; }
};

ParameterLayout MakeLayout(const SceneState& state, Stage stage);
VectorXd PackParameters(const SceneState& state, Stage stage);
void UnpackParameters(const VectorXd& params, Stage stage, SceneState* state);

SceneState MakeState(std::vector<CanonicalView> views, KinematicTree tree,
                     const OptimConfig& cfg);

Vector3d ConstrainedPoint(const SceneState& state, ImageId n, Pixel pixel,
                          Stage stage = Stage::kRefine);

struct LossResult {
  double value = 0.0;
  VectorXd gradient;  // empty unless requested
  int skipped = 0;
};

// Coarse: sum q ||chi_n - chi_m||^lambda1 with canonical focals and depths.
// Refine: sum q [rho(y_n - pi_n(chi_m)) + rho(y_m - pi_m(chi_n))].
// Norms are smoothed as sqrt(||.||^2 + eps^2). Matches landing behind a
// camera are skipped and counted.
LossResult EvaluateLoss(const SceneState& state, std::span<const MatchSet> matches,
                        Stage stage, const OptimConfig& cfg, bool with_gradient);

// Weighted least-squares similarity with dst ~ s R src + t.
Similarity<double> UmeyamaAlign(std::span<const Vector3d> src,
                                std::span<const Vector3d> dst,
                                std::span<const double> weights = {});

struct InitReport {
  std::vector<Edge> fallback_edges;  // too few matches to align
  std::vector<ImageId> unreached;    // cameras left at identity
};

// Chains pairwise Umeyama alignments of matched canonical points along a
// maximum-match spanning tree of the scene graph, then writes the result
// into the kinematic tree links.
InitReport InitFromPairs(const SceneGraph& graph, std::span<const MatchSet> matches,
                         SceneState* state);

// Uniformly random rotations and pivots within `extent`; used to probe
// recovery without the coarse stage.
void RandomizePoses(SceneState* state, double extent, std::uint64_t seed);

struct TraceEntry {
  int stage = 1;
  int iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  int skipped = 0;
};

struct OptimizeResult {
  SceneState state;
  std::vector<TraceEntry> trace;
};

double CosineLearningRate(double base, int iter, int total);

OptimizeResult Optimize(SceneState state, std::span<const MatchSet> matches,
                        const OptimConfig& cfg);

}  // namespace pmsfm
