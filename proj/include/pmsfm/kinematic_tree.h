#pragma once

#include <span>
#include <string>
#include <vector>

#include "pmsfm/geometry.h"

namespace pmsfm {

enum class TreeMode { kStar, kMst, kHclustSim, kHclustCorr, kNone };

const char* TreeModeName(TreeMode mode);
TreeMode ParseTreeMode(const std::string& name);

// Per-camera link. For the root (and for every camera in kNone mode) the
// relative transform is the camera's absolute world-to-camera transform.
struct TreeLink {
  ImageId parent = -1;
  Pose relative;
  double scale = 1.0;
};

// Directed camera tree: camera m's transform is link(m) composed after its
// parent's, evaluated root first.
struct KinematicTree {
  TreeMode mode = TreeMode::kNone;
  ImageId root = 0;
  std::vector<TreeLink> links;

  int size() const { return static_cast<int>(links.size()); }
  int EdgeCount() const;

  // Root-first ordering; throws kCycleDetected or kMissingNode.
  std::vector<ImageId> TopologicalOrder() const;
  int Depth() const;
  void Validate() const;
};

// Root-to-node product of link transforms. When `shifts` is non-empty every
// node on the path is post-translated by (0, 0, shifts[node]).
Similarity<double> ComposeWorldPose(const KinematicTree& tree, ImageId id,
                                    std::span<const double> shifts = {});

std::vector<Similarity<double>> ComposeAllWorldPoses(
    const KinematicTree& tree, std::span<const double> shifts = {});

// Inverse of ComposeAllWorldPoses: sets every link so the composed transforms
// equal `world` under the given shifts.
void SetLinksFromWorldPoses(KinematicTree* tree,
                            std::span<const Similarity<double>> world,
                            std::span<const double> shifts = {});

}  // namespace pmsfm
