#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pmsfm/kinematic_tree.h"
#include "pmsfm/types.h"

namespace pmsfm {

using Edge = std::pair<ImageId, ImageId>;  // always first < second

struct SceneGraph {
  int n = 0;
  std::vector<ImageId> keyframes;
  std::vector<Edge> edges;  // sorted, unique
  int repair_edges = 0;

  bool Contains(ImageId a, ImageId b) const;
  bool IsConnected() const;
  // Edges incident to `id`.
  std::vector<Edge> EdgesOf(ImageId id) const;
};

enum class GraphMode { kRetrieval, kComplete, kLocalWindow, kRandom };

const char* GraphModeName(GraphMode mode);
GraphMode ParseGraphMode(const std::string& name);

struct GraphOptions {
  int num_keyframes = 20;
  int knn = 10;
  bool knn_exclude_keyframes = false;
};

// Greedy farthest point sampling under d(i, j) = 1 - S(i, j), seeded with the
// image of smallest similarity row sum. Returned in ascending id order.
std::vector<ImageId> SelectKeyframesFps(const MatrixXd& S, int count);

// Dense keyframe core, each other image linked to its closest keyframe and
// its k nearest neighbours, then repaired into one component by repeatedly
// adding the most similar cross-component pair.
SceneGraph BuildGraph(const MatrixXd& S, const GraphOptions& opts = {});

SceneGraph BuildCompleteGraph(int n);
// Each image linked to the next `window` images in input order.
SceneGraph BuildLocalWindowGraph(int n, int window);
// `edge_count` uniformly drawn pairs, then random cross-component repair.
SceneGraph BuildRandomGraph(int n, int edge_count, std::uint64_t seed);

// `weights` is an N x N symmetric matrix; only entries on graph edges are
// read. Root is the first keyframe (image 0 without keyframes) for star and
// mst; the final cluster representative for the hierarchical modes.
KinematicTree BuildKinematicTree(const SceneGraph& graph, const MatrixXd& weights,
                                 TreeMode mode);

}  // namespace pmsfm
