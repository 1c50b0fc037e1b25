#pragma once

#include <span>
#include <vector>

#include "pmsfm/pointmap.h"
#include "pmsfm/scene_graph.h"

namespace pmsfm {

struct Match {
  Pixel a;  // pixel in the first image of the edge
  Pixel b;  // pixel in the second image
  double confidence = 1.0;
};

struct MatchSet {
  Edge edge{0, 1};
  std::vector<Match> pairs;

  void Validate(int width, int height) const;
};

// Everything the pairwise predictor returns for edge (n, m). Naming follows
// pixels-then-frame: x_nm maps pixels of n into the frame of m.
struct PairPrediction {
  ImageId n = 0;
  ImageId m = 1;
  PointMap x_nn, x_mn, x_mm, x_nm;
  FeatureMap d_n, d_m;
  MatchSet matches;

  int width() const { return x_nn.width; }
  int height() const { return x_nn.height; }
  void Validate() const;
};

// Depth of every pixel tied to a coarse grid of anchor depths by a ratio
// frozen at construction.
struct AnchorGrid {
  int spacing = 8;
  int width = 0;   // image size
  int height = 0;
  int grid_w = 0;  // ceil(width / spacing)
  int grid_h = 0;
  VectorXd anchor_depths;  // grid_h x grid_w, row-major
  VectorXd offsets;        // per pixel, row-major

  int AnchorOf(int i, int j) const { return (j / spacing) * grid_w + (i / spacing); }
  Pixel AnchorPixel(int u, int v) const;
  int anchor_count() const { return grid_w * grid_h; }
  double Depth(int i, int j) const {
    return offsets(j * width + i) * anchor_depths(AnchorOf(i, j));
  }
};

AnchorGrid BuildAnchorGrid(const VectorXd& depth, int width, int height,
                           int spacing = 8);

struct CanonicalView {
  ImageId id = 0;
  PointMap pointmap;
  VectorXd depth;  // third coordinate of the canonical pointmap
  double focal = 1.0;
  double median_depth = 1.0;
  AnchorGrid anchors;

  int width() const { return pointmap.width; }
  int height() const { return pointmap.height; }
};

// Mutual nearest neighbours reached by alternating hops from seeds on a's
// grid. Confidence is (1 + cosine) / 2 of the matched features.
MatchSet FastReciprocalNN(const FeatureMap& da, const FeatureMap& db,
                          int seed_spacing = 8, int max_iters = 10);

// Per-pixel confidence-weighted mean; zero total confidence falls back to
// the plain mean.
PointMap CanonicalPointmap(std::span<const PointMap> estimates);

struct FocalEstimate {
  double focal = 0.0;
  std::vector<double> objective;  // per iteration, starting at the L2 init
};

// Minimizes sum ||p - f q|| over f by iteratively reweighted least squares.
FocalEstimate EstimateFocalWeiszfeld(const PointMap& pm, int iterations = 10);

// Canonical view from explicit own-frame estimates.
CanonicalView CanonicalFromEstimates(ImageId id, std::span<const PointMap> estimates,
                                     int anchor_spacing = 8);

// Aggregates every own-frame estimate of image `id` over its graph edges,
// then derives depth, focal and anchors.
CanonicalView CanonicalizeView(const SceneGraph& graph,
                               std::span<const PairPrediction> predictions,
                               ImageId id, int anchor_spacing = 8);

}  // namespace pmsfm
