#pragma once

// End-to-end driver: retrieval, scene graph, canonical views, kinematic
// tree, initialization and two-stage optimization. Pair predictions are
// pulled per graph edge through a callback so the same code runs on bundles
// loaded from disk and on the synthetic oracle.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pmsfm/eval.h"
#include "pmsfm/io.h"
#include "pmsfm/optimizer.h"
#include "pmsfm/synth.h"

namespace pmsfm {

struct PipelineConfig {
  GraphMode graph_mode = GraphMode::kRetrieval;
  GraphOptions graph;
  int local_window = 0;  // 0: sized to the retrieval pair budget
  int random_edges = 0;  // 0: the retrieval pair budget
  TreeMode tree_mode = TreeMode::kHclustCorr;
  int anchor_spacing = 8;
  int codebook_size = 1024;
  int retrieval_samples = 20000;
  double random_init = 0.0;  // > 0: random poses within this extent instead of pairwise init
  OptimConfig optim;
  bool deterministic = false;
  std::uint64_t seed = 0;

  void Validate() const;
};

// Scene generation and predictor noise for the synth command.
struct SynthConfig {
  SurfaceKind kind = SurfaceKind::kBlobs;
  int n_views = 6;
  SceneOptions scene;
  NoiseConfig noise;
};

struct RunConfig {
  PipelineConfig pipeline;
  SynthConfig synth;
};

// Flat key=value text; '#' starts a comment. Unknown keys are rejected.
void ApplyConfigText(const std::string& text, RunConfig* cfg);
void ApplyConfigValue(const std::string& key, const std::string& value, RunConfig* cfg);
std::string FormatConfig(const RunConfig& cfg);

// Upper bound on retrieval edges before repair.
int PairBudget(int n, const GraphOptions& opts);

MatrixXd RetrievalSimilarity(std::span<const ImageInput> images, const PipelineConfig& cfg,
                             RetrievalModel* model = nullptr);
SceneGraph PlanGraph(const MatrixXd& similarity, const PipelineConfig& cfg);

using PairSource = std::function<PairPrediction(Edge)>;

struct PipelineResult {
  MatrixXd similarity;
  SceneGraph graph;
  KinematicTree tree;
  InitReport init;
  OptimizeResult optimized;
  std::vector<ImageId> unregistered;
  Trajectory trajectory;
  std::vector<double> focals;
};

// `similarity` overrides retrieval when given; `graph` overrides both.
PipelineResult RunPipeline(std::span<const ImageInput> images, const PairSource& pairs,
                           const PipelineConfig& cfg,
                           const std::optional<MatrixXd>& similarity = std::nullopt,
                           const std::optional<SceneGraph>& graph = std::nullopt);

// Rigid world-to-camera poses (translation divided by sigma).
Trajectory ToTrajectory(const SceneState& state, std::span<const ImageId> unregistered = {});

// Constrained pointmaps at anchor pixels (all pixels when dense).
PlyCloud StateCloud(const SceneState& state, bool dense);

// Final state in bundle form, enough to re-export point clouds.
TensorBundle StateToBundle(const SceneState& state);
struct ExportState {
  std::vector<CameraParams> cameras;
  std::vector<VectorXd> depths;
  std::vector<VectorXd> confidence;
  int anchor_spacing = 8;
};
ExportState StateFromBundle(const TensorBundle& bundle);
PlyCloud ExportCloud(const ExportState& state, bool dense);

// Synthetic oracle inputs.
std::vector<ImageInput> SynthImages(const SynthScene& scene);
// Pairs without overlap come back with empty match sets.
PairSource SynthPairs(const SynthScene& scene, const NoiseConfig& noise);

std::string FormatTrace(std::span<const TraceEntry> trace);
std::string FormatFocals(std::span<const double> focals);

}  // namespace pmsfm
