#include "pmsfm/pipeline.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace pmsfm {

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool ParseBool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorKind::kInvalidArgument, key + ": expected a boolean, got '" + v + "'");
}

long long ParseInteger(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  PMSFM_CHECK(used == v.size() && !v.empty(), ErrorKind::kInvalidArgument,
              key + ": expected an integer, got '" + v + "'");
  return out;
}

double ParseReal(const std::string& key, const std::string& v) {
  try {
    return ParseDouble(v);
  } catch (const Error&) {
    throw Error(ErrorKind::kInvalidArgument, key + ": expected a number, got '" + v + "'");
  }
}

int AsInt(const std::string& key, const std::string& v) {
  const long long x = ParseInteger(key, v);
  PMSFM_CHECK(x >= INT32_MIN && x <= INT32_MAX, ErrorKind::kInvalidArgument,
              key + ": out of range");
  return static_cast<int>(x);
}

}  // namespace

void PipelineConfig::Validate() const {
  PMSFM_CHECK(graph.num_keyframes >= 1, ErrorKind::kInvalidArgument,
              "num_keyframes must be >= 1");
  PMSFM_CHECK(graph.knn >= 0, ErrorKind::kInvalidArgument, "knn must be >= 0");
  PMSFM_CHECK(local_window >= 0 && random_edges >= 0, ErrorKind::kInvalidArgument,
              "graph budget overrides must be >= 0");
  PMSFM_CHECK(anchor_spacing >= 1, ErrorKind::kInvalidArgument, "anchor_spacing must be >= 1");
  PMSFM_CHECK(codebook_size >= 1 && retrieval_samples >= 1, ErrorKind::kInvalidArgument,
              "retrieval sizes must be >= 1");
  PMSFM_CHECK(random_init >= 0, ErrorKind::kInvalidArgument, "random_init must be >= 0");
  optim.Validate();
}

void ApplyConfigValue(const std::string& key, const std::string& value, RunConfig* cfg) {
  PipelineConfig& p = cfg->pipeline;
  SynthConfig& s = cfg->synth;
  const std::string& v = value;
  try {
    if (key == "num_keyframes") p.graph.num_keyframes = AsInt(key, v);
    else if (key == "knn") p.graph.knn = AsInt(key, v);
    else if (key == "knn_exclude_keyframes") p.graph.knn_exclude_keyframes = ParseBool(key, v);
    else if (key == "scene_graph_mode") p.graph_mode = ParseGraphMode(v);
    else if (key == "local_window") p.local_window = AsInt(key, v);
    else if (key == "random_edges") p.random_edges = AsInt(key, v);
    else if (key == "tree_mode") p.tree_mode = ParseTreeMode(v);
    else if (key == "anchor_spacing") p.anchor_spacing = AsInt(key, v);
    else if (key == "codebook_size") p.codebook_size = AsInt(key, v);
    else if (key == "retrieval_samples") p.retrieval_samples = AsInt(key, v);
    else if (key == "random_init") p.random_init = ParseReal(key, v);
    else if (key == "coarse_iters") p.optim.coarse_iters = AsInt(key, v);
    else if (key == "refine_iters") p.optim.refine_iters = AsInt(key, v);
    else if (key == "coarse_lr") p.optim.coarse_lr = ParseReal(key, v);
    else if (key == "refine_lr") p.optim.refine_lr = ParseReal(key, v);
    else if (key == "coarse_exponent") p.optim.coarse_exponent = ParseReal(key, v);
    else if (key == "refine_exponent") p.optim.refine_exponent = ParseReal(key, v);
    else if (key == "shared_focal") p.optim.shared_focal = ParseBool(key, v);
    else if (key == "freeze_depth") p.optim.freeze_depth = ParseBool(key, v);
    else if (key == "rotation_center") p.optim.rotation_center = ParseBool(key, v);
    else if (key == "deterministic") p.deterministic = ParseBool(key, v);
    else if (key == "seed") p.seed = p.optim.seed = static_cast<std::uint64_t>(ParseInteger(key, v));
    else if (key == "surface") s.kind = ParseSurfaceKind(v);
    else if (key == "n_views") s.n_views = AsInt(key, v);
    else if (key == "width") s.scene.width = AsInt(key, v);
    else if (key == "height") s.scene.height = AsInt(key, v);
    else if (key == "focal") s.scene.focal = ParseReal(key, v);
    else if (key == "orbit_radius") s.scene.orbit_radius = ParseReal(key, v);
    else if (key == "arc_deg") s.scene.arc_deg = ParseReal(key, v);
    else if (key == "pure_rotation") s.scene.pure_rotation = ParseBool(key, v);
    else if (key == "shuffle") s.scene.shuffle = ParseBool(key, v);
    else if (key == "depth_noise") s.noise.depth_noise = ParseReal(key, v);
    else if (key == "match_outlier_rate") s.noise.match_outlier_rate = ParseReal(key, v);
    else if (key == "confidence_fidelity") s.noise.confidence_fidelity = ParseReal(key, v);
    else if (key == "feature_noise") s.noise.feature_noise = ParseReal(key, v);
    else throw Error(ErrorKind::kInvalidArgument, "unknown config key '" + key + "'");
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kParse) throw Error(ErrorKind::kInvalidArgument, e.what());
    throw;
  }
}

void ApplyConfigText(const std::string& text, RunConfig* cfg) {
  std::istringstream is(text);
  int line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::kInvalidArgument,
                  "config line " + std::to_string(line_no) + ": expected key=value");
    try {
      ApplyConfigValue(Trim(line.substr(0, eq)), Trim(line.substr(eq + 1)), cfg);
    } catch (const Error& e) {
      throw Error(e.kind(), "config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg->pipeline.Validate();
  cfg->synth.noise.Validate();
}

std::string FormatConfig(const RunConfig& cfg) {
  const PipelineConfig& p = cfg.pipeline;
  const SynthConfig& s = cfg.synth;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::ostringstream os;
  os << "scene_graph_mode=" << GraphModeName(p.graph_mode) << "\n"
     << "num_keyframes=" << p.graph.num_keyframes << "\n"
     << "knn=" << p.graph.knn << "\n"
     << "knn_exclude_keyframes=" << b(p.graph.knn_exclude_keyframes) << "\n"
     << "local_window=" << p.local_window << "\n"
     << "random_edges=" << p.random_edges << "\n"
     << "tree_mode=" << TreeModeName(p.tree_mode) << "\n"
     << "anchor_spacing=" << p.anchor_spacing << "\n"
     << "codebook_size=" << p.codebook_size << "\n"
     << "retrieval_samples=" << p.retrieval_samples << "\n"
     << "random_init=" << FormatDouble(p.random_init) << "\n"
     << "coarse_iters=" << p.optim.coarse_iters << "\n"
     << "refine_iters=" << p.optim.refine_iters << "\n"
     << "coarse_lr=" << FormatDouble(p.optim.coarse_lr) << "\n"
     << "refine_lr=" << FormatDouble(p.optim.refine_lr) << "\n"
     << "coarse_exponent=" << FormatDouble(p.optim.coarse_exponent) << "\n"
     << "refine_exponent=" << FormatDouble(p.optim.refine_exponent) << "\n"
     << "shared_focal=" << b(p.optim.shared_focal) << "\n"
     << "freeze_depth=" << b(p.optim.freeze_depth) << "\n"
     << "rotation_center=" << b(p.optim.rotation_center) << "\n"
     << "deterministic=" << b(p.deterministic) << "\n"
     << "seed=" << p.seed << "\n"
     << "surface=" << SurfaceKindName(s.kind) << "\n"
     << "n_views=" << s.n_views << "\n"
     << "width=" << s.scene.width << "\n"
     << "height=" << s.scene.height << "\n"
     << "focal=" << FormatDouble(s.scene.focal) << "\n"
     << "orbit_radius=" << FormatDouble(s.scene.orbit_radius) << "\n"
     << "arc_deg=" << FormatDouble(s.scene.arc_deg) << "\n"
     << "pure_rotation=" << b(s.scene.pure_rotation) << "\n"
     << "shuffle=" << b(s.scene.shuffle) << "\n"
     << "depth_noise=" << FormatDouble(s.noise.depth_noise) << "\n"
     << "match_outlier_rate=" << FormatDouble(s.noise.match_outlier_rate) << "\n"
     << "confidence_fidelity=" << FormatDouble(s.noise.confidence_fidelity) << "\n"
     << "feature_noise=" << FormatDouble(s.noise.feature_noise) << "\n";
  return os.str();
}

int PairBudget(int n, const GraphOptions& opts) {
  const int na = std::min(n, opts.num_keyframes);
  const int k = std::min(opts.knn, std::max(0, n - 1));
  return na * (na - 1) / 2 + (k + 1) * (n - na);
}

MatrixXd RetrievalSimilarity(std::span<const ImageInput> images, const PipelineConfig& cfg,
                             RetrievalModel* model_out) {
  const int n = static_cast<int>(images.size());
  if (n <= 1) return MatrixXd::Ones(n, n);
  std::vector<FeatureMap> maps;
  std::size_t tokens = 0;
  for (const auto& im : images) {
    maps.push_back(im.tokens);
    tokens += static_cast<std::size_t>(im.tokens.size());
  }
  const std::size_t samples = std::min<std::size_t>(tokens, cfg.retrieval_samples);
  const int k = std::max(1, std::min(cfg.codebook_size, static_cast<int>(samples / 4)));
  RetrievalModel model = FitRetrievalModel(maps, k, samples, cfg.seed);
  std::vector<AsmkDescriptor> desc;
  for (const auto& m : maps) desc.push_back(AsmkEncode(m, model.whitening, model.codebook));
  if (model_out) *model_out = std::move(model);
  return SimilarityMatrix(desc);
}

SceneGraph PlanGraph(const MatrixXd& similarity, const PipelineConfig& cfg) {
  const int n = static_cast<int>(similarity.rows());
  PMSFM_CHECK(similarity.cols() == n, ErrorKind::kShapeMismatch, "similarity must be square");
  const int budget = std::max(1, PairBudget(n, cfg.graph));
  switch (cfg.graph_mode) {
    case GraphMode::kRetrieval:
      return BuildGraph(similarity, cfg.graph);
    case GraphMode::kComplete:
      return BuildCompleteGraph(n);
    case GraphMode::kLocalWindow: {
      int w = cfg.local_window;
      if (w == 0) {
        // Smallest window whose edge count reaches the budget.
        w = 1;
        while (w < n - 1 && w * n - w * (w + 1) / 2 < budget) ++w;
      }
      return BuildLocalWindowGraph(n, w);
    }
    case GraphMode::kRandom:
      return BuildRandomGraph(n, cfg.random_edges ? cfg.random_edges : budget, cfg.seed);
  }
  throw Error(ErrorKind::kInvalidArgument, "unknown graph mode");
}

Trajectory ToTrajectory(const SceneState& state, std::span<const ImageId> unregistered) {
  const std::set<ImageId> skip(unregistered.begin(), unregistered.end());
  Trajectory out;
  const auto cams = state.Cameras(Stage::kRefine);
  for (int n = 0; n < state.size(); ++n) {
    TrajectoryEntry e;
    e.id = state.views[n].id;
    if (!skip.contains(n)) {
      Pose p = cams[n].pose;
      p.t /= cams[n].sigma;
      e.pose = p;
    }
    out.push_back(e);
  }
  return out;
}

PipelineResult RunPipeline(std::span<const ImageInput> images, const PairSource& pairs,
                           const PipelineConfig& cfg, const std::optional<MatrixXd>& similarity,
                           const std::optional<SceneGraph>& graph) {
  cfg.Validate();
  const int n = static_cast<int>(images.size());
  PMSFM_CHECK(n >= 1, ErrorKind::kBadCount, "no images");
  for (int k = 0; k < n; ++k)
    PMSFM_CHECK(images[k].id == k, ErrorKind::kInvalidArgument,
                "image ids must be 0..N-1 in order");

  PipelineResult r;
  if (graph) {
    PMSFM_CHECK(graph->n == n, ErrorKind::kShapeMismatch, "graph size differs from image count");
    r.graph = *graph;
    r.similarity = similarity ? *similarity : MatrixXd::Ones(n, n);
  } else {
    r.similarity = similarity ? *similarity : RetrievalSimilarity(images, cfg);
    PMSFM_CHECK(r.similarity.rows() == n && r.similarity.cols() == n, ErrorKind::kShapeMismatch,
                "similarity size differs from image count");
    r.graph = n == 1 ? SceneGraph{1, {0}, {}, 0} : PlanGraph(r.similarity, cfg);
  }
  PMSFM_CHECK(r.graph.IsConnected(), ErrorKind::kDisconnected, "scene graph is disconnected");

  std::vector<PairPrediction> preds;
  std::vector<MatchSet> matches;
  for (const Edge& e : r.graph.edges) {
    PairPrediction p = pairs(e);
    PMSFM_CHECK(p.n == e.first && p.m == e.second, ErrorKind::kMissingPrediction,
                "pair source returned the wrong edge");
    p.Validate();
    matches.push_back(p.matches);
    preds.push_back(std::move(p));
  }

  std::vector<CanonicalView> views;
  for (int k = 0; k < n; ++k) {
    if (r.graph.EdgesOf(k).empty()) {
      PMSFM_CHECK(images[k].own.has_value(), ErrorKind::kMissingPrediction,
                  "image " + std::to_string(k) + " has neither pairs nor its own pointmap");
      const PointMap own[] = {*images[k].own};
      views.push_back(CanonicalFromEstimates(k, own, cfg.anchor_spacing));
    } else {
      views.push_back(CanonicalizeView(r.graph, preds, k, cfg.anchor_spacing));
    }
  }
  preds.clear();

  MatrixXd weights = r.similarity;
  if (cfg.tree_mode == TreeMode::kHclustCorr) {
    weights = MatrixXd::Zero(n, n);
    for (const auto& ms : matches) {
      double w = 0;
      for (const Match& mt : ms.pairs) w += mt.confidence;
      weights(ms.edge.first, ms.edge.second) = weights(ms.edge.second, ms.edge.first) = w;
    }
  }
  r.tree = BuildKinematicTree(r.graph, weights, cfg.tree_mode);

  SceneState state = MakeState(std::move(views), r.tree, cfg.optim);
  if (cfg.random_init > 0)
    RandomizePoses(&state, cfg.random_init, cfg.seed);
  else
    r.init = InitFromPairs(r.graph, matches, &state);
  r.unregistered = r.init.unreached;
  r.optimized = Optimize(std::move(state), matches, cfg.optim);
  r.trajectory = ToTrajectory(r.optimized.state, r.unregistered);
  // A lone view defines the world frame; skip the round-off of the pivot shift.
  if (n == 1) r.trajectory[0].pose = Pose::Identity();
  for (int k = 0; k < n; ++k) r.focals.push_back(r.optimized.state.Focal(k));
  return r;
}

PlyCloud StateCloud(const SceneState& state, bool dense) {
  const auto cams = state.Cameras(Stage::kRefine);
  std::vector<Vector3d> pts;
  std::vector<double> conf;
  for (int n = 0; n < state.size(); ++n) {
    const CanonicalView& v = state.views[n];
    auto add = [&](int i, int j) {
      pts.push_back(InverseReproject(cams[n], i, j, state.Depth(n, i, j)));
      conf.push_back(v.pointmap.confidence(j * v.width() + i));
    };
    if (dense) {
      for (int j = 0; j < v.height(); ++j)
        for (int i = 0; i < v.width(); ++i) add(i, j);
    } else {
      for (int b = 0; b < v.anchors.grid_h; ++b)
        for (int a = 0; a < v.anchors.grid_w; ++a) {
          const Pixel p = v.anchors.AnchorPixel(a, b);
          add(p.i, p.j);
        }
    }
  }
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> m(pts.size(), 3);
  for (std::size_t k = 0; k < pts.size(); ++k) m.row(k) = pts[k].transpose();
  return MakeCloud(m, Eigen::Map<const VectorXd>(conf.data(), conf.size()));
}

TensorBundle StateToBundle(const SceneState& state) {
  TensorBundle b;
  b.meta["kind"] = "state";
  b.meta["cameras"] = std::to_string(state.size());
  b.meta["anchor_spacing"] =
      std::to_string(state.size() ? state.views[0].anchors.spacing : 8);
  const auto cams = state.Cameras(Stage::kRefine);
  std::vector<double> poses;
  for (const auto& c : cams) {
    for (int k = 0; k < 4; ++k) poses.push_back(c.pose.q(k));
    for (int k = 0; k < 3; ++k) poses.push_back(c.pose.t(k));
    poses.push_back(c.sigma);
    poses.push_back(c.intrinsics.focal);
  }
  b.Put("cameras", DType::kF64, {state.size(), 9}, std::move(poses));
  for (int n = 0; n < state.size(); ++n) {
    const CanonicalView& v = state.views[n];
    std::vector<double> depth, conf;
    for (int j = 0; j < v.height(); ++j)
      for (int i = 0; i < v.width(); ++i) {
        depth.push_back(state.Depth(n, i, j));
        conf.push_back(v.pointmap.confidence(j * v.width() + i));
      }
    b.Put("depth_" + std::to_string(n), DType::kF32, {v.height(), v.width()}, std::move(depth));
    b.Put("conf_" + std::to_string(n), DType::kF32, {v.height(), v.width()}, std::move(conf));
  }
  return b;
}

ExportState StateFromBundle(const TensorBundle& b) {
  PMSFM_CHECK(b.meta.contains("kind") && b.Meta("kind") == "state", ErrorKind::kCorruptBundle,
              "not a state bundle");
  ExportState s;
  s.anchor_spacing = std::stoi(b.Meta("anchor_spacing"));
  const MatrixXd cams = b.GetMatrix("cameras");
  PMSFM_CHECK(cams.rows() == 0 || cams.cols() == 9, ErrorKind::kShapeMismatch,
              "camera table must have 9 columns");
  for (Eigen::Index n = 0; n < cams.rows(); ++n) {
    const TensorArray& d = b.Get("depth_" + std::to_string(n));
    const TensorArray& c = b.Get("conf_" + std::to_string(n));
    PMSFM_CHECK(d.shape.size() == 2 && c.shape == d.shape, ErrorKind::kShapeMismatch,
                "depth and confidence grids disagree");
    CameraParams cam;
    cam.pose.q = cams.row(n).segment<4>(0).transpose();
    cam.pose.t = cams.row(n).segment<3>(4).transpose();
    cam.sigma = cams(n, 7);
    cam.intrinsics = Intrinsics::Centered(cams(n, 8), static_cast<int>(d.shape[1]),
                                          static_cast<int>(d.shape[0]));
    s.cameras.push_back(cam);
    s.depths.push_back(Eigen::Map<const VectorXd>(d.values.data(), d.values.size()));
    s.confidence.push_back(Eigen::Map<const VectorXd>(c.values.data(), c.values.size()));
  }
  return s;
}

PlyCloud ExportCloud(const ExportState& s, bool dense) {
  std::vector<Vector3d> pts;
  std::vector<double> conf;
  for (std::size_t n = 0; n < s.cameras.size(); ++n) {
    const int W = s.cameras[n].intrinsics.width, H = s.cameras[n].intrinsics.height;
    auto add = [&](int i, int j) {
      pts.push_back(InverseReproject(s.cameras[n], i, j, s.depths[n](j * W + i)));
      conf.push_back(s.confidence[n](j * W + i));
    };
    if (dense) {
      for (int j = 0; j < H; ++j)
        for (int i = 0; i < W; ++i) add(i, j);
    } else {
      const int sp = s.anchor_spacing;
      for (int v = 0; v * sp < H; ++v)
        for (int u = 0; u * sp < W; ++u)
          add(std::min(u * sp + sp / 2, W - 1), std::min(v * sp + sp / 2, H - 1));
    }
  }
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> m(pts.size(), 3);
  for (std::size_t k = 0; k < pts.size(); ++k) m.row(k) = pts[k].transpose();
  return MakeCloud(m, Eigen::Map<const VectorXd>(conf.data(), conf.size()));
}

std::vector<ImageInput> SynthImages(const SynthScene& scene) {
  std::vector<ImageInput> out;
  for (int n = 0; n < scene.size(); ++n)
    out.push_back({n, scene.TokenFeatures(n), scene.OwnPointmap(n)});
  return out;
}

PairSource SynthPairs(const SynthScene& scene, const NoiseConfig& noise) {
  return [&scene, noise](Edge e) {
    NoiseConfig relaxed = noise;
    relaxed.allow_empty = true;
    return SimulatePair(scene, e, relaxed).prediction;
  };
}

std::string FormatTrace(std::span<const TraceEntry> trace) {
  std::string out = "# stage iter lr loss skipped\n";
  for (const auto& t : trace)
    out += std::to_string(t.stage) + " " + std::to_string(t.iter) + " " + FormatDouble(t.lr) +
           " " + FormatDouble(t.loss) + " " + std::to_string(t.skipped) + "\n";
  return out;
}

std::string FormatFocals(std::span<const double> focals) {
  std::string out = "# id focal\n";
  for (std::size_t k = 0; k < focals.size(); ++k)
    out += std::to_string(k) + " " + FormatDouble(focals[k]) + "\n";
  return out;
}

}  // namespace pmsfm
