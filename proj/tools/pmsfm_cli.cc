// Command-line driver. Exit codes: 0 success, 2 validation failure,
// 3 numerical abort, 4 I/O or corrupt input.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "pmsfm/pipeline.h"

namespace fs = std::filesystem;
using namespace pmsfm;

namespace {

std::string PairFile(Edge e) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "pair_%04d_%04d.tb", e.first, e.second);
  return buf;
}

std::string ImageFile(ImageId id) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "image_%04d.tb", id);
  return buf;
}

std::vector<ImageInput> LoadImages(const fs::path& dir) {
  std::vector<ImageInput> images;
  for (ImageId id = 0;; ++id) {
    const fs::path p = dir / "images" / ImageFile(id);
    if (!fs::exists(p)) break;
    images.push_back(ImageFromBundle(ReadBundle(p)));
    PMSFM_CHECK(images.back().id == id, ErrorKind::kCorruptBundle,
                p.string() + " carries the wrong image id");
  }
  PMSFM_CHECK(!images.empty(), ErrorKind::kIo, "no image bundles under " + dir.string());
  return images;
}

MatrixXd ReadMatrix(const fs::path& path) {
  std::istringstream is(ReadFile(path));
  std::vector<std::vector<double>> rows;
  for (std::string line; std::getline(is, line);) {
    std::istringstream ls(line);
    std::vector<double> row;
    for (std::string w; ls >> w;) row.push_back(ParseDouble(w));
    if (!row.empty()) rows.push_back(row);
  }
  MatrixXd m(rows.size(), rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    PMSFM_CHECK(rows[r].size() == rows.size(), ErrorKind::kParse,
                "similarity matrix must be square");
    for (std::size_t c = 0; c < rows.size(); ++c) m(r, c) = rows[r][c];
  }
  return m;
}

std::string FormatMatrix(const MatrixXd& m) {
  std::string out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      out += (c ? " " : "") + FormatDouble(m(r, c));
    out += "\n";
  }
  return out;
}

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
  std::string config;
};

RunConfig LoadConfig(const Globals& g) {
  RunConfig cfg;
  if (!g.config.empty()) ApplyConfigText(ReadFile(g.config), &cfg);
  if (g.seed_set) cfg.pipeline.seed = cfg.pipeline.optim.seed = g.seed;
  if (g.deterministic) cfg.pipeline.deterministic = true;
  return cfg;
}

int CmdSynth(const Globals& g, const fs::path& out, int views, const std::string& surface) {
  RunConfig cfg = LoadConfig(g);
  if (views > 0) cfg.synth.n_views = views;
  if (!surface.empty()) cfg.synth.kind = ParseSurfaceKind(surface);
  cfg.pipeline.Validate();
  cfg.synth.noise.Validate();

  const SynthScene scene =
      GenerateScene(cfg.synth.kind, cfg.synth.n_views, cfg.pipeline.seed, cfg.synth.scene);
  const auto images = SynthImages(scene);
  for (const auto& im : images) WriteBundle(out / "images" / ImageFile(im.id), ImageToBundle(im));

  SceneGraph graph{1, {0}, {}, 0};
  if (scene.size() > 1) graph = PlanGraph(RetrievalSimilarity(images, cfg.pipeline), cfg.pipeline);
  const PairSource pairs = SynthPairs(scene, cfg.synth.noise);
  fs::create_directories(out / "pairs");
  for (const Edge& e : graph.edges) WriteBundle(out / "pairs" / PairFile(e), PairToBundle(pairs(e)));

  WriteFile(out / "graph.txt", FormatGraph(graph));
  WriteTrajectory(out / "gt_trajectory.txt", scene.GroundTruth());
  WriteFile(out / "config.txt", FormatConfig(cfg));
  std::cout << "views=" << scene.size() << " pairs=" << graph.edges.size() << "\n";
  return 0;
}

int CmdGraph(const Globals& g, const fs::path& in, const std::string& out) {
  RunConfig cfg = LoadConfig(g);
  cfg.pipeline.Validate();
  const auto images = LoadImages(in);
  RetrievalModel model;
  const MatrixXd S = RetrievalSimilarity(images, cfg.pipeline, &model);
  const SceneGraph graph = images.size() > 1 ? PlanGraph(S, cfg.pipeline) : SceneGraph{1, {0}, {}, 0};
  const std::string text = FormatGraph(graph);
  if (out.empty()) {
    std::cout << text;
  } else {
    WriteFile(out, text);
    WriteFile(fs::path(out).replace_extension(".similarity.txt"), FormatMatrix(S));
    if (images.size() > 1)
      WriteBundle(fs::path(out).replace_extension(".retrieval.tb"), RetrievalModelToBundle(model));
  }
  return 0;
}

int CmdSolve(const Globals& g, const fs::path& in, const fs::path& out,
             const std::string& graph_file, const std::string& similarity_file,
             bool freeze_depth, bool dense, bool ascii) {
  RunConfig cfg = LoadConfig(g);
  if (freeze_depth) cfg.pipeline.optim.freeze_depth = true;
  cfg.pipeline.Validate();

  const auto images = LoadImages(in);
  std::optional<SceneGraph> graph;
  if (!graph_file.empty()) graph = ParseGraph(ReadFile(graph_file)).graph;
  std::optional<MatrixXd> similarity;
  if (!similarity_file.empty()) similarity = ReadMatrix(similarity_file);

  const PairSource pairs = [&in](Edge e) {
    const fs::path p = in / "pairs" / PairFile(e);
    if (!fs::exists(p))
      throw Error(ErrorKind::kMissingPrediction, "no pair bundle " + p.string());
    return PairFromBundle(ReadBundle(p));
  };
  const PipelineResult r = RunPipeline(images, pairs, cfg.pipeline, similarity, graph);

  WriteTrajectory(out / "trajectory.txt", r.trajectory);
  WriteFile(out / "focals.txt", FormatFocals(r.focals));
  WriteFile(out / "trace.txt", FormatTrace(r.optimized.trace));
  WriteFile(out / "graph.txt", FormatGraph(r.graph, &r.tree));
  WriteBundle(out / "state.tb", StateToBundle(r.optimized.state));
  WriteFile(out / "cloud.ply", FormatPly(StateCloud(r.optimized.state, dense), !ascii));
  std::cout << "registered=" << r.trajectory.size() - r.unregistered.size() << "/"
            << r.trajectory.size() << "\n";
  return 0;
}

int CmdEval(const std::string& est_file, const std::string& gt_file,
            const std::vector<double>& thresholds, const std::string& out) {
  const Trajectory est = ReadTrajectory(est_file);
  const Trajectory gt = ReadTrajectory(gt_file);
  std::ostringstream os;
  std::string ate = "nan";
  try {
    ate = FormatDouble(Ate(est, gt));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kDegenerateConfiguration) throw;
  }
  os << "ate=" << ate << "\n";
  for (double tau : thresholds) {
    const PairAccuracy acc = RraRta(est, gt, tau);
    os << "rra@" << FormatDouble(tau) << "=" << FormatDouble(acc.rra) << "\n";
    os << "rta@" << FormatDouble(tau) << "=" << FormatDouble(acc.rta) << "\n";
  }
  os << "maa@30=" << FormatDouble(Maa(est, gt, 30)) << "\n";
  // Registration over the ground-truth id set.
  Trajectory over_gt;
  for (const auto& g : gt) {
    TrajectoryEntry e{g.id, std::nullopt};
    for (const auto& x : est)
      if (x.id == g.id) e.pose = x.pose;
    over_gt.push_back(e);
  }
  os << "reg=" << FormatDouble(RegistrationRate(over_gt)) << "\n";
  if (out.empty())
    std::cout << os.str();
  else
    WriteFile(out, os.str());
  return 0;
}

int CmdExport(const std::string& state_file, const std::string& out, bool dense, bool ascii) {
  const ExportState s = StateFromBundle(ReadBundle(state_file));
  WriteFile(out, FormatPly(ExportCloud(s, dense), !ascii));
  return 0;
}

int ExitCode(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNonFiniteLoss: return 3;
    case ErrorKind::kIo:
    case ErrorKind::kCorruptBundle: return 4;
    default: return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pointmap-based structure-from-motion backend"};
  app.require_subcommand(1);
  Globals g;
  app.add_option_function<std::uint64_t>(
         "--seed", [&g](std::uint64_t s) { g.seed = s; g.seed_set = true; },
         "Random seed")
      ->trigger_on_parse();
  app.add_flag("--deterministic", g.deterministic, "Bit-reproducible execution");
  app.add_option("--config", g.config, "key=value configuration file");

  std::function<int()> run;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene and pair bundles");
  std::string synth_out, surface;
  int views = 0;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--views", views, "Number of views");
  synth->add_option("--surface", surface, "plane, sphere or blobs");
  synth->callback([&] { run = [&] { return CmdSynth(g, synth_out, views, surface); }; });

  auto* graph = app.add_subcommand("graph", "Build the scene graph from image bundles");
  std::string graph_in, graph_out;
  graph->add_option("--in", graph_in, "Input directory")->required();
  graph->add_option("--out", graph_out, "Graph file (stdout if omitted)");
  graph->callback([&] { run = [&] { return CmdGraph(g, graph_in, graph_out); }; });

  auto* solve = app.add_subcommand("solve", "Run the reconstruction pipeline");
  std::string solve_in, solve_out, graph_file, similarity_file;
  bool freeze_depth = false, dense = false, ascii = false;
  solve->add_option("--in", solve_in, "Input directory")->required();
  solve->add_option("--out", solve_out, "Output directory")->required();
  solve->add_option("--graph", graph_file, "Use this graph instead of retrieval");
  solve->add_option("--similarity", similarity_file, "Use this similarity matrix");
  solve->add_flag("--freeze-depth", freeze_depth, "Keep canonical depths fixed");
  solve->add_flag("--dense", dense, "Write every pixel to the point cloud");
  solve->add_flag("--ascii", ascii, "ASCII point cloud");
  solve->callback([&] {
    run = [&] {
      return CmdSolve(g, solve_in, solve_out, graph_file, similarity_file, freeze_depth, dense,
                      ascii);
    };
  });

  auto* eval = app.add_subcommand("eval", "Compare a trajectory with ground truth");
  std::string est_file, gt_file, eval_out;
  std::vector<double> thresholds{5, 15, 30};
  eval->add_option("--est", est_file, "Estimated trajectory")->required();
  eval->add_option("--gt", gt_file, "Ground-truth trajectory")->required();
  eval->add_option("--thresholds", thresholds, "Angular thresholds in degrees")->delimiter(',');
  eval->add_option("--out", eval_out, "Report file (stdout if omitted)");
  eval->callback([&] { run = [&] { return CmdEval(est_file, gt_file, thresholds, eval_out); }; });

  auto* exp = app.add_subcommand("export-ply", "Export a solved state as a point cloud");
  std::string state_file, ply_out;
  bool exp_dense = false, exp_ascii = false;
  exp->add_option("--state", state_file, "State bundle")->required();
  exp->add_option("--out", ply_out, "PLY file")->required();
  exp->add_flag("--dense", exp_dense, "Every pixel instead of anchor pixels");
  exp->add_flag("--ascii", exp_ascii, "ASCII instead of binary little-endian");
  exp->callback([&] { run = [&] { return CmdExport(state_file, ply_out, exp_dense, exp_ascii); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ExitCode(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
