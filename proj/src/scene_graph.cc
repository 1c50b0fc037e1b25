#include "pmsfm/scene_graph.h"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <set>

namespace pmsfm {

namespace {

Edge MakeEdge(ImageId a, ImageId b) { return a < b ? Edge{a, b} : Edge{b, a}; }

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int Find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  bool Unite(int a, int b) {
    a = Find(a);
    b = Find(b);
    if (a == b) return false;
    parent[std::max(a, b)] = std::min(a, b);
    return true;
  }
};

void Finalize(SceneGraph* g, std::set<Edge>& edges) {
  g->edges.assign(edges.begin(), edges.end());
}

}  // namespace

bool SceneGraph::Contains(ImageId a, ImageId b) const {
  return std::binary_search(edges.begin(), edges.end(), MakeEdge(a, b));
}

bool SceneGraph::IsConnected() const {
  if (n <= 1) return true;
  UnionFind uf(n);
  int components = n;
  for (const auto& [a, b] : edges) components -= uf.Unite(a, b);
  return components == 1;
}

std::vector<Edge> SceneGraph::EdgesOf(ImageId id) const {
  std::vector<Edge> out;
  for (const auto& e : edges)
    if (e.first == id || e.second == id) out.push_back(e);
  return out;
}

const char* GraphModeName(GraphMode mode) {
  switch (mode) {
    case GraphMode::kRetrieval: return "retrieval";
    case GraphMode::kComplete: return "complete";
    case GraphMode::kLocalWindow: return "local-window";
    case GraphMode::kRandom: return "random";
  }
  return "retrieval";
}

GraphMode ParseGraphMode(const std::string& name) {
  if (name == "retrieval") return GraphMode::kRetrieval;
  if (name == "complete") return GraphMode::kComplete;
  if (name == "local-window") return GraphMode::kLocalWindow;
  if (name == "random") return GraphMode::kRandom;
  throw Error(ErrorKind::kInvalidArgument, "unknown graph mode '" + name + "'");
}

std::vector<ImageId> SelectKeyframesFps(const MatrixXd& S, int count) {
  const int n = static_cast<int>(S.rows());
  PMSFM_CHECK(S.cols() == n, ErrorKind::kShapeMismatch, "S must be square");
  PMSFM_CHECK(count >= 1 && count <= n, ErrorKind::kBadCount,
              "keyframe count outside [1, n]");
  std::vector<ImageId> picked;
  const VectorXd rowsum = S.rowwise().sum();
  ImageId seed = 0;
  for (int i = 1; i < n; ++i)
    if (rowsum(i) < rowsum(seed)) seed = i;
  picked.push_back(seed);
  std::vector<double> mindist(n, std::numeric_limits<double>::infinity());
  std::vector<char> used(n, 0);
  used[seed] = 1;
  while (static_cast<int>(picked.size()) < count) {
    const ImageId last = picked.back();
    ImageId best = -1;
    for (int i = 0; i < n; ++i) {
      mindist[i] = std::min(mindist[i], 1.0 - S(i, last));
      if (used[i]) continue;
      if (best < 0 || mindist[i] > mindist[best]) best = i;
    }
    used[best] = 1;
    picked.push_back(best);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

namespace {

// Adds the highest-similarity cross-component pair until connected.
int RepairBySimilarity(const MatrixXd& S, std::set<Edge>* edges, int n) {
  int added = 0;
  while (true) {
    UnionFind uf(n);
    int components = n;
    for (const auto& [a, b] : *edges) components -= uf.Unite(a, b);
    if (components <= 1) return added;
    Edge best{-1, -1};
    double best_s = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (uf.Find(i) != uf.Find(j) && S(i, j) > best_s) {
          best_s = S(i, j);
          best = {i, j};
        }
    edges->insert(best);
    ++added;
  }
}

}  // namespace

SceneGraph BuildGraph(const MatrixXd& S, const GraphOptions& opts) {
  const int n = static_cast<int>(S.rows());
  PMSFM_CHECK(n >= 1 && S.cols() == n, ErrorKind::kBadCount, "bad similarity matrix");
  PMSFM_CHECK(opts.knn >= 0, ErrorKind::kBadCount, "k must be non-negative");
  SceneGraph g;
  g.n = n;
  const int na = std::min(opts.num_keyframes, n);
  PMSFM_CHECK(na >= 1, ErrorKind::kBadCount, "need at least one keyframe");
  g.keyframes = SelectKeyframesFps(S, na);
  std::vector<char> is_key(n, 0);
  for (ImageId k : g.keyframes) is_key[k] = 1;

  std::set<Edge> edges;
  for (std::size_t a = 0; a < g.keyframes.size(); ++a)
    for (std::size_t b = a + 1; b < g.keyframes.size(); ++b)
      edges.insert(MakeEdge(g.keyframes[a], g.keyframes[b]));

  for (int i = 0; i < n; ++i) {
    if (is_key[i]) continue;
    ImageId closest = g.keyframes[0];
    for (ImageId k : g.keyframes)
      if (S(i, k) > S(i, closest) || (S(i, k) == S(i, closest) && k < closest))
        closest = k;
    edges.insert(MakeEdge(i, closest));

    std::vector<ImageId> cand;
    for (int j = 0; j < n; ++j)
      if (j != i && !(opts.knn_exclude_keyframes && is_key[j])) cand.push_back(j);
    std::stable_sort(cand.begin(), cand.end(),
                     [&](ImageId a, ImageId b) { return S(i, a) > S(i, b); });
    for (int c = 0; c < std::min<int>(opts.knn, static_cast<int>(cand.size())); ++c)
      edges.insert(MakeEdge(i, cand[c]));
  }
  g.repair_edges = RepairBySimilarity(S, &edges, n);
  Finalize(&g, edges);
  return g;
}

SceneGraph BuildCompleteGraph(int n) {
  PMSFM_CHECK(n >= 1, ErrorKind::kBadCount, "empty collection");
  SceneGraph g;
  g.n = n;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) g.edges.emplace_back(i, j);
  return g;
}

SceneGraph BuildLocalWindowGraph(int n, int window) {
  PMSFM_CHECK(n >= 1 && window >= 1, ErrorKind::kBadCount, "bad window graph");
  SceneGraph g;
  g.n = n;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j <= std::min(n - 1, i + window); ++j) g.edges.emplace_back(i, j);
  return g;
}

SceneGraph BuildRandomGraph(int n, int edge_count, std::uint64_t seed) {
  PMSFM_CHECK(n >= 1 && edge_count >= 0, ErrorKind::kBadCount, "bad random graph");
  SceneGraph g;
  g.n = n;
  std::mt19937_64 rng(seed);
  std::set<Edge> edges;
  const long long max_edges = static_cast<long long>(n) * (n - 1) / 2;
  std::uniform_int_distribution<int> pick(0, n - 1);
  while (static_cast<long long>(edges.size()) < std::min<long long>(edge_count, max_edges)) {
    const int a = pick(rng), b = pick(rng);
    if (a != b) edges.insert(MakeEdge(a, b));
  }
  while (true) {
    UnionFind uf(n);
    int components = n;
    for (const auto& [a, b] : edges) components -= uf.Unite(a, b);
    if (components <= 1) break;
    const int a = pick(rng), b = pick(rng);
    if (uf.Find(a) != uf.Find(b)) {
      edges.insert(MakeEdge(a, b));
      ++g.repair_edges;
    }
  }
  Finalize(&g, edges);
  return g;
}

namespace {

KinematicTree EmptyTree(int n, TreeMode mode) {
  KinematicTree t;
  t.mode = mode;
  t.links.resize(n);
  return t;
}

// Orients an undirected tree away from `root`.
void Orient(KinematicTree* t, const std::vector<Edge>& tree_edges, ImageId root) {
  const int n = t->size();
  std::vector<std::vector<ImageId>> adj(n);
  for (const auto& [a, b] : tree_edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  t->root = root;
  std::vector<char> seen(n, 0);
  std::vector<ImageId> queue{root};
  seen[root] = 1;
  for (std::size_t k = 0; k < queue.size(); ++k)
    for (ImageId c : adj[queue[k]])
      if (!seen[c]) {
        seen[c] = 1;
        t->links[c].parent = queue[k];
        queue.push_back(c);
      }
  PMSFM_CHECK(static_cast<int>(queue.size()) == n, ErrorKind::kDisconnected,
              "spanning tree does not cover every camera");
}

}  // namespace

KinematicTree BuildKinematicTree(const SceneGraph& graph, const MatrixXd& weights,
                                 TreeMode mode) {
  const int n = graph.n;
  PMSFM_CHECK(weights.rows() == n && weights.cols() == n, ErrorKind::kShapeMismatch,
              "weight matrix size mismatch");
  PMSFM_CHECK(graph.IsConnected(), ErrorKind::kDisconnected, "scene graph disconnected");
  KinematicTree tree = EmptyTree(n, mode);
  const ImageId first_key = graph.keyframes.empty() ? 0 : graph.keyframes[0];
  tree.root = first_key;

  switch (mode) {
    case TreeMode::kNone:
      return tree;
    case TreeMode::kStar:
      for (int i = 0; i < n; ++i)
        if (i != first_key) tree.links[i].parent = first_key;
      return tree;
    case TreeMode::kMst: {
      std::vector<Edge> order = graph.edges;
      std::stable_sort(order.begin(), order.end(), [&](const Edge& a, const Edge& b) {
        return weights(a.first, a.second) > weights(b.first, b.second);
      });
      UnionFind uf(n);
      std::vector<Edge> chosen;
      for (const auto& e : order)
        if (uf.Unite(e.first, e.second)) chosen.push_back(e);
      Orient(&tree, chosen, first_key);
      return tree;
    }
    case TreeMode::kHclustSim:
    case TreeMode::kHclustCorr:
      break;
  }

  // Agglomerative merging on average inter-cluster weight (total weight over
  // |A| * |B|). Ties go to the smaller merged cluster, then to the lowest ids,
  // which keeps uniform weights balanced. Clusters are indexed by their
  // representative.
  MatrixXd link = MatrixXd::Zero(n, n);
  Eigen::MatrixXi adjacent = Eigen::MatrixXi::Zero(n, n);
  for (const auto& [a, b] : graph.edges) {
    link(a, b) = link(b, a) = weights(a, b);
    adjacent(a, b) = adjacent(b, a) = 1;
  }
  std::vector<char> alive(n, 1);
  std::vector<int> members(n, 1);
  ImageId last = 0;
  for (int merges = 0; merges < n - 1; ++merges) {
    int best_a = -1, best_b = -1;
    double best_w = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < n; ++a) {
      if (!alive[a]) continue;
      for (int b = a + 1; b < n; ++b) {
        if (!alive[b] || !adjacent(a, b)) continue;
        const double w = link(a, b) / (static_cast<double>(members[a]) * members[b]);
        const bool better =
            w > best_w ||
            (w == best_w && members[a] + members[b] < members[best_a] + members[best_b]);
        if (better) {
          best_w = w;
          best_a = a;
          best_b = b;
        }
      }
    }
    PMSFM_CHECK(best_a >= 0, ErrorKind::kDisconnected, "clusters cannot be merged");
    // best_a < best_b: A keeps the lower representative.
    tree.links[best_b].parent = best_a;
    alive[best_b] = 0;
    members[best_a] += members[best_b];
    link.row(best_a) += link.row(best_b);
    link.col(best_a) += link.col(best_b);
    link(best_a, best_a) = 0;
    for (int c = 0; c < n; ++c) {
      const int adj = adjacent(best_a, c) | adjacent(best_b, c);
      adjacent(best_a, c) = adjacent(c, best_a) = adj;
    }
    adjacent(best_a, best_a) = 0;
    last = best_a;
  }
  tree.root = n == 1 ? 0 : last;
  return tree;
}

}  // namespace pmsfm
