#include "pmsfm/autodiff.h"

#include <cassert>

namespace pmsfm::ad {

namespace detail {
Tape*& ActiveTape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

Tape* ActiveTape() {
  Tape* tape = detail::ActiveTape();
  assert(tape != nullptr && "no active tape; use Tape::Scope");
  return tape;
}

Var Tape::Variable(double value) {
  return Var(value, Push(-1, 0.0, -1, 0.0));
}

int Tape::Push(int a, double da, int b, double db) {
  nodes_.push_back({a, b, da, db});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::Clear() {
  nodes_.clear();
  adjoint_.clear();
}

std::vector<double> Tape::Gradient(const Var& output) const {
  std::vector<double> adj(nodes_.size(), 0.0);
  if (output.is_constant()) return adj;
  adj[output.index()] = 1.0;
  for (int k = output.index(); k >= 0; --k) {
    const double g = adj[k];
    if (g == 0.0) continue;
    const Node& n = nodes_[k];
    if (n.a >= 0) adj[n.a] += g * n.da;
    if (n.b >= 0) adj[n.b] += g * n.db;
  }
  return adj;
}

void Tape::Seed(const Var& output, double weight) {
  if (output.is_constant()) return;
  if (adjoint_.size() < nodes_.size()) adjoint_.resize(nodes_.size(), 0.0);
  adjoint_[output.index()] += weight;
}

void Tape::AccumulateSegment(const Var& output, double weight,
                             std::size_t mark) {
  if (adjoint_.size() < mark) adjoint_.resize(mark, 0.0);
  const std::size_t end = nodes_.size();
  if (!output.is_constant() && static_cast<std::size_t>(output.index()) < mark) {
    adjoint_[output.index()] += weight;
  } else if (!output.is_constant()) {
    scratch_.assign(end - mark, 0.0);
    scratch_[output.index() - mark] = weight;
    for (std::size_t k = end; k-- > mark;) {
      const double g = scratch_[k - mark];
      if (g == 0.0) continue;
      const Node& n = nodes_[k];
      if (n.a >= 0) {
        if (static_cast<std::size_t>(n.a) >= mark)
          scratch_[n.a - mark] += g * n.da;
        else
          adjoint_[n.a] += g * n.da;
      }
      if (n.b >= 0) {
        if (static_cast<std::size_t>(n.b) >= mark)
          scratch_[n.b - mark] += g * n.db;
        else
          adjoint_[n.b] += g * n.db;
      }
    }
  }
  nodes_.resize(mark);
}

void Tape::Propagate() {
  if (adjoint_.size() < nodes_.size()) adjoint_.resize(nodes_.size(), 0.0);
  for (std::size_t k = nodes_.size(); k-- > 0;) {
    const double g = adjoint_[k];
    if (g == 0.0) continue;
    const Node& n = nodes_[k];
    if (n.a >= 0) adjoint_[n.a] += g * n.da;
    if (n.b >= 0) adjoint_[n.b] += g * n.db;
  }
}

}  // namespace pmsfm::ad
