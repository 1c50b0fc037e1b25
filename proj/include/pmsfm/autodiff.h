#pragma once

// Scalar reverse-mode automatic differentiation.
//
// A Var is a value plus an index into the thread's active Tape. Constants
// (index -1) never touch the tape, so templated code evaluated with Var only
// records operations that depend on a registered variable.
//
// Besides the usual full reverse sweep, the tape supports segment
// preaccumulation: a loss that is a sum of many small terms can evaluate one
// term, fold its adjoints into the nodes recorded before the term, and rewind.
// Memory then stays proportional to the shared part of the computation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace pmsfm::ad {

class Tape;

namespace detail {
Tape*& ActiveTape();
}  // namespace detail

class Var {
 public:
  Var() = default;
  Var(double v) : value_(v) {}  // NOLINT: implicit constant promotion
  Var(double v, int index) : value_(v), index_(index) {}

  double value() const { return value_; }
  int index() const { return index_; }
  bool is_constant() const { return index_ < 0; }

  Var& operator+=(const Var& o);
  Var& operator-=(const Var& o);
  Var& operator*=(const Var& o);
  Var& operator/=(const Var& o);

 private:
  double value_ = 0.0;
  int index_ = -1;
};

class Tape {
 public:
  struct Node {
    int a;
    int b;
    double da;
    double db;
  };

  // Makes this tape the active one for the current thread while in scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(detail::ActiveTape()) {
      detail::ActiveTape() = &tape;
    }
    ~Scope() { detail::ActiveTape() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  Var Variable(double value);
  int Push(int a, double da, int b, double db);

  std::size_t size() const { return nodes_.size(); }
  void Clear();

  // Full reverse sweep from a single output; returns adjoints of every node.
  std::vector<double> Gradient(const Var& output) const;

  // Seeds the persistent adjoint of `output` with `weight`.
  void Seed(const Var& output, double weight);

  // Reverse sweep over nodes recorded since `mark`, starting from `output`
  // with `weight`. Adjoints reaching nodes before `mark` are accumulated in
  // the persistent adjoint array; the segment is then discarded.
  void AccumulateSegment(const Var& output, double weight, std::size_t mark);

  // Propagates persistent adjoints down to the leaves.
  void Propagate();

  double adjoint(int index) const { return adjoint_[index]; }
  double adjoint(const Var& v) const {
    return v.is_constant() ? 0.0 : adjoint_[v.index()];
  }

 private:
  std::vector<Node> nodes_;
  std::vector<double> adjoint_;
  std::vector<double> scratch_;
};

Tape* ActiveTape();

namespace detail {
inline Var Record(double value, const Var& a, double da) {
  if (a.is_constant()) return Var(value);
  return Var(value, ActiveTape()->Push(a.index(), da, -1, 0.0));
}
inline Var Record(double value, const Var& a, double da, const Var& b,
                  double db) {
  if (a.is_constant() && b.is_constant()) return Var(value);
  if (a.is_constant()) return Record(value, b, db);
  if (b.is_constant()) return Record(value, a, da);
  return Var(value, ActiveTape()->Push(a.index(), da, b.index(), db));
}
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  return detail::Record(a.value() + b.value(), a, 1.0, b, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  return detail::Record(a.value() - b.value(), a, 1.0, b, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  return detail::Record(a.value() * b.value(), a, b.value(), b, a.value());
}
inline Var operator/(const Var& a, const Var& b) {
  const double inv = 1.0 / b.value();
  const double q = a.value() * inv;
  return detail::Record(q, a, inv, b, -q * inv);
}
inline Var operator-(const Var& a) {
  return detail::Record(-a.value(), a, -1.0);
}
inline Var operator+(const Var& a) { return a; }

inline Var& Var::operator+=(const Var& o) { return *this = *this + o; }
inline Var& Var::operator-=(const Var& o) { return *this = *this - o; }
inline Var& Var::operator*=(const Var& o) { return *this = *this * o; }
inline Var& Var::operator/=(const Var& o) { return *this = *this / o; }

inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }
inline bool operator==(const Var& a, const Var& b) { return a.value() == b.value(); }
inline bool operator!=(const Var& a, const Var& b) { return a.value() != b.value(); }

inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.value());
  return detail::Record(s, a, 0.5 / s);
}
inline Var exp(const Var& a) {
  const double e = std::exp(a.value());
  return detail::Record(e, a, e);
}
inline Var log(const Var& a) {
  return detail::Record(std::log(a.value()), a, 1.0 / a.value());
}
inline Var pow(const Var& a, double p) {
  const double v = std::pow(a.value(), p);
  return detail::Record(v, a, p * std::pow(a.value(), p - 1.0));
}
inline Var sin(const Var& a) {
  return detail::Record(std::sin(a.value()), a, std::cos(a.value()));
}
inline Var cos(const Var& a) {
  return detail::Record(std::cos(a.value()), a, -std::sin(a.value()));
}
inline Var abs(const Var& a) {
  return detail::Record(std::abs(a.value()), a, a.value() < 0 ? -1.0 : 1.0);
}
inline bool isfinite(const Var& a) { return std::isfinite(a.value()); }

inline double ValueOf(double x) { return x; }
inline double ValueOf(const Var& x) { return x.value(); }

}  // namespace pmsfm::ad

namespace Eigen {

template <>
struct NumTraits<pmsfm::ad::Var> : NumTraits<double> {
  using Real = pmsfm::ad::Var;
  using NonInteger = pmsfm::ad::Var;
  using Nested = pmsfm::ad::Var;
  using Literal = pmsfm::ad::Var;
  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 2,
    MulCost = 2
  };
};

}  // namespace Eigen
