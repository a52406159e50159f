#pragma once

// Reverse-mode automatic differentiation on a scalar tape.
//
// Every scalar operation appends one node holding its value and the local
// partials w.r.t. its parents. Heavy vector kernels (a whole fiber span, an
// MLP evaluation) can instead register a fused multi-output node with a
// hand-written vector-Jacobian product, which keeps the tape small.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "raman/units.hpp"

namespace raman::ad {

enum class Op : std::uint8_t {
  input,
  constant,
  add,
  sub,
  mul,
  div,
  neg,
  exp,
  log,
  sqrt,
  relu,
  max,
  min,
  sum,
  fused,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sqrt: return "sqrt";
    case Op::relu: return "relu";
    case Op::max: return "max";
    case Op::min: return "min";
    case Op::sum: return "sum";
    case Op::fused: return "fused";
  }
  return "?";
}

class Tape;

/// Handle to a tape node. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t index = 0;
  double value = 0.0;
};

class Tape {
 public:
  /// Receives the full adjoint vector; reads the adjoints of its own outputs
  /// and accumulates into the adjoints of its parents.
  using Backward = std::function<void(std::span<double> adjoint)>;

  Tape() { edge_begin_.push_back(0); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(double v) { return push(v, Op::input, {}); }
  Var constant(double v) { return push(v, Op::constant, {}); }

  std::vector<Var> inputs(std::span<const double> v) {
    std::vector<Var> out;
    out.reserve(v.size());
    for (double x : v) out.push_back(input(x));
    return out;
  }

  Var push(double value, Op op, std::initializer_list<std::pair<std::uint32_t, double>> edges) {
    check_finite(value, op);
    for (const auto& [p, d] : edges) {
      edge_parent_.push_back(p);
      edge_partial_.push_back(d);
    }
    return append(value, op);
  }

  Var push(double value, Op op, std::span<const std::uint32_t> parents, std::span<const double> partials) {
    check_finite(value, op);
    edge_parent_.insert(edge_parent_.end(), parents.begin(), parents.end());
    edge_partial_.insert(edge_partial_.end(), partials.begin(), partials.end());
    return append(value, op);
  }

  /// Appends a block of outputs computed by an external kernel. The outputs
  /// occupy consecutive indices; `backward` runs once during the reverse
  /// sweep, after every consumer of the block has been processed.
  std::vector<Var> push_fused(std::span<const double> values, Backward backward) {
    std::vector<Var> out;
    out.reserve(values.size());
    const auto first = static_cast<std::uint32_t>(values_.size());
    for (double v : values) {
      check_finite(v, Op::fused);
      out.push_back(append(v, Op::fused));
    }
    if (!values.empty()) fused_.push_back({first, static_cast<std::uint32_t>(values.size()), std::move(backward)});
    return out;
  }

  std::size_t size() const { return values_.size(); }
  double value(std::uint32_t i) const { return values_[i]; }
  Op op(std::uint32_t i) const { return ops_[i]; }

  /// d(output)/d(node) for every node on the tape.
  std::vector<double> adjoints(Var output) const {
    check_owner(output);
    std::vector<double> adj(values_.size(), 0.0);
    adj[output.index] = 1.0;
    auto f = static_cast<std::ptrdiff_t>(fused_.size()) - 1;
    for (std::size_t k = values_.size(); k-- > 0;) {
      const auto i = static_cast<std::uint32_t>(k);
      if (f >= 0 && fused_[f].first + fused_[f].count - 1 == i) {
        const auto& blk = fused_[f];
        const bool active = std::any_of(adj.begin() + blk.first, adj.begin() + blk.first + blk.count,
                                        [](double a) { return a != 0.0; });
        if (active) blk.backward(adj);
        --f;
        continue;
      }
      const double a = adj[i];
      if (a == 0.0) continue;
      for (std::uint32_t e = edge_begin_[i]; e < edge_begin_[i + 1]; ++e) adj[edge_parent_[e]] += a * edge_partial_[e];
    }
    return adj;
  }

  std::vector<double> gradient(Var output, std::span<const Var> wrt) const {
    const auto adj = adjoints(output);
    std::vector<double> g;
    g.reserve(wrt.size());
    for (const auto& v : wrt) g.push_back(adj[v.index]);
    return g;
  }

 private:
  struct FusedBlock {
    std::uint32_t first;
    std::uint32_t count;
    Backward backward;
  };

  void check_finite(double v, Op op) const {
    if (!std::isfinite(v))
      throw Error("non-finite value at tape node " + std::to_string(values_.size()) + " (" + op_name(op) + ")");
  }

  void check_owner(const Var& v) const {
    if (v.tape != this || v.index >= values_.size()) throw Error("variable does not belong to this tape");
  }

  Var append(double value, Op op) {
    values_.push_back(value);
    ops_.push_back(op);
    edge_begin_.push_back(static_cast<std::uint32_t>(edge_parent_.size()));
    return Var{this, static_cast<std::uint32_t>(values_.size() - 1), value};
  }

  std::vector<double> values_;
  std::vector<Op> ops_;
  std::vector<std::uint32_t> edge_begin_;
  std::vector<std::uint32_t> edge_parent_;
  std::vector<double> edge_partial_;
  std::vector<FusedBlock> fused_;
};

namespace detail {
inline Tape* common(const Var& a, const Var& b) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error("mixing variables from different tapes");
  return a.tape;
}
}  // namespace detail

inline Var operator+(Var a, Var b) {
  return detail::common(a, b)->push(a.value + b.value, Op::add, {{a.index, 1.0}, {b.index, 1.0}});
}
inline Var operator-(Var a, Var b) {
  return detail::common(a, b)->push(a.value - b.value, Op::sub, {{a.index, 1.0}, {b.index, -1.0}});
}
inline Var operator*(Var a, Var b) {
  return detail::common(a, b)->push(a.value * b.value, Op::mul, {{a.index, b.value}, {b.index, a.value}});
}
inline Var operator/(Var a, Var b) {
  const double q = a.value / b.value;
  return detail::common(a, b)->push(q, Op::div, {{a.index, 1.0 / b.value}, {b.index, -q / b.value}});
}
inline Var operator-(Var a) { return a.tape->push(-a.value, Op::neg, {{a.index, -1.0}}); }

inline Var operator+(Var a, double b) { return a.tape->push(a.value + b, Op::add, {{a.index, 1.0}}); }
inline Var operator+(double a, Var b) { return b + a; }
inline Var operator-(Var a, double b) { return a.tape->push(a.value - b, Op::sub, {{a.index, 1.0}}); }
inline Var operator-(double a, Var b) { return b.tape->push(a - b.value, Op::sub, {{b.index, -1.0}}); }
inline Var operator*(Var a, double b) { return a.tape->push(a.value * b, Op::mul, {{a.index, b}}); }
inline Var operator*(double a, Var b) { return b * a; }
inline Var operator/(Var a, double b) { return a.tape->push(a.value / b, Op::div, {{a.index, 1.0 / b}}); }
inline Var operator/(double a, Var b) {
  const double q = a / b.value;
  return b.tape->push(q, Op::div, {{b.index, -q / b.value}});
}

inline Var& operator+=(Var& a, Var b) { return a = a + b; }
inline Var& operator-=(Var& a, Var b) { return a = a - b; }
inline Var& operator*=(Var& a, Var b) { return a = a * b; }
inline Var& operator+=(Var& a, double b) { return a = a + b; }
inline Var& operator-=(Var& a, double b) { return a = a - b; }
inline Var& operator*=(Var& a, double b) { return a = a * b; }

inline Var exp(Var a) {
  const double e = std::exp(a.value);
  return a.tape->push(e, Op::exp, {{a.index, e}});
}
inline Var log(Var a) { return a.tape->push(std::log(a.value), Op::log, {{a.index, 1.0 / a.value}}); }
inline Var sqrt(Var a) {
  const double s = std::sqrt(a.value);
  return a.tape->push(s, Op::sqrt, {{a.index, 0.5 / s}});
}
/// Subgradient 0 at the kink.
inline Var relu(Var a) {
  return a.tape->push(a.value > 0.0 ? a.value : 0.0, Op::relu, {{a.index, a.value > 0.0 ? 1.0 : 0.0}});
}
inline double relu(double a) { return a > 0.0 ? a : 0.0; }

inline Var max(Var a, Var b) {
  const bool first = a.value >= b.value;
  return detail::common(a, b)->push(first ? a.value : b.value, Op::max, {{first ? a.index : b.index, 1.0}});
}
inline Var min(Var a, Var b) {
  const bool first = a.value <= b.value;
  return detail::common(a, b)->push(first ? a.value : b.value, Op::min, {{first ? a.index : b.index, 1.0}});
}

inline Var sum(std::span<const Var> xs) {
  if (xs.empty()) throw Error("sum of an empty range");
  std::vector<std::uint32_t> parents;
  std::vector<double> ones(xs.size(), 1.0);
  parents.reserve(xs.size());
  double s = 0.0;
  for (const auto& x : xs) {
    if (x.tape != xs.front().tape) throw Error("mixing variables from different tapes");
    parents.push_back(x.index);
    s += x.value;
  }
  return xs.front().tape->push(s, Op::sum, parents, ones);
}

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value; }

struct GradResult {
  double value = 0.0;
  std::vector<double> gradient;
};

/// Records f on a fresh tape at x and returns f(x) and its exact gradient.
template <class F>
GradResult grad(F&& f, std::span<const double> x) {
  Tape tape;
  const auto vars = tape.inputs(x);
  const Var y = f(std::span<const Var>(vars));
  return {y.value, tape.gradient(y, vars)};
}

template <class F>
double value(F&& f, std::span<const double> x) {
  Tape tape;
  const auto vars = tape.inputs(x);
  return f(std::span<const Var>(vars)).value;
}

/// Max over coordinates of |AD - central difference| / max(1, |AD|).
template <class F>
double gradient_check(F&& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw Error("gradient_check: step must be > 0");
  const auto g = grad(f, x);
  std::vector<double> xp(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const double x0 = xp[i];
    xp[i] = x0 + h;
    const double fp = value(f, xp);
    xp[i] = x0 - h;
    const double fm = value(f, xp);
    xp[i] = x0;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(g.gradient[i] - fd) / std::max(1.0, std::abs(g.gradient[i])));
  }
  return worst;
}

}  // namespace raman::ad
