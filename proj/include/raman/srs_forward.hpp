#pragma once

// Co-propagating SRS solvers.
//
// propagate_span: the log-power recursion
//   lnP_n <- lnP_n - a_n dz + sum_m K_nm Leff_m(dz) P_m,
//   Leff_m(dz) = (1 - exp(-b_m dz)) / b_m,
// which is differentiable in powers and (through a smooth g) in
// frequencies. With StepRule::literal, b_m is the loss a_m of the
// contributing carrier. With StepRule::net_rate (default), b_m is its net
// decay rate a_m - sum_k K_mk P_k at the start of the step, which integrates
// an exponentially growing or decaying P_m exactly across the step and makes
// the recursion second order in dz. record_span puts a whole span on a tape
// as one fused node with a hand-written adjoint.
//
// propagate_span_oracle: fixed-step RK4 on the linear-power ODE
//   dP_n/dz = -a_n P_n + sum_m K_nm P_n P_m,
// used to validate the recursion above.
//
// Carriers are processed in a canonical (frequency, power, loss) order so
// results do not depend on the order the caller lists them in.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "raman/autodiff.hpp"
#include "raman/raman_gain.hpp"
#include "raman/units.hpp"

namespace raman {

// K is in 1/(W km) and powers in mW.
inline constexpr double kWattPerMilliwatt = 1e-3;

enum class StepRule { literal, net_rate };

NLOHMANN_JSON_SERIALIZE_ENUM(StepRule, {{StepRule::literal, "literal"}, {StepRule::net_rate, "net_rate"}})

struct ForwardSolveConfig {
  double dz_km = 0.1;
  StepRule step_rule = StepRule::net_rate;
  bool record_profile = false;
  std::shared_ptr<const GainInterpolator> interpolator;
  bool plain_antisymmetric = false;
};

struct OracleConfig {
  double dz_km = 1e-3;
  // Piecewise-linear table interpolation unless told otherwise.
  std::shared_ptr<const GainInterpolator> interpolator;
  bool plain_antisymmetric = false;
  // Store every `record_stride`-th position in the profile; 0 = no profile.
  std::size_t record_stride = 0;
};

struct ForwardResult {
  std::vector<double> output_dbm;
  std::optional<PowerProfile> profile;
};

/// (1 - exp(-b dz)) / b; b may be negative (net growth).
inline double effective_length(double b, double dz) {
  const double x = b * dz;
  if (std::abs(x) < 1e-5) return dz * (1.0 - x / 2.0 + x * x / 6.0);
  return -std::expm1(-x) / b;
}

/// d effective_length / d b.
inline double effective_length_slope(double b, double dz) {
  const double x = b * dz;
  if (std::abs(x) < 1e-5) return dz * dz * (-0.5 + x / 3.0 - x * x / 8.0);
  return (dz * std::exp(-x) - effective_length(b, dz)) / b;
}

namespace detail {
template <class T>
T effective_length_t(const T& b, double dz) {
  using std::exp;
  const double x = ad::value_of(b) * dz;
  if (std::abs(x) < 1e-5) return dz * (1.0 - b * (dz / 2.0) + b * b * (dz * dz / 6.0));
  return (1.0 - exp(-(b * dz))) / b;
}
}  // namespace detail

/// Step sizes covering `length` with steps of `dz`; the last one is truncated.
inline std::vector<double> step_sizes(double length, double dz) {
  if (!(dz > 0.0) || !(length > 0.0)) throw Error("step sizes need positive length and step");
  if (dz > length + 1e-12) throw Error("step size exceeds the span length");
  const auto n = static_cast<std::size_t>(std::ceil(length / dz - 1e-9));
  std::vector<double> out(n, dz);
  out.back() = length - dz * static_cast<double>(n - 1);
  if (out.back() <= 1e-12) {
    out.pop_back();
    out.back() += length - dz * static_cast<double>(out.size());
  }
  return out;
}

/// One step of the log-power recursion. `coupling` is N x N row-major in
/// 1/(W km); works for double and for tape variables.
template <class T, class K>
void propagate_step(std::span<T> log_powers, std::span<const K> coupling, std::span<const double> loss_np, double dz,
                    StepRule rule = StepRule::net_rate) {
  using std::exp;
  const std::size_t n = log_powers.size();
  if (coupling.size() != n * n || loss_np.size() != n) throw Error("propagate_step: shape mismatch");
  std::vector<T> p;
  p.reserve(n);
  for (std::size_t m = 0; m < n; ++m) p.push_back(exp(log_powers[m]));
  std::vector<T> weighted;
  weighted.reserve(n);
  for (std::size_t m = 0; m < n; ++m) {
    if (rule == StepRule::literal) {
      weighted.push_back(p[m] * (kWattPerMilliwatt * effective_length(loss_np[m], dz)));
      continue;
    }
    T rate = p[m] * 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != m) rate = rate + coupling[m * n + k] * p[k];
    weighted.push_back(p[m] * kWattPerMilliwatt * detail::effective_length_t<T>(loss_np[m] - rate * kWattPerMilliwatt, dz));
  }
  std::vector<T> next;
  next.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    T acc = log_powers[i] - loss_np[i] * dz;
    for (std::size_t m = 0; m < n; ++m) {
      if (m == i) continue;
      acc = acc + coupling[i * n + m] * weighted[m];
    }
    if (!std::isfinite(ad::value_of(acc))) throw Error("propagate_step: non-finite power for carrier " + std::to_string(i));
    next.push_back(acc);
  }
  std::copy(next.begin(), next.end(), log_powers.begin());
}

/// Convenience overload: builds the coupling from carriers (all forward).
inline void propagate_step(std::span<double> log_powers, const std::vector<Carrier>& carriers, const FiberSpec& fiber,
                           double dz, const GainInterpolator& g, bool plain_antisymmetric = false,
                           StepRule rule = StepRule::net_rate) {
  if (log_powers.size() != carriers.size()) throw Error("propagate_step: one log power per carrier expected");
  std::vector<double> freqs;
  std::vector<double> loss;
  for (const auto& c : carriers) {
    if (c.direction != Direction::forward) throw Error("propagate_step: carriers must all be forward");
    freqs.push_back(c.frequency_thz);
    loss.push_back(loss_np_per_km(c.attenuation_db_per_km));
  }
  const auto k = coupling_matrix(g, freqs, fiber.raman_peak_efficiency_per_w_km, plain_antisymmetric);
  propagate_step<double, double>(log_powers, k.k, loss, dz, rule);
}

namespace detail {

inline std::vector<std::size_t> canonical_order(std::span<const double> freqs, std::span<const double> power,
                                                std::span<const double> loss) {
  std::vector<std::size_t> order(freqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (freqs[a] != freqs[b]) return freqs[a] < freqs[b];
    if (power[a] != power[b]) return power[a] < power[b];
    return loss[a] < loss[b];
  });
  return order;
}

template <class V>
std::vector<V> permute(std::span<const V> v, std::span<const std::size_t> order) {
  std::vector<V> out;
  out.reserve(order.size());
  for (auto i : order) out.push_back(v[i]);
  return out;
}

/// Runs the recursion in place on x (log mW). If trace is given it receives
/// x at every position, (steps + 1) x n.
inline void run_span(const CouplingMatrix& k, std::span<const double> loss, std::span<const double> dzs,
                     std::vector<double>& x, std::vector<double>* trace, StepRule rule = StepRule::net_rate) {
  const std::size_t n = x.size();
  std::vector<double> p(n);
  std::vector<double> c(n);
  std::vector<double> next(n);
  if (trace) {
    trace->clear();
    trace->reserve((dzs.size() + 1) * n);
    trace->insert(trace->end(), x.begin(), x.end());
  }
  for (std::size_t s = 0; s < dzs.size(); ++s) {
    const double dz = dzs[s];
    for (std::size_t m = 0; m < n; ++m) p[m] = std::exp(x[m]);
    for (std::size_t m = 0; m < n; ++m) {
      double b = loss[m];
      if (rule == StepRule::net_rate) {
        const double* row = k.k.data() + m * n;
        double r = 0.0;
        for (std::size_t j = 0; j < n; ++j) r += row[j] * p[j];
        b -= kWattPerMilliwatt * r;
      }
      c[m] = kWattPerMilliwatt * effective_length(b, dz) * p[m];
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = k.k.data() + i * n;
      double acc = 0.0;
      for (std::size_t m = 0; m < n; ++m) acc += row[m] * c[m];
      next[i] = x[i] - loss[i] * dz + acc;
      if (!std::isfinite(next[i]))
        throw Error("propagate_span: non-finite power for carrier " + std::to_string(i) + " at step " +
                    std::to_string(s));
    }
    x.swap(next);
    if (trace) trace->insert(trace->end(), x.begin(), x.end());
  }
}

/// Adjoint of run_span. `lambda` holds d/dx at the end on entry and d/dx at
/// the start on exit; `adj_k` (n x n) accumulates d/dK.
inline void run_span_adjoint(const CouplingMatrix& k, std::span<const double> loss, std::span<const double> dzs,
                             std::span<const double> trace, std::vector<double>& lambda, std::vector<double>& adj_k,
                             StepRule rule = StepRule::net_rate) {
  const std::size_t n = lambda.size();
  adj_k.assign(n * n, 0.0);
  std::vector<double> p(n);
  std::vector<double> c(n);
  std::vector<double> slope(n);
  std::vector<double> u(n);
  std::vector<double> adj_r(n);
  std::vector<double> v(n);
  for (std::size_t s = dzs.size(); s-- > 0;) {
    const double dz = dzs[s];
    const double* x = trace.data() + s * n;
    for (std::size_t m = 0; m < n; ++m) p[m] = std::exp(x[m]);
    for (std::size_t m = 0; m < n; ++m) {
      double b = loss[m];
      if (rule == StepRule::net_rate) {
        const double* row = k.k.data() + m * n;
        double r = 0.0;
        for (std::size_t j = 0; j < n; ++j) r += row[j] * p[j];
        b -= kWattPerMilliwatt * r;
        slope[m] = kWattPerMilliwatt * effective_length_slope(b, dz) * p[m];
      }
      c[m] = kWattPerMilliwatt * effective_length(b, dz) * p[m];
    }
    std::fill(u.begin(), u.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double li = lambda[i];
      if (li == 0.0) continue;
      const double* row = k.k.data() + i * n;
      double* arow = adj_k.data() + i * n;
      for (std::size_t m = 0; m < n; ++m) {
        u[m] += li * row[m];
        arow[m] += li * c[m];
      }
    }
    for (std::size_t m = 0; m < n; ++m) lambda[m] += c[m] * u[m];
    if (rule != StepRule::net_rate) continue;
    // b_m = a_m - 1e-3 sum_j K_mj P_j, so d/dr_m = -(d/db_m).
    for (std::size_t m = 0; m < n; ++m) adj_r[m] = -u[m] * slope[m] * kWattPerMilliwatt;
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t m = 0; m < n; ++m) {
      const double am = adj_r[m];
      if (am == 0.0) continue;
      const double* row = k.k.data() + m * n;
      double* arow = adj_k.data() + m * n;
      for (std::size_t j = 0; j < n; ++j) {
        v[j] += am * row[j];
        arow[j] += am * p[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) lambda[j] += v[j] * p[j];
  }
}

inline void cumulative_positions(std::span<const double> dzs, std::vector<double>& z) {
  z.assign(1, 0.0);
  for (double d : dzs) z.push_back(z.back() + d);
}

}  // namespace detail

/// Trace of one recorded span, in the caller's carrier order.
struct SpanTrace {
  std::vector<double> z_km;
  std::vector<double> frequencies_thz;
  std::vector<std::vector<double>> log_power;  // [carrier][position], ln mW
};

/// Records a span on the tape. Inputs are the carriers' frequencies (THz)
/// and launch log powers (ln mW); outputs are the log powers at the span
/// end. Gradients reach the frequencies through g' of the interpolator.
inline std::vector<ad::Var> record_span(std::span<const ad::Var> freqs, std::span<const ad::Var> log_p0,
                                        std::span<const double> loss_np, double length_km,
                                        const ForwardSolveConfig& cfg, const FiberSpec& fiber,
                                        SpanTrace* trace_out = nullptr) {
  const std::size_t n = freqs.size();
  if (log_p0.size() != n || loss_np.size() != n) throw Error("record_span: shape mismatch");
  if (n == 0) return {};
  if (!cfg.interpolator) throw Error("record_span: no gain interpolator configured");
  ad::Tape& tape = *freqs.front().tape;

  std::vector<double> f(n);
  std::vector<double> x0(n);
  for (std::size_t i = 0; i < n; ++i) {
    f[i] = freqs[i].value;
    x0[i] = log_p0[i].value;
  }
  const auto order = detail::canonical_order(f, x0, loss_np);
  const auto fs = detail::permute<double>(f, order);
  const auto ls = detail::permute<double>(loss_np, order);
  std::vector<double> x = detail::permute<double>(x0, order);

  auto k = std::make_shared<CouplingMatrix>(
      coupling_matrix(*cfg.interpolator, fs, fiber.raman_peak_efficiency_per_w_km, cfg.plain_antisymmetric, true));
  const auto dzs = step_sizes(length_km, cfg.dz_km);
  auto trace = std::make_shared<std::vector<double>>();
  detail::run_span(*k, ls, dzs, x, trace.get(), cfg.step_rule);

  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[order[j]] = x[j];

  if (trace_out) {
    detail::cumulative_positions(dzs, trace_out->z_km);
    trace_out->frequencies_thz = f;
    trace_out->log_power.assign(n, std::vector<double>(dzs.size() + 1));
    for (std::size_t s = 0; s <= dzs.size(); ++s)
      for (std::size_t j = 0; j < n; ++j) trace_out->log_power[order[j]][s] = (*trace)[s * n + j];
  }

  std::vector<std::uint32_t> f_idx(n);
  std::vector<std::uint32_t> x_idx(n);
  for (std::size_t j = 0; j < n; ++j) {
    f_idx[j] = freqs[order[j]].index;
    x_idx[j] = log_p0[order[j]].index;
  }
  const auto first = static_cast<std::uint32_t>(tape.size());
  const StepRule rule = cfg.step_rule;
  return tape.push_fused(out, [=](std::span<double> adj) {
    std::vector<double> lambda(n);
    for (std::size_t j = 0; j < n; ++j) lambda[j] = adj[first + order[j]];
    std::vector<double> adj_k;
    detail::run_span_adjoint(*k, ls, dzs, *trace, lambda, adj_k, rule);
    for (std::size_t j = 0; j < n; ++j) adj[x_idx[j]] += lambda[j];
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        const double g = adj_k[a * n + b];
        if (g == 0.0) continue;
        adj[f_idx[a]] += g * k->d_fn[a * n + b];
        adj[f_idx[b]] += g * k->d_fm[a * n + b];
      }
    }
  });
}

inline PowerProfile to_profile(const SpanTrace& t, double z_offset_km = 0.0) {
  PowerProfile p;
  for (double z : t.z_km) p.z_km.push_back(z + z_offset_km);
  p.frequencies_thz = t.frequencies_thz;
  p.directions.assign(t.frequencies_thz.size(), Direction::forward);
  for (const auto& row : t.log_power) {
    std::vector<double> dbm;
    dbm.reserve(row.size());
    for (double v : row) dbm.push_back(v * kDbPerNeper);
    p.powers_dbm.push_back(std::move(dbm));
  }
  return p;
}

/// Forward-only span with the log-power recursion. Zero-power carriers stay
/// at zero (reported as -inf dBm) and do not interact.
inline ForwardResult propagate_span(const std::vector<Carrier>& carriers, const FiberSpec& fiber,
                                    const ForwardSolveConfig& cfg) {
  validate(fiber);
  if (!cfg.interpolator) throw Error("propagate_span: no gain interpolator configured");
  if (!(cfg.dz_km > 0.0) || cfg.dz_km > fiber.length_km + 1e-12) throw Error("propagate_span: need 0 < dz <= length");
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < carriers.size(); ++i) {
    validate(carriers[i]);
    if (carriers[i].direction != Direction::forward) throw Error("propagate_span: carriers must all be forward");
    if (carriers[i].power_mw > 0.0) live.push_back(i);
  }
  ForwardResult res;
  res.output_dbm.assign(carriers.size(), -std::numeric_limits<double>::infinity());
  SpanTrace trace;
  if (!live.empty()) {
    ad::Tape tape;
    std::vector<ad::Var> f;
    std::vector<ad::Var> x;
    std::vector<double> loss;
    for (auto i : live) {
      f.push_back(tape.constant(carriers[i].frequency_thz));
      x.push_back(tape.constant(std::log(carriers[i].power_mw)));
      loss.push_back(loss_np_per_km(carriers[i].attenuation_db_per_km));
    }
    const auto out = record_span(f, x, loss, fiber.length_km, cfg, fiber, cfg.record_profile ? &trace : nullptr);
    for (std::size_t j = 0; j < live.size(); ++j) res.output_dbm[live[j]] = out[j].value * kDbPerNeper;
  }
  if (cfg.record_profile) {
    PowerProfile p;
    detail::cumulative_positions(step_sizes(fiber.length_km, cfg.dz_km), p.z_km);
    for (std::size_t i = 0; i < carriers.size(); ++i) {
      p.frequencies_thz.push_back(carriers[i].frequency_thz);
      p.directions.push_back(Direction::forward);
      p.powers_dbm.emplace_back(p.z_km.size(), -std::numeric_limits<double>::infinity());
    }
    for (std::size_t j = 0; j < live.size(); ++j)
      for (std::size_t s = 0; s < p.z_km.size(); ++s) p.powers_dbm[live[j]][s] = trace.log_power[j][s] * kDbPerNeper;
    res.profile = std::move(p);
  }
  return res;
}

namespace detail {

/// dP/dz = -a P + 1e-3 P (K P + ext) for the carriers in `p`.
inline void srs_rhs(const CouplingMatrix& k, std::span<const double> loss, std::span<const double> p,
                    std::span<const double> ext, std::span<double> out) {
  const std::size_t n = p.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = k.k.data() + i * n;
    double acc = ext.empty() ? 0.0 : ext[i];
    for (std::size_t m = 0; m < n; ++m) acc += row[m] * p[m];
    out[i] = -loss[i] * p[i] + kWattPerMilliwatt * p[i] * acc;
  }
}

/// Classic RK4 step of size h. `ext(t, out)` fills the frozen external
/// coupling sum at fraction t of the step, or clears `out` when there is
/// none. A step that would produce a negative power is split in halves, at
/// most `max_halvings` deep.
struct Rk4Workspace {
  std::vector<double> k1, k2, k3, k4, tmp, e0, em, e1;
  void resize(std::size_t n) {
    for (auto* v : {&k1, &k2, &k3, &k4, &tmp}) v->resize(n);
  }
};

template <class Ext>
void rk4_step(const CouplingMatrix& k, std::span<const double> loss, std::vector<double>& p, double h, Ext&& ext,
              Rk4Workspace& w, double t0 = 0.0, double span = 1.0, int depth = 0, int max_halvings = 10) {
  const std::size_t n = p.size();
  w.resize(n);
  ext(t0, w.e0);
  ext(t0 + 0.5 * span, w.em);
  ext(t0 + span, w.e1);
  srs_rhs(k, loss, p, w.e0, w.k1);
  for (std::size_t i = 0; i < n; ++i) w.tmp[i] = p[i] + 0.5 * h * w.k1[i];
  srs_rhs(k, loss, w.tmp, w.em, w.k2);
  for (std::size_t i = 0; i < n; ++i) w.tmp[i] = p[i] + 0.5 * h * w.k2[i];
  srs_rhs(k, loss, w.tmp, w.em, w.k3);
  for (std::size_t i = 0; i < n; ++i) w.tmp[i] = p[i] + h * w.k3[i];
  srs_rhs(k, loss, w.tmp, w.e1, w.k4);
  bool negative = false;
  for (std::size_t i = 0; i < n; ++i) {
    w.tmp[i] = p[i] + h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    if (w.tmp[i] < 0.0 || !std::isfinite(w.tmp[i])) negative = true;
  }
  if (!negative) {
    std::copy(w.tmp.begin(), w.tmp.begin() + static_cast<std::ptrdiff_t>(n), p.begin());
    return;
  }
  if (depth >= max_halvings) throw Error("RK4: negative power persists after step halving");
  rk4_step(k, loss, p, 0.5 * h, ext, w, t0, 0.5 * span, depth + 1, max_halvings);
  rk4_step(k, loss, p, 0.5 * h, ext, w, t0 + 0.5 * span, 0.5 * span, depth + 1, max_halvings);
}

}  // namespace detail

/// Fine-step RK4 reference for forward-only spans.
inline ForwardResult propagate_span_oracle(const std::vector<Carrier>& carriers, const FiberSpec& fiber,
                                           const OracleConfig& cfg) {
  validate(fiber);
  if (!cfg.interpolator) throw Error("propagate_span_oracle: no gain interpolator configured");
  const std::size_t n = carriers.size();
  std::vector<double> f(n), p0(n), loss(n);
  for (std::size_t i = 0; i < n; ++i) {
    validate(carriers[i]);
    if (carriers[i].direction != Direction::forward) throw Error("propagate_span_oracle: carriers must all be forward");
    f[i] = carriers[i].frequency_thz;
    p0[i] = carriers[i].power_mw;
    loss[i] = loss_np_per_km(carriers[i].attenuation_db_per_km);
  }
  const auto order = detail::canonical_order(f, p0, loss);
  const auto fs = detail::permute<double>(f, order);
  const auto ls = detail::permute<double>(loss, order);
  auto p = detail::permute<double>(p0, order);
  const auto k = coupling_matrix(*cfg.interpolator, fs, fiber.raman_peak_efficiency_per_w_km, cfg.plain_antisymmetric);
  const auto dzs = step_sizes(fiber.length_km, cfg.dz_km);

  ForwardResult res;
  PowerProfile prof;
  auto record = [&](double z) {
    prof.z_km.push_back(z);
    for (std::size_t j = 0; j < n; ++j) prof.powers_dbm[order[j]].push_back(mw_to_dbm(p[j]));
  };
  if (cfg.record_stride > 0) {
    prof.frequencies_thz = f;
    prof.directions.assign(n, Direction::forward);
    prof.powers_dbm.assign(n, {});
    record(0.0);
  }
  const auto no_ext = [](double, std::vector<double>& out) { out.clear(); };
  detail::Rk4Workspace work;
  double z = 0.0;
  for (std::size_t s = 0; s < dzs.size(); ++s) {
    detail::rk4_step(k, ls, p, dzs[s], no_ext, work);
    z += dzs[s];
    if (cfg.record_stride > 0 && ((s + 1) % cfg.record_stride == 0 || s + 1 == dzs.size())) record(z);
  }
  res.output_dbm.resize(n);
  for (std::size_t j = 0; j < n; ++j) res.output_dbm[order[j]] = mw_to_dbm(p[j]);
  if (cfg.record_stride > 0) res.profile = std::move(prof);
  return res;
}

/// Long-format CSV: z_km,f_thz,p_dbm.
inline void write_profile_csv(std::ostream& os, const PowerProfile& p) {
  os << "z_km,f_thz,p_dbm\n";
  os.precision(10);
  for (std::size_t s = 0; s < p.num_positions(); ++s)
    for (std::size_t c = 0; c < p.num_carriers(); ++c)
      os << p.z_km[s] << ',' << p.frequencies_thz[c] << ',' << p.powers_dbm[c][s] << '\n';
}

}  // namespace raman
