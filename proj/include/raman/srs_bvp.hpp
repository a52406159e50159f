#pragma once

// Counter-propagating SRS as a two-point boundary value problem, solved by
// alternating shooting sweeps: forward carriers left to right with the
// backward profile frozen, then backward carriers right to left with the
// forward profile frozen, until the boundary outputs stop moving.
//
// Not differentiable on purpose; the backward gain surrogate exists to
// replace it inside the optimizer.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "raman/raman_gain.hpp"
#include "raman/srs_forward.hpp"
#include "raman/units.hpp"

namespace raman {

struct BvpConfig {
  double dz_km = 0.05;
  double tol_db = 1e-4;
  int max_sweeps = 50;
  std::shared_ptr<const GainInterpolator> interpolator;
  bool plain_antisymmetric = false;
};

struct BvpResult {
  // Forward carriers first, then backward carriers, in input order.
  PowerProfile profile;
  int sweeps = 0;
  double residual_db = 0.0;
  std::vector<double> residual_history;
};

class BvpConvergenceError : public Error {
 public:
  BvpConvergenceError(const std::string& what, double residual) : Error(what), residual_db(residual) {}
  double residual_db;
};

namespace detail {

inline CouplingMatrix sub_matrix(const CouplingMatrix& full, std::span<const std::size_t> rows,
                                 std::span<const std::size_t> cols) {
  CouplingMatrix m;
  m.n = cols.size();
  m.k.resize(rows.size() * cols.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) m.k[r * cols.size() + c] = full(rows[r], cols[c]);
  return m;
}

// sum_m K[i, m] * P_m for a rectangular block.
inline void cross_sum(const CouplingMatrix& block, std::size_t rows, std::span<const double> p, std::vector<double>& out) {
  out.assign(rows, 0.0);
  const std::size_t cols = block.n;
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = block.k.data() + i * cols;
    double acc = 0.0;
    for (std::size_t m = 0; m < cols; ++m) acc += row[m] * p[m];
    out[i] = acc;
  }
}

// Log-linear interpolation between two stored power vectors.
inline void interp_powers(std::span<const double> a, std::span<const double> b, double t, std::vector<double>& out) {
  out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (t == 0.0) {
      out[i] = a[i];
    } else if (t == 1.0) {
      out[i] = b[i];
    } else if (a[i] > 0.0 && b[i] > 0.0) {
      out[i] = a[i] * std::exp(t * std::log(b[i] / a[i]));
    } else {
      out[i] = a[i] + t * (b[i] - a[i]);
    }
  }
}

inline double db_change(double a_mw, double b_mw) {
  if (a_mw == b_mw) return 0.0;
  if (a_mw <= 0.0 || b_mw <= 0.0) return std::numeric_limits<double>::infinity();
  return std::abs(10.0 * std::log10(a_mw / b_mw));
}

}  // namespace detail

inline BvpResult solve_bvp(const std::vector<Carrier>& forward, const std::vector<Carrier>& backward,
                           const FiberSpec& fiber, const BvpConfig& cfg) {
  validate(fiber);
  if (!cfg.interpolator) throw Error("solve_bvp: no gain interpolator configured");
  if (!(cfg.tol_db > 0.0)) throw Error("solve_bvp: tolerance must be > 0");
  if (cfg.max_sweeps < 2) throw Error("solve_bvp: need at least two sweeps");
  for (const auto& c : forward) {
    validate(c);
    if (c.direction != Direction::forward) throw Error("solve_bvp: forward list holds a backward carrier");
  }
  for (const auto& c : backward) {
    validate(c);
    if (c.direction != Direction::backward) throw Error("solve_bvp: backward list holds a forward carrier");
  }
  const std::size_t nf = forward.size();
  const std::size_t nb = backward.size();
  const std::size_t n = nf + nb;

  std::vector<double> freqs;
  std::vector<double> loss;
  for (const auto* set : {&forward, &backward})
    for (const auto& c : *set) {
      freqs.push_back(c.frequency_thz);
      loss.push_back(loss_np_per_km(c.attenuation_db_per_km));
    }
  const auto full = coupling_matrix(*cfg.interpolator, freqs, fiber.raman_peak_efficiency_per_w_km, cfg.plain_antisymmetric);
  std::vector<std::size_t> fi(nf);
  std::vector<std::size_t> bi(nb);
  for (std::size_t i = 0; i < nf; ++i) fi[i] = i;
  for (std::size_t i = 0; i < nb; ++i) bi[i] = nf + i;
  const auto k_ff = detail::sub_matrix(full, fi, fi);
  const auto k_fb = detail::sub_matrix(full, fi, bi);
  const auto k_bb = detail::sub_matrix(full, bi, bi);
  const auto k_bf = detail::sub_matrix(full, bi, fi);
  const std::vector<double> loss_f(loss.begin(), loss.begin() + static_cast<std::ptrdiff_t>(nf));
  const std::vector<double> loss_b(loss.begin() + static_cast<std::ptrdiff_t>(nf), loss.end());

  const auto dzs = step_sizes(fiber.length_km, cfg.dz_km);
  const std::size_t steps = dzs.size();
  std::vector<double> z(1, 0.0);
  for (double d : dzs) z.push_back(z.back() + d);

  // Row-major [position][carrier].
  std::vector<double> pf((steps + 1) * nf, 0.0);
  std::vector<double> pb((steps + 1) * nb, 0.0);
  for (std::size_t s = 0; s <= steps; ++s)
    for (std::size_t j = 0; j < nb; ++j)
      pb[s * nb + j] = backward[j].power_mw * std::exp(-loss_b[j] * (fiber.length_km - z[s]));
  auto row_f = [&](std::size_t s) { return std::span<double>(pf.data() + s * nf, nf); };
  auto row_b = [&](std::size_t s) { return std::span<double>(pb.data() + s * nb, nb); };

  BvpResult res;
  std::vector<double> prev_out;
  std::vector<double> state;
  std::vector<double> interp;
  detail::Rk4Workspace work;
  const bool one_way = nf == 0 || nb == 0;

  for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
    state.assign(nf, 0.0);
    for (std::size_t j = 0; j < nf; ++j) state[j] = forward[j].power_mw;
    std::copy(state.begin(), state.end(), row_f(0).begin());
    for (std::size_t s = 0; s < steps && nf > 0; ++s) {
      auto ext = [&](double t, std::vector<double>& out) {
        if (nb == 0) {
          out.clear();
          return;
        }
        detail::interp_powers(row_b(s), row_b(s + 1), t, interp);
        detail::cross_sum(k_fb, nf, interp, out);
      };
      detail::rk4_step(k_ff, loss_f, state, dzs[s], ext, work);
      std::copy(state.begin(), state.end(), row_f(s + 1).begin());
    }

    state.assign(nb, 0.0);
    for (std::size_t j = 0; j < nb; ++j) state[j] = backward[j].power_mw;
    std::copy(state.begin(), state.end(), row_b(steps).begin());
    for (std::size_t s = steps; s-- > 0 && nb > 0;) {
      auto ext = [&](double t, std::vector<double>& out) {
        if (nf == 0) {
          out.clear();
          return;
        }
        detail::interp_powers(row_f(s + 1), row_f(s), t, interp);
        detail::cross_sum(k_bf, nb, interp, out);
      };
      detail::rk4_step(k_bb, loss_b, state, dzs[s], ext, work);
      std::copy(state.begin(), state.end(), row_b(s).begin());
    }

    std::vector<double> out;
    for (std::size_t j = 0; j < nf; ++j) out.push_back(pf[steps * nf + j]);
    for (std::size_t j = 0; j < nb; ++j) out.push_back(pb[j]);
    double residual = std::numeric_limits<double>::infinity();
    if (!prev_out.empty()) {
      residual = 0.0;
      for (std::size_t j = 0; j < out.size(); ++j) residual = std::max(residual, detail::db_change(out[j], prev_out[j]));
    }
    if (one_way) residual = 0.0;
    res.residual_history.push_back(residual);
    res.sweeps = sweep;
    res.residual_db = residual;
    prev_out = std::move(out);
    if (residual <= cfg.tol_db) break;
    if (sweep == cfg.max_sweeps)
      throw BvpConvergenceError("solve_bvp: no convergence after " + std::to_string(sweep) +
                                    " sweeps, residual " + std::to_string(residual) + " dB",
                                residual);
  }

  PowerProfile& p = res.profile;
  p.z_km = z;
  p.frequencies_thz = freqs;
  p.powers_dbm.assign(n, std::vector<double>(steps + 1));
  for (std::size_t j = 0; j < nf; ++j) {
    p.directions.push_back(Direction::forward);
    for (std::size_t s = 0; s <= steps; ++s) p.powers_dbm[j][s] = mw_to_dbm(pf[s * nf + j]);
  }
  for (std::size_t j = 0; j < nb; ++j) {
    p.directions.push_back(Direction::backward);
    for (std::size_t s = 0; s <= steps; ++s) p.powers_dbm[nf + j][s] = mw_to_dbm(pb[s * nb + j]);
  }
  return res;
}

namespace detail {
inline std::size_t find_forward_carrier(const PowerProfile& p, double f_thz) {
  for (std::size_t i = 0; i < p.num_carriers(); ++i)
    if (p.directions[i] == Direction::forward && std::abs(p.frequencies_thz[i] - f_thz) < 1e-9) return i;
  throw Error("profile has no forward carrier at " + std::to_string(f_thz) + " THz");
}
}  // namespace detail

/// On-off gain from launch and output power and the loss-only baseline:
/// G_n = P_n(L) - (P_n(0) - a_n L), all in dB.
inline std::vector<double> on_off_gain(const PowerProfile& with_pumps, const FiberSpec& fiber,
                                       const std::vector<Carrier>& channels) {
  if (with_pumps.num_positions() == 0 || std::abs(with_pumps.z_km.back() - fiber.length_km) > 1e-9)
    throw Error("on_off_gain: profile does not reach the fiber end");
  std::vector<double> g;
  g.reserve(channels.size());
  for (const auto& c : channels) {
    const auto i = detail::find_forward_carrier(with_pumps, c.frequency_thz);
    const double p0 = with_pumps.powers_dbm[i].front();
    const double pl = with_pumps.powers_dbm[i].back();
    g.push_back(pl - (p0 - c.attenuation_db_per_km * fiber.length_km));
  }
  return g;
}

/// Pumped output minus unpumped output, per channel.
inline std::vector<double> on_off_gain_two_solve(const PowerProfile& pumped, const PowerProfile& unpumped,
                                                 const std::vector<Carrier>& channels) {
  std::vector<double> g;
  g.reserve(channels.size());
  for (const auto& c : channels) {
    const auto a = detail::find_forward_carrier(pumped, c.frequency_thz);
    const auto b = detail::find_forward_carrier(unpumped, c.frequency_thz);
    g.push_back(pumped.powers_dbm[a].back() - unpumped.powers_dbm[b].back());
  }
  return g;
}

}  // namespace raman
