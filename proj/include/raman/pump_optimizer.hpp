#pragma once

// Gradient descent on pump frequencies and powers against a target
// received-power profile, with ReLU constraint penalties, merging of close
// pumps and pruning of weak ones.
//
// Parameters per pump: q = ln(P / mW) and, if the frequency is free,
// u = (f - f_min) / (f_max - f_min). Adam runs on (u, q); after each step
// frequencies are clamped to [f_min, f_max] and powers to the group's cap.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raman/adam.hpp"
#include "raman/autodiff.hpp"
#include "raman/backward_gain.hpp"
#include "raman/link.hpp"

namespace raman {

struct GroupLimits {
  double p_max_w = 1.0;
  std::optional<double> p_tot_w;
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  int max_iters = 1500;
  double merge_threshold_ghz = 200.0;
  double prune_below_mw = 1.0;
  int stall_window = 50;
  double stall_rel_tol = 1e-4;
  double penalty_weight = 10.0;
  double f_min_thz = 198.0;
  double f_max_thz = 220.0;
  GroupLimits forward{2.0, std::nullopt};
  GroupLimits remote{2.0, std::nullopt};
  GroupLimits backward{0.14, std::nullopt};
  ForwardSolveConfig solver{};

  const GroupLimits& limits(PumpGroup g) const {
    switch (g) {
      case PumpGroup::forward: return forward;
      case PumpGroup::remote: return remote;
      case PumpGroup::backward: return backward;
    }
    return forward;
  }
};

struct PenaltyTerms {
  double f_floor = 0.0;
  double f_ceiling = 0.0;
  double p_max = 0.0;
  double p_tot = 0.0;
  double sum() const { return f_floor + f_ceiling + p_max + p_tot; }
};

struct CostEval {
  ad::Var cost;
  ad::Var mse;
  PenaltyTerms penalties;
  LinkOutput link;
};

namespace detail {

/// Penalties for one group: ReLU on the extreme frequency and the
/// largest power, plus the optional total. Frequencies in THz, powers in W.
inline ad::Var group_penalty(ad::Tape& tape, const PumpSet& set, std::span<const PumpVars> vars, PumpGroup g,
                             const OptimizerConfig& cfg, bool frequency_terms, PenaltyTerms& terms) {
  std::vector<ad::Var> f;
  std::vector<ad::Var> p_w;
  for (std::size_t i = 0; i < set.pumps.size(); ++i) {
    if (set.pumps[i].group != g || !vars[i].active) continue;
    f.push_back(vars[i].frequency_thz);
    p_w.push_back(ad::exp(vars[i].log_power_mw) * kWattPerMilliwatt);
  }
  ad::Var total = tape.constant(0.0);
  if (f.empty()) return total;
  if (frequency_terms) {
    ad::Var lo = f.front();
    ad::Var hi = f.front();
    for (const auto& v : f) {
      lo = ad::min(lo, v);
      hi = ad::max(hi, v);
    }
    const ad::Var floor_term = ad::relu(cfg.f_min_thz - lo);
    const ad::Var ceil_term = ad::relu(hi - cfg.f_max_thz);
    terms.f_floor += floor_term.value;
    terms.f_ceiling += ceil_term.value;
    total = total + floor_term + ceil_term;
  }
  const auto& lim = cfg.limits(g);
  ad::Var pmax = p_w.front();
  for (const auto& v : p_w) pmax = ad::max(pmax, v);
  const ad::Var cap = ad::relu(pmax - lim.p_max_w);
  terms.p_max += cap.value;
  total = total + cap;
  if (lim.p_tot_w) {
    const ad::Var tot = ad::relu(ad::sum(p_w) - *lim.p_tot_w);
    terms.p_tot += tot.value;
    total = total + tot;
  }
  return total;
}

inline ad::Var mse_term(std::span<const ad::Var> received, std::span<const double> target) {
  if (received.size() != target.size()) throw Error("target has " + std::to_string(target.size()) +
                                                    " channels, link has " + std::to_string(received.size()));
  std::vector<ad::Var> sq;
  for (std::size_t i = 0; i < received.size(); ++i) {
    const ad::Var e = received[i] - target[i];
    sq.push_back(e * e);
  }
  return ad::sum(sq) / static_cast<double>(sq.size());
}

}  // namespace detail

inline CostEval cost_forward_system(ad::Tape& tape, const PumpSet& set, std::span<const PumpVars> vars,
                                    const LinkTopology& topo, std::span<const double> target_dbm,
                                    const OptimizerConfig& cfg, bool keep_profiles = false) {
  CostEval ev;
  ev.link = model_link_ropa(tape, set, vars, topo, cfg.solver, keep_profiles);
  ev.mse = detail::mse_term(ev.link.received_dbm, target_dbm);
  ad::Var pen = detail::group_penalty(tape, set, vars, PumpGroup::forward, cfg, true, ev.penalties);
  pen = pen + detail::group_penalty(tape, set, vars, PumpGroup::remote, cfg, true, ev.penalties);
  ev.cost = ev.mse + pen * cfg.penalty_weight;
  return ev;
}

inline CostEval cost_hybrid_system(ad::Tape& tape, const PumpSet& set, std::span<const PumpVars> vars,
                                   const LinkTopology& topo, const BackwardGainModel& bgm,
                                   std::span<const double> target_dbm, const OptimizerConfig& cfg,
                                   bool keep_profiles = false) {
  CostEval ev;
  ev.link = model_link_hybrid(tape, set, vars, topo, bgm, cfg.solver, keep_profiles);
  ev.mse = detail::mse_term(ev.link.received_dbm, target_dbm);
  ad::Var pen = detail::group_penalty(tape, set, vars, PumpGroup::forward, cfg, true, ev.penalties);
  pen = pen + detail::group_penalty(tape, set, vars, PumpGroup::backward, cfg, false, ev.penalties);
  ev.cost = ev.mse + pen * cfg.penalty_weight;
  return ev;
}

struct MergeEvent {
  PumpGroup group = PumpGroup::forward;
  Pump a;
  Pump b;
  Pump merged;
};

/// Within each forward/remote group, repeatedly merges the closest pair
/// whose separation is at most `threshold_ghz`; ties go to the pair with
/// the lowest frequency. Backward pumps are left alone. Result is sorted by
/// group, then frequency.
inline PumpSet merge_pumps(const PumpSet& in, double threshold_ghz, std::vector<MergeEvent>* events = nullptr) {
  constexpr double kTieThz = 1e-9;
  PumpSet out;
  for (PumpGroup g : {PumpGroup::forward, PumpGroup::remote, PumpGroup::backward}) {
    std::vector<Pump> ps;
    for (const auto& p : in.pumps)
      if (p.group == g) ps.push_back(p);
    auto by_freq = [](const Pump& x, const Pump& y) { return x.frequency_thz < y.frequency_thz; };
    std::stable_sort(ps.begin(), ps.end(), by_freq);
    while (g != PumpGroup::backward && ps.size() > 1) {
      std::size_t best = ps.size();
      double best_sep = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i + 1 < ps.size(); ++i) {
        const double sep = ps[i + 1].frequency_thz - ps[i].frequency_thz;
        if (sep * 1e3 > threshold_ghz + 1e-6) continue;
        if (sep < best_sep - kTieThz) {
          best_sep = sep;
          best = i;
        }
      }
      if (best == ps.size()) break;
      Pump m = ps[best];
      m.frequency_thz = 0.5 * (ps[best].frequency_thz + ps[best + 1].frequency_thz);
      m.power_mw = ps[best].power_mw + ps[best + 1].power_mw;
      m.optimize_frequency = ps[best].optimize_frequency || ps[best + 1].optimize_frequency;
      if (events) events->push_back({g, ps[best], ps[best + 1], m});
      ps[best] = m;
      ps.erase(ps.begin() + static_cast<std::ptrdiff_t>(best) + 1);
      std::stable_sort(ps.begin(), ps.end(), by_freq);
    }
    out.pumps.insert(out.pumps.end(), ps.begin(), ps.end());
  }
  return out;
}

/// Removes forward/remote pumps below `floor_mw`; a group never loses its
/// strongest pump. Backward pumps are left alone.
inline PumpSet prune_pumps(const PumpSet& in, double floor_mw, std::vector<Pump>* removed = nullptr) {
  PumpSet out;
  for (PumpGroup g : {PumpGroup::forward, PumpGroup::remote, PumpGroup::backward}) {
    std::vector<Pump> ps;
    for (const auto& p : in.pumps)
      if (p.group == g) ps.push_back(p);
    if (g == PumpGroup::backward || ps.empty()) {
      out.pumps.insert(out.pumps.end(), ps.begin(), ps.end());
      continue;
    }
    const auto strongest = static_cast<std::size_t>(
        std::max_element(ps.begin(), ps.end(), [](const Pump& x, const Pump& y) { return x.power_mw < y.power_mw; }) -
        ps.begin());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps[i].power_mw < floor_mw && i != strongest) {
        if (removed) removed->push_back(ps[i]);
        continue;
      }
      out.pumps.push_back(ps[i]);
    }
  }
  return out;
}

struct IterationRecord {
  int iteration = 0;
  double cost = 0.0;
  double mse_db2 = 0.0;
  PenaltyTerms penalties;
  std::size_t pumps = 0;
};

struct OptimizationEvent {
  int iteration = 0;
  std::string kind;  // "merge", "prune", "stall", "stop"
  std::string detail;
};

struct OptimizationReport {
  std::vector<IterationRecord> trace;
  std::vector<OptimizationEvent> events;
  PumpSet initial;
  PumpSet final_pumps;
  std::vector<double> target_dbm;
  std::vector<double> received_dbm;
  double final_mse_db2 = 0.0;
  double final_mae_db = 0.0;
  PenaltyTerms final_penalties;
  double section1_total_dbm = 0.0;
  bool validity_warning = false;
  int iterations = 0;
  std::string stop_reason;
  std::vector<double> remote_arrival_dbm;
  std::vector<PowerProfile> profiles;
  std::optional<std::string> failure;
};

/// What the optimizer works on: a topology, and the surrogate for hybrid.
struct OptimizationProblem {
  LinkTopology topology;
  std::vector<double> target_dbm;
  const BackwardGainModel* backward_model = nullptr;
};

namespace detail {

struct ParamMap {
  std::size_t pump = 0;
  bool is_frequency = false;
};

inline double clamp_log_power(const Pump& p, double q, const OptimizerConfig& cfg, const BackwardGainModel* bgm) {
  double hi = std::log(cfg.limits(p.group).p_max_w / kWattPerMilliwatt);
  double lo = -std::numeric_limits<double>::infinity();
  if (p.group == PumpGroup::backward && bgm) {
    hi = std::min(hi, bgm->max_power_dbm / kDbPerNeper);
    lo = bgm->min_power_dbm / kDbPerNeper;
  }
  return std::clamp(q, lo, hi);
}

inline CostEval evaluate(ad::Tape& tape, const PumpSet& set, std::span<const PumpVars> vars,
                         const OptimizationProblem& prob, const OptimizerConfig& cfg, bool keep_profiles) {
  if (prob.topology.kind == LinkKind::ropa)
    return cost_forward_system(tape, set, vars, prob.topology, prob.target_dbm, cfg, keep_profiles);
  if (!prob.backward_model) throw Error("hybrid optimization needs a backward gain model");
  return cost_hybrid_system(tape, set, vars, prob.topology, *prob.backward_model, prob.target_dbm, cfg, keep_profiles);
}

}  // namespace detail

/// Cost and its gradient at a pump set, in the optimizer's (u, q) parameters.
struct ParamGradient {
  double cost = 0.0;
  std::vector<double> params;
  std::vector<double> gradient;
};

inline std::vector<double> pack_params(const PumpSet& set, const OptimizerConfig& cfg, std::vector<detail::ParamMap>* map) {
  std::vector<double> x;
  for (std::size_t i = 0; i < set.pumps.size(); ++i) {
    const auto& p = set.pumps[i];
    if (p.optimize_frequency && p.group != PumpGroup::backward) {
      x.push_back((p.frequency_thz - cfg.f_min_thz) / (cfg.f_max_thz - cfg.f_min_thz));
      if (map) map->push_back({i, true});
    }
    if (!(p.power_mw > 0.0)) throw Error("optimizer: pump power must be > 0");
    x.push_back(std::log(p.power_mw));
    if (map) map->push_back({i, false});
  }
  return x;
}

inline PumpSet unpack_params(const PumpSet& like, std::span<const double> x, const std::vector<detail::ParamMap>& map,
                             const OptimizerConfig& cfg) {
  PumpSet out = like;
  for (std::size_t k = 0; k < map.size(); ++k) {
    auto& p = out.pumps[map[k].pump];
    if (map[k].is_frequency)
      p.frequency_thz = cfg.f_min_thz + x[k] * (cfg.f_max_thz - cfg.f_min_thz);
    else
      p.power_mw = std::exp(x[k]);
  }
  return out;
}

/// Records the cost with (u, q) as tape inputs.
inline CostEval record_cost(ad::Tape& tape, const PumpSet& set, std::span<const ad::Var> x,
                            const std::vector<detail::ParamMap>& map, const OptimizationProblem& prob,
                            const OptimizerConfig& cfg, bool keep_profiles = false) {
  std::vector<PumpVars> vars(set.pumps.size());
  for (std::size_t i = 0; i < set.pumps.size(); ++i) {
    vars[i].active = true;
    vars[i].frequency_thz = tape.constant(set.pumps[i].frequency_thz);
  }
  for (std::size_t k = 0; k < map.size(); ++k) {
    auto& v = vars[map[k].pump];
    if (map[k].is_frequency)
      v.frequency_thz = x[k] * (cfg.f_max_thz - cfg.f_min_thz) + cfg.f_min_thz;
    else
      v.log_power_mw = x[k];
  }
  return detail::evaluate(tape, set, vars, prob, cfg, keep_profiles);
}

inline ParamGradient cost_gradient(const PumpSet& set, const OptimizationProblem& prob, const OptimizerConfig& cfg) {
  std::vector<detail::ParamMap> map;
  ParamGradient pg;
  pg.params = pack_params(set, cfg, &map);
  ad::Tape tape;
  const auto x = tape.inputs(pg.params);
  const auto ev = record_cost(tape, set, x, map, prob, cfg);
  pg.cost = ev.cost.value;
  pg.gradient = tape.gradient(ev.cost, x);
  return pg;
}

inline double cost_value(const PumpSet& set, const OptimizationProblem& prob, const OptimizerConfig& cfg) {
  ad::Tape tape;
  const auto vars = pump_constants(tape, set);
  return detail::evaluate(tape, set, vars, prob, cfg, false).cost.value;
}

inline void finalize_report(OptimizationReport& rep, const OptimizationProblem& prob, const OptimizerConfig& cfg) {
  ad::Tape tape;
  const auto vars = pump_constants(tape, rep.final_pumps);
  const auto ev = detail::evaluate(tape, rep.final_pumps, vars, prob, cfg, true);
  rep.target_dbm = prob.target_dbm;
  rep.received_dbm.clear();
  rep.final_mae_db = 0.0;
  for (std::size_t i = 0; i < ev.link.received_dbm.size(); ++i) {
    rep.received_dbm.push_back(ev.link.received_dbm[i].value);
    rep.final_mae_db = std::max(rep.final_mae_db, std::abs(ev.link.received_dbm[i].value - prob.target_dbm[i]));
  }
  rep.final_mse_db2 = ev.mse.value;
  rep.final_penalties = ev.penalties;
  rep.section1_total_dbm = ev.link.section1_total_dbm;
  rep.validity_warning = ev.link.validity_warning;
  rep.remote_arrival_dbm = ev.link.remote_arrival_dbm;
  rep.profiles = ev.link.profiles;
}

/// Adam with projection. A stall is a relative cost drop below
/// stall_rel_tol between iteration i - stall_window and i (a rise counts). On the first stall,
/// merges and prunes; if that changes the pump set, Adam restarts on the new
/// set. A second stall, an unchanged set at the first stall, or max_iters
/// ends the run, returning the best iterate since the last restart. On a
/// solver failure the report carries that iterate and `failure`.
inline OptimizationReport optimize(const PumpSet& initial, const OptimizationProblem& prob, const OptimizerConfig& cfg,
                                   const std::function<void(const IterationRecord&)>& on_iter = {}) {
  prob.topology.check();
  if (initial.pumps.empty()) throw Error("optimize: no pumps");
  if (cfg.max_iters < 1 || cfg.stall_window < 1 || !(cfg.learning_rate > 0.0) || !(cfg.f_max_thz > cfg.f_min_thz))
    throw Error("optimize: invalid optimizer configuration");
  if (prob.target_dbm.size() != prob.topology.channel_freqs_thz.size())
    throw Error("optimize: target has " + std::to_string(prob.target_dbm.size()) + " channels, link has " +
                std::to_string(prob.topology.channel_freqs_thz.size()));
  OptimizationReport rep;
  rep.initial = initial;
  PumpSet set = initial;
  std::vector<detail::ParamMap> map;
  std::vector<double> x = pack_params(set, cfg, &map);
  AdamState adam(x.size(), cfg.learning_rate);
  std::vector<double> window;  // costs since the last (re)start
  double best_cost = std::numeric_limits<double>::infinity();
  PumpSet best_set;
  bool merged_once = false;

  auto project = [&] {
    for (std::size_t k = 0; k < map.size(); ++k) {
      const auto& p = set.pumps[map[k].pump];
      x[k] = map[k].is_frequency ? std::clamp(x[k], 0.0, 1.0) : detail::clamp_log_power(p, x[k], cfg, prob.backward_model);
    }
  };
  project();
  set = unpack_params(set, x, map, cfg);
  best_set = set;

  for (int it = 0; it < cfg.max_iters; ++it) {
    ad::Tape tape;
    const auto xv = tape.inputs(x);
    CostEval ev;
    std::vector<double> g;
    try {
      ev = record_cost(tape, set, xv, map, prob, cfg);
      g = tape.gradient(ev.cost, xv);
    } catch (const std::exception& e) {
      rep.failure = e.what();
      rep.stop_reason = "solver failure";
      break;
    }
    IterationRecord rec{it, ev.cost.value, ev.mse.value, ev.penalties, set.pumps.size()};
    rep.trace.push_back(rec);
    rep.iterations = it + 1;
    if (on_iter) on_iter(rec);
    window.push_back(ev.cost.value);
    if (ev.cost.value < best_cost) {
      best_cost = ev.cost.value;
      best_set = set;
    }

    const auto w = static_cast<std::size_t>(cfg.stall_window);
    if (window.size() > w) {
      const double old = window[window.size() - 1 - w];
      const double rel = (old - ev.cost.value) / std::max(std::abs(old), 1e-300);
      if (rel < cfg.stall_rel_tol) {
        rep.events.push_back({it, "stall", "relative improvement " + std::to_string(rel)});
        if (merged_once) {
          rep.stop_reason = "converged after merge";
          break;
        }
        merged_once = true;
        std::vector<MergeEvent> merges;
        std::vector<Pump> removed;
        set = best_set;
        const PumpSet merged = merge_pumps(set, cfg.merge_threshold_ghz, &merges);
        const PumpSet pruned = prune_pumps(merged, cfg.prune_below_mw, &removed);
        for (const auto& m : merges)
          rep.events.push_back({it, "merge",
                                std::string(group_name(m.group)) + " " + std::to_string(m.a.frequency_thz) + " + " +
                                    std::to_string(m.b.frequency_thz) + " -> " + std::to_string(m.merged.frequency_thz) +
                                    " THz, " + std::to_string(m.merged.power_mw) + " mW"});
        for (const auto& p : removed)
          rep.events.push_back({it, "prune",
                                std::string(group_name(p.group)) + " " + std::to_string(p.frequency_thz) + " THz, " +
                                    std::to_string(p.power_mw) + " mW"});
        if (merges.empty() && removed.empty()) {
          rep.stop_reason = "converged, nothing to merge or prune";
          break;
        }
        set = pruned;
        map.clear();
        x = pack_params(set, cfg, &map);
        project();
        set = unpack_params(set, x, map, cfg);
        adam = AdamState(x.size(), cfg.learning_rate);
        window.clear();
        best_cost = std::numeric_limits<double>::infinity();
        best_set = set;
        continue;
      }
    }
    if (it + 1 == cfg.max_iters) {
      rep.stop_reason = "max_iters";
      break;
    }
    adam_step(adam, x, g);
    project();
    set = unpack_params(set, x, map, cfg);
  }
  rep.final_pumps = best_set;
  finalize_report(rep, prob, cfg);
  return rep;
}

inline void to_json(nlohmann::json& j, const PenaltyTerms& p) {
  j = {{"f_floor", p.f_floor}, {"f_ceiling", p.f_ceiling}, {"p_max", p.p_max}, {"p_tot", p.p_tot}};
}

inline void to_json(nlohmann::json& j, const OptimizationReport& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : r.trace)
    trace.push_back({{"iteration", t.iteration}, {"cost", t.cost}, {"mse_db2", t.mse_db2}, {"penalties", t.penalties},
                     {"pumps", t.pumps}});
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : r.events) events.push_back({{"iteration", e.iteration}, {"kind", e.kind}, {"detail", e.detail}});
  j = {{"iterations", r.iterations},
       {"stop_reason", r.stop_reason},
       {"final_mse_db2", r.final_mse_db2},
       {"final_mae_db", r.final_mae_db},
       {"final_penalties", r.final_penalties},
       {"section1_total_dbm", r.section1_total_dbm},
       {"validity_warning", r.validity_warning},
       {"initial_pumps", r.initial},
       {"final_pumps", r.final_pumps},
       {"target_dbm", r.target_dbm},
       {"received_dbm", r.received_dbm},
       {"remote_arrival_dbm", r.remote_arrival_dbm},
       {"events", events},
       {"trace", trace}};
  if (r.failure) j["failure"] = *r.failure;
}

}  // namespace raman
