#pragma once

// Pump sets and the two link topologies, recorded on a tape so the
// received channel powers are differentiable in the pump parameters.
//
// ropa:   [channels + forward pumps] over L1, remote pumps alone over a
//         separate delivery fiber, then [channels + arrived remote pumps]
//         over L2.
// hybrid: [channels + forward pumps] over L1, then per channel
//         -a L2 + G(backward pump powers) from the backward surrogate.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "raman/autodiff.hpp"
#include "raman/backward_gain.hpp"
#include "raman/srs_forward.hpp"
#include "raman/units.hpp"

namespace raman {

enum class PumpGroup { forward, remote, backward };

NLOHMANN_JSON_SERIALIZE_ENUM(PumpGroup, {{PumpGroup::forward, "forward"},
                                         {PumpGroup::remote, "remote"},
                                         {PumpGroup::backward, "backward"}})

inline const char* group_name(PumpGroup g) {
  switch (g) {
    case PumpGroup::forward: return "forward";
    case PumpGroup::remote: return "remote";
    case PumpGroup::backward: return "backward";
  }
  return "?";
}

struct Pump {
  double frequency_thz = 210.0;
  double power_mw = 100.0;
  PumpGroup group = PumpGroup::forward;
  bool optimize_frequency = true;
};

struct PumpSet {
  std::vector<Pump> pumps;

  std::size_t count(PumpGroup g) const {
    return static_cast<std::size_t>(std::count_if(pumps.begin(), pumps.end(), [g](const Pump& p) { return p.group == g; }));
  }
  double total_mw(PumpGroup g) const {
    double s = 0.0;
    for (const auto& p : pumps)
      if (p.group == g) s += p.power_mw;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const Pump& p) {
  j = {{"frequency_thz", p.frequency_thz},
       {"power_mw", p.power_mw},
       {"power_dbm", p.power_mw > 0.0 ? nlohmann::json(mw_to_dbm(p.power_mw)) : nlohmann::json(nullptr)},
       {"group", p.group},
       {"optimize_frequency", p.optimize_frequency}};
}

inline void from_json(const nlohmann::json& j, Pump& p) {
  p = Pump{};
  p.frequency_thz = j.at("frequency_thz");
  p.power_mw = j.at("power_mw");
  p.group = j.at("group");
  if (j.contains("optimize_frequency")) p.optimize_frequency = j.at("optimize_frequency");
  if (p.group == PumpGroup::backward) p.optimize_frequency = false;
  if (!(p.frequency_thz > 0.0) || !(p.power_mw >= 0.0)) throw Error("pump needs frequency > 0 and power >= 0");
}

inline void to_json(nlohmann::json& j, const PumpSet& s) { j = {{"pumps", s.pumps}}; }
inline void from_json(const nlohmann::json& j, PumpSet& s) { s.pumps = j.at("pumps").get<std::vector<Pump>>(); }

/// `n` pumps evenly spaced over [f_min, f_max] sharing `total_mw`.
inline std::vector<Pump> spread_pumps(std::size_t n, PumpGroup g, double f_min, double f_max, double total_mw) {
  std::vector<Pump> out;
  for (std::size_t i = 0; i < n; ++i) {
    Pump p;
    p.group = g;
    p.frequency_thz = n > 1 ? f_min + (f_max - f_min) * static_cast<double>(i) / static_cast<double>(n - 1)
                            : 0.5 * (f_min + f_max);
    p.power_mw = total_mw / static_cast<double>(n);
    out.push_back(p);
  }
  return out;
}

enum class LinkKind { ropa, hybrid };

NLOHMANN_JSON_SERIALIZE_ENUM(LinkKind, {{LinkKind::ropa, "ropa"}, {LinkKind::hybrid, "hybrid"}})

/// Launch shape: linear tilt plus one period of a sinusoid, in dB, scaled
/// to a total output power.
inline std::vector<double> edfa_profile(std::span<const double> channel_freqs, double total_dbm, double tilt_db = 1.0,
                                        double ripple_db = 0.75) {
  if (channel_freqs.empty()) throw Error("edfa_profile: no channels");
  const double lo = channel_freqs.front();
  const double span = channel_freqs.back() - lo;
  std::vector<double> shape;
  for (double f : channel_freqs) {
    const double t = span > 0.0 ? (f - lo) / span : 0.0;
    shape.push_back(tilt_db * (t - 0.5) + ripple_db * std::sin(2.0 * std::numbers::pi * t));
  }
  return shape_to_total(shape, total_dbm);
}

struct LinkTopology {
  LinkKind kind = LinkKind::ropa;
  double l1_km = 150.0;
  double l2_km = 100.0;
  FiberSpec fiber{};
  FiberSpec delivery_fiber{};
  double edfa_out_dbm = 15.0;
  std::vector<double> channel_freqs_thz = [] {
    std::vector<double> f;
    for (const auto& c : build_channel_grid(40, 100.0, 191.2, 0.0)) f.push_back(c.frequency_thz);
    return f;
  }();
  // Per-channel launch powers; empty means edfa_profile(...).
  std::vector<double> launch_dbm;
  // Section-1 channel total above which the surrogate is out of its regime.
  double hybrid_validity_dbm = 10.0;

  double total_km() const { return l1_km + l2_km; }
  std::vector<double> launch() const {
    if (!launch_dbm.empty()) {
      if (launch_dbm.size() != channel_freqs_thz.size()) throw Error("launch profile length differs from channel count");
      return launch_dbm;
    }
    return edfa_profile(channel_freqs_thz, edfa_out_dbm);
  }
  void check() const {
    if (!(l1_km > 0.0) || !(l2_km > 0.0)) throw Error("link section lengths must be > 0");
    validate(fiber);
    validate(delivery_fiber);
    if (channel_freqs_thz.empty()) throw Error("link has no channels");
  }
};

inline void to_json(nlohmann::json& j, const LinkTopology& t) {
  j = {{"kind", t.kind},
       {"l1_km", t.l1_km},
       {"l2_km", t.l2_km},
       {"fiber", t.fiber},
       {"delivery_fiber", t.delivery_fiber},
       {"edfa_out_dbm", t.edfa_out_dbm},
       {"channel_freqs_thz", t.channel_freqs_thz},
       {"launch_dbm", t.launch()},
       {"hybrid_validity_dbm", t.hybrid_validity_dbm}};
}

/// Tape variables of one pump. Inactive (zero-power) pumps have none.
struct PumpVars {
  bool active = false;
  ad::Var frequency_thz;
  ad::Var log_power_mw;
};

struct LinkOutput {
  std::vector<ad::Var> received_dbm;
  // Section-1 channel total (hybrid) or segment-A channel total (ropa).
  double section1_total_dbm = 0.0;
  bool validity_warning = false;
  std::vector<double> remote_arrival_dbm;
  // Profiles of each fiber piece, positions relative to the link input.
  std::vector<PowerProfile> profiles;
};

namespace detail {
struct SpanIo {
  std::vector<ad::Var> f;
  std::vector<ad::Var> x;
  std::vector<double> loss;
};

inline void add_pumps(SpanIo& io, const PumpSet& set, std::span<const PumpVars> vars, PumpGroup g, double loss) {
  for (std::size_t i = 0; i < set.pumps.size(); ++i) {
    if (set.pumps[i].group != g || !vars[i].active) continue;
    io.f.push_back(vars[i].frequency_thz);
    io.x.push_back(vars[i].log_power_mw);
    io.loss.push_back(loss);
  }
}

inline double channel_total_dbm(std::span<const ad::Var> log_p, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(log_p[i].value);
  return mw_to_dbm(s);
}
}  // namespace detail

/// Constants on `tape` for a fixed pump set.
inline std::vector<PumpVars> pump_constants(ad::Tape& tape, const PumpSet& set) {
  std::vector<PumpVars> out(set.pumps.size());
  for (std::size_t i = 0; i < set.pumps.size(); ++i) {
    if (!(set.pumps[i].power_mw > 0.0)) continue;
    out[i] = {true, tape.constant(set.pumps[i].frequency_thz), tape.constant(std::log(set.pumps[i].power_mw))};
  }
  return out;
}

inline LinkOutput model_link_ropa(ad::Tape& tape, const PumpSet& set, std::span<const PumpVars> vars,
                                  const LinkTopology& topo, const ForwardSolveConfig& solver, bool keep_profiles = false) {
  topo.check();
  if (vars.size() != set.pumps.size()) throw Error("model_link_ropa: one PumpVars per pump expected");
  for (const auto& p : set.pumps)
    if (p.group == PumpGroup::backward) throw Error("model_link_ropa: backward pumps need the hybrid topology");
  const auto launch = topo.launch();
  const std::size_t nc = launch.size();
  const double a_fiber = loss_np_per_km(topo.fiber.attenuation_db_per_km);
  const double a_deliv = loss_np_per_km(topo.delivery_fiber.attenuation_db_per_km);
  LinkOutput out;

  detail::SpanIo a;
  for (std::size_t i = 0; i < nc; ++i) {
    a.f.push_back(tape.constant(topo.channel_freqs_thz[i]));
    a.x.push_back(tape.constant(launch[i] / kDbPerNeper));
    a.loss.push_back(a_fiber);
  }
  detail::add_pumps(a, set, vars, PumpGroup::forward, a_fiber);
  FiberSpec f1 = topo.fiber;
  f1.length_km = topo.l1_km;
  SpanTrace tr;
  const auto end_a = record_span(a.f, a.x, a.loss, f1.length_km, solver, f1, keep_profiles ? &tr : nullptr);
  if (keep_profiles) out.profiles.push_back(to_profile(tr));
  out.section1_total_dbm = detail::channel_total_dbm(end_a, nc);

  detail::SpanIo d;
  detail::add_pumps(d, set, vars, PumpGroup::remote, a_deliv);
  std::vector<ad::Var> arrived;
  if (!d.f.empty()) {
    SpanTrace trd;
    arrived = record_span(d.f, d.x, d.loss, topo.delivery_fiber.length_km, solver, topo.delivery_fiber,
                          keep_profiles ? &trd : nullptr);
    if (keep_profiles) {
      // Delivery fiber runs from the receiver side towards the ROPA; positions are its own.
      out.profiles.push_back(to_profile(trd));
    }
    for (const auto& v : arrived) out.remote_arrival_dbm.push_back(v.value * kDbPerNeper);
  }

  detail::SpanIo b;
  for (std::size_t i = 0; i < nc; ++i) {
    b.f.push_back(a.f[i]);
    b.x.push_back(end_a[i]);
    b.loss.push_back(a_fiber);
  }
  for (std::size_t j = 0; j < arrived.size(); ++j) {
    b.f.push_back(d.f[j]);
    b.x.push_back(arrived[j]);
    b.loss.push_back(a_fiber);
  }
  FiberSpec f2 = topo.fiber;
  f2.length_km = topo.l2_km;
  SpanTrace tr2;
  const auto end_b = record_span(b.f, b.x, b.loss, f2.length_km, solver, f2, keep_profiles ? &tr2 : nullptr);
  if (keep_profiles) out.profiles.push_back(to_profile(tr2, topo.l1_km));
  for (std::size_t i = 0; i < nc; ++i) out.received_dbm.push_back(end_b[i] * kDbPerNeper);
  return out;
}

inline LinkOutput model_link_hybrid(ad::Tape& tape, const PumpSet& set, std::span<const PumpVars> vars,
                                    const LinkTopology& topo, const BackwardGainModel& bgm,
                                    const ForwardSolveConfig& solver, bool keep_profiles = false) {
  topo.check();
  if (vars.size() != set.pumps.size()) throw Error("model_link_hybrid: one PumpVars per pump expected");
  if (set.count(PumpGroup::remote) > 0) throw Error("model_link_hybrid: remote pumps need the ropa topology");
  if (set.count(PumpGroup::backward) != kBackwardPumps) throw Error("model_link_hybrid: exactly 4 backward pumps required");
  const auto launch = topo.launch();
  const std::size_t nc = launch.size();
  if (bgm.channel_freqs_thz.size() != nc) throw Error("model_link_hybrid: surrogate channel count differs from the link");
  for (std::size_t i = 0; i < nc; ++i)
    if (std::abs(bgm.channel_freqs_thz[i] - topo.channel_freqs_thz[i]) > 1e-6)
      throw Error("model_link_hybrid: surrogate channel grid differs from the link");
  const double a_fiber = loss_np_per_km(topo.fiber.attenuation_db_per_km);
  LinkOutput out;

  detail::SpanIo a;
  for (std::size_t i = 0; i < nc; ++i) {
    a.f.push_back(tape.constant(topo.channel_freqs_thz[i]));
    a.x.push_back(tape.constant(launch[i] / kDbPerNeper));
    a.loss.push_back(a_fiber);
  }
  detail::add_pumps(a, set, vars, PumpGroup::forward, a_fiber);
  FiberSpec f1 = topo.fiber;
  f1.length_km = topo.l1_km;
  SpanTrace tr;
  const auto end_a = record_span(a.f, a.x, a.loss, f1.length_km, solver, f1, keep_profiles ? &tr : nullptr);
  if (keep_profiles) out.profiles.push_back(to_profile(tr));
  out.section1_total_dbm = detail::channel_total_dbm(end_a, nc);
  out.validity_warning = out.section1_total_dbm > topo.hybrid_validity_dbm;

  std::vector<ad::Var> back_dbm;
  std::vector<std::pair<double, ad::Var>> by_freq;
  for (std::size_t i = 0; i < set.pumps.size(); ++i) {
    if (set.pumps[i].group != PumpGroup::backward) continue;
    if (!vars[i].active) throw Error("model_link_hybrid: backward pumps cannot be switched off");
    by_freq.emplace_back(set.pumps[i].frequency_thz, vars[i].log_power_mw * kDbPerNeper);
  }
  std::stable_sort(by_freq.begin(), by_freq.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  for (std::size_t k = 0; k < by_freq.size(); ++k) {
    if (std::abs(by_freq[k].first - bgm.pump_freqs_thz[k]) > 1e-6)
      throw Error("model_link_hybrid: backward pump frequencies differ from the surrogate's");
    back_dbm.push_back(by_freq[k].second);
  }
  const auto gain = predict_gain(bgm, back_dbm);
  const double loss_db = topo.fiber.attenuation_db_per_km * topo.l2_km;
  for (std::size_t i = 0; i < nc; ++i) out.received_dbm.push_back(end_a[i] * kDbPerNeper - loss_db + gain[i]);
  return out;
}

}  // namespace raman
