#pragma once

// Canonical units and domain types shared by every solver.
//
// Inside the solvers powers are linear mW, frequencies THz, lengths km and
// attenuation Np/km. Everything that crosses a file or CLI boundary is dBm,
// dB and dB/km.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace raman {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Direction { forward, backward };
enum class Role { channel, pump };

NLOHMANN_JSON_SERIALIZE_ENUM(Direction, {{Direction::forward, "forward"}, {Direction::backward, "backward"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Role, {{Role::channel, "channel"}, {Role::pump, "pump"}})

/// One propagating wave. For backward carriers `power_mw` is the power
/// launched at z = L, otherwise at z = 0.
struct Carrier {
  double frequency_thz = 193.0;
  double power_mw = 1.0;
  Direction direction = Direction::forward;
  Role role = Role::channel;
  double attenuation_db_per_km = 0.2;
};

struct FiberSpec {
  double length_km = 100.0;
  double effective_area_um2 = 80.0;
  double attenuation_db_per_km = 0.2;
  // Peak g_R / A_eff, already folded together.
  double raman_peak_efficiency_per_w_km = 0.39;
};

/// Power trajectories along z, one row per carrier.
struct PowerProfile {
  std::vector<double> z_km;
  std::vector<double> frequencies_thz;
  std::vector<Direction> directions;
  std::vector<std::vector<double>> powers_dbm;  // [carrier][position]

  std::size_t num_carriers() const { return frequencies_thz.size(); }
  std::size_t num_positions() const { return z_km.size(); }
};

inline constexpr double kDbPerNeper = 10.0 / std::numbers::ln10;

inline double dbm_to_mw(double p_dbm) {
  if (!std::isfinite(p_dbm)) throw Error("dbm_to_mw: non-finite input");
  return std::pow(10.0, p_dbm / 10.0);
}

/// Zero power maps to -inf dBm.
inline double mw_to_dbm(double p_mw) {
  if (std::isnan(p_mw) || p_mw < 0.0) throw Error("mw_to_dbm: power must be >= 0 mW");
  if (p_mw == 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(p_mw);
}

/// Power attenuation coefficient such that P(z) = P(0) exp(-a z).
inline double attenuation_np_per_km(double a_db_per_km) {
  if (!(a_db_per_km > 0.0) || !std::isfinite(a_db_per_km))
    throw Error("attenuation_np_per_km: attenuation must be > 0 dB/km");
  return a_db_per_km / kDbPerNeper;
}

// Solvers accept lossless carriers (used by conservation checks), so they
// convert through this instead of the strict public conversion above.
inline double loss_np_per_km(double a_db_per_km) {
  if (!(a_db_per_km >= 0.0) || !std::isfinite(a_db_per_km))
    throw Error("attenuation must be finite and >= 0 dB/km");
  return a_db_per_km / kDbPerNeper;
}

inline void validate(const Carrier& c) {
  if (!(c.frequency_thz > 0.0) || !std::isfinite(c.frequency_thz))
    throw Error("carrier frequency must be > 0 THz");
  if (!(c.power_mw >= 0.0) || !std::isfinite(c.power_mw)) throw Error("carrier power must be >= 0 mW");
  if (!(c.attenuation_db_per_km >= 0.0) || !std::isfinite(c.attenuation_db_per_km))
    throw Error("carrier attenuation must be >= 0 dB/km");
}

inline void validate(const FiberSpec& f) {
  if (!(f.length_km > 0.0)) throw Error("fiber length must be > 0 km");
  if (!(f.effective_area_um2 > 0.0)) throw Error("fiber effective area must be > 0 um^2");
  if (!(f.raman_peak_efficiency_per_w_km > 0.0)) throw Error("Raman peak efficiency must be > 0 1/(W km)");
  if (!(f.attenuation_db_per_km >= 0.0)) throw Error("fiber attenuation must be >= 0 dB/km");
}

/// Equal-power forward channels at first + k * spacing.
inline std::vector<Carrier> build_channel_grid(std::size_t n, double spacing_ghz, double first_thz,
                                               double per_channel_dbm, double attenuation_db_per_km = 0.2) {
  if (n < 1) throw Error("build_channel_grid: need at least one channel");
  if (!(spacing_ghz > 0.0)) throw Error("build_channel_grid: spacing must be > 0 GHz");
  const double p_mw = dbm_to_mw(per_channel_dbm);
  std::vector<Carrier> grid;
  grid.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Carrier c;
    c.frequency_thz = first_thz + static_cast<double>(k) * spacing_ghz * 1e-3;
    c.power_mw = p_mw;
    c.attenuation_db_per_km = attenuation_db_per_km;
    validate(c);
    grid.push_back(c);
  }
  return grid;
}

inline double total_power_mw(const std::vector<Carrier>& carriers) {
  double s = 0.0;
  for (const auto& c : carriers) s += c.power_mw;
  return s;
}

inline void to_json(nlohmann::json& j, const FiberSpec& f) {
  j = {{"length_km", f.length_km},
       {"effective_area_um2", f.effective_area_um2},
       {"attenuation_db_per_km", f.attenuation_db_per_km},
       {"raman_peak_efficiency_per_w_km", f.raman_peak_efficiency_per_w_km}};
}

inline void from_json(const nlohmann::json& j, FiberSpec& f) {
  FiberSpec d;
  f.length_km = j.value("length_km", d.length_km);
  f.effective_area_um2 = j.value("effective_area_um2", d.effective_area_um2);
  f.attenuation_db_per_km = j.value("attenuation_db_per_km", d.attenuation_db_per_km);
  f.raman_peak_efficiency_per_w_km = j.value("raman_peak_efficiency_per_w_km", d.raman_peak_efficiency_per_w_km);
  validate(f);
}

inline void to_json(nlohmann::json& j, const Carrier& c) {
  j = {{"frequency_thz", c.frequency_thz},
       {"power_dbm", mw_to_dbm(c.power_mw)},
       {"direction", c.direction},
       {"role", c.role},
       {"attenuation_db_per_km", c.attenuation_db_per_km}};
  if (c.power_mw == 0.0) j["power_dbm"] = nullptr;
}

inline void from_json(const nlohmann::json& j, Carrier& c) {
  c.frequency_thz = j.at("frequency_thz").get<double>();
  const auto& p = j.at("power_dbm");
  c.power_mw = p.is_null() ? 0.0 : dbm_to_mw(p.get<double>());
  c.direction = j.value("direction", Direction::forward);
  c.role = j.value("role", Role::channel);
  c.attenuation_db_per_km = j.value("attenuation_db_per_km", 0.2);
  validate(c);
}

}  // namespace raman
