#pragma once

// Scenario configuration, cached prerequisite stages, oracle validation and
// artifact emission for the two link designs.

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "raman/backward_gain.hpp"
#include "raman/io.hpp"
#include "raman/link.hpp"
#include "raman/pump_optimizer.hpp"
#include "raman/raman_gain.hpp"
#include "raman/srs_bvp.hpp"
#include "raman/srs_forward.hpp"

#ifndef RAMAN_DATA_DIR
#define RAMAN_DATA_DIR "data"
#endif

namespace raman {

namespace fs = std::filesystem;

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems(std::move(problems)) {}
  std::vector<std::string> problems;

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid scenario configuration:";
    for (const auto& x : p) s += "\n  - " + x;
    return s;
  }
};

enum class ValidationMode { neural_gr, linear_gr };

NLOHMANN_JSON_SERIALIZE_ENUM(ValidationMode, {{ValidationMode::neural_gr, "neural_gr"},
                                              {ValidationMode::linear_gr, "linear_gr"}})

struct ValidationSettings {
  double oracle_dz_km = 1e-3;
  double bvp_dz_km = 0.05;
  double bvp_tol_db = 1e-4;
  int bvp_max_sweeps = 50;
  std::vector<ValidationMode> modes{ValidationMode::neural_gr, ValidationMode::linear_gr};
};

struct ScenarioConfig {
  std::string name = "scenario";
  LinkTopology topology;
  double target_dbm_per_channel = -26.0;
  std::size_t forward_pumps = 0;
  std::size_t remote_pumps = 0;
  double backward_init_dbm = 10.0;
  OptimizerConfig optimizer;
  GainFitConfig gain_fit;
  BackwardAmpSpec amp;
  DatasetConfig dataset;
  BackwardTrainConfig train;
  ValidationSettings validation;
  fs::path gain_table = fs::path(RAMAN_DATA_DIR) / "ssmf_gr.csv";
  std::optional<fs::path> cache_dir;
  std::optional<fs::path> launch_csv;

  bool hybrid() const { return topology.kind == LinkKind::hybrid; }
  std::vector<double> target() const {
    return std::vector<double>(topology.channel_freqs_thz.size(), target_dbm_per_channel);
  }
};

namespace detail {

/// Collects every problem instead of stopping at the first.
class ConfigReader {
 public:
  std::vector<std::string> problems;

  void known(const nlohmann::json& obj, const std::string& path, std::initializer_list<const char*> keys) {
    if (!obj.is_object()) {
      problems.push_back(path + ": expected an object");
      return;
    }
    std::set<std::string> k;
    for (const char* x : keys) k.insert(x);
    for (const auto& [key, _] : obj.items())
      if (!k.count(key)) problems.push_back(path + "." + key + ": unknown field");
  }

  template <class T>
  void read(const nlohmann::json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.is_object() || !obj.contains(key)) return;
    try {
      out = obj.at(key).get<T>();
    } catch (const std::exception& e) {
      problems.push_back(path + "." + key + ": " + e.what());
    }
  }

  void number(const nlohmann::json& obj, const std::string& path, const char* key, double& out, double lo, double hi,
              bool open_lo = false) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_number()) {
      problems.push_back(path + "." + key + ": expected a number");
      return;
    }
    const double d = v.get<double>();
    if (!(open_lo ? d > lo : d >= lo) || !(d <= hi)) {
      std::ostringstream os;
      os << path << "." << key << ": " << d << " outside " << (open_lo ? "(" : "[") << lo << ", " << hi << "]";
      problems.push_back(os.str());
      return;
    }
    out = d;
  }

  template <class I>
  void integer(const nlohmann::json& obj, const std::string& path, const char* key, I& out, long long lo, long long hi) {
    if (!obj.is_object() || !obj.contains(key)) return;
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) {
      problems.push_back(path + "." + key + ": expected an integer");
      return;
    }
    const auto d = v.get<long long>();
    if (d < lo || d > hi) {
      problems.push_back(path + "." + key + ": " + std::to_string(d) + " outside [" + std::to_string(lo) + ", " +
                         std::to_string(hi) + "]");
      return;
    }
    out = static_cast<I>(d);
  }

  const nlohmann::json& section(const nlohmann::json& obj, const std::string& path, const char* key) {
    static const nlohmann::json empty = nlohmann::json::object();
    if (!obj.is_object() || !obj.contains(key)) return empty;
    if (!obj.at(key).is_object()) {
      problems.push_back(path + "." + key + ": expected an object");
      return empty;
    }
    return obj.at(key);
  }
};

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

inline std::vector<double> read_launch_csv(const fs::path& path, std::size_t channels) {
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<double> out;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (header) {
      header = false;
      if (!cells.empty() && !cells[0].empty() && !std::isdigit(static_cast<unsigned char>(cells[0][0])) &&
          cells[0][0] != '-')
        continue;
    }
    out.push_back(std::stod(cells.back()));
  }
  if (out.size() != channels)
    throw Error("launch profile " + path.string() + " has " + std::to_string(out.size()) + " rows, expected " +
                std::to_string(channels));
  return out;
}

}  // namespace detail

/// Parses a scenario; relative paths are taken from `base_dir`.
inline ScenarioConfig parse_scenario(const nlohmann::json& j, const fs::path& base_dir = ".") {
  detail::ConfigReader r;
  ScenarioConfig c;
  const double inf = std::numeric_limits<double>::infinity();
  r.known(j, "config",
          {"name", "seed", "topology", "target_dbm_per_channel", "pumps", "optimizer", "gain_fit", "backward", "paths",
           "validation"});
  r.read(j, "config", "name", c.name);
  if (!j.is_object() || !j.contains("target_dbm_per_channel"))
    r.problems.push_back("config.target_dbm_per_channel: required");
  r.number(j, "config", "target_dbm_per_channel", c.target_dbm_per_channel, -100.0, 40.0);

  const auto& topo = r.section(j, "config", "topology");
  if (!j.is_object() || !j.contains("topology")) r.problems.push_back("config.topology: required");
  r.known(topo, "topology",
          {"kind", "l1_km", "l2_km", "edfa_out_dbm", "fiber", "delivery_fiber", "channels", "launch_csv",
           "hybrid_validity_dbm"});
  if (topo.contains("kind")) {
    const auto& k = topo.at("kind");
    if (k == "ropa")
      c.topology.kind = LinkKind::ropa;
    else if (k == "hybrid")
      c.topology.kind = LinkKind::hybrid;
    else
      r.problems.push_back("topology.kind: expected \"ropa\" or \"hybrid\"");
  } else {
    r.problems.push_back("topology.kind: required");
  }
  r.number(topo, "topology", "l1_km", c.topology.l1_km, 0.0, 1000.0, true);
  r.number(topo, "topology", "l2_km", c.topology.l2_km, 0.0, 1000.0, true);
  r.number(topo, "topology", "edfa_out_dbm", c.topology.edfa_out_dbm, -30.0, 40.0);
  r.number(topo, "topology", "hybrid_validity_dbm", c.topology.hybrid_validity_dbm, -inf, inf);
  r.read(topo, "topology", "fiber", c.topology.fiber);
  r.read(topo, "topology", "delivery_fiber", c.topology.delivery_fiber);
  if (!topo.contains("delivery_fiber")) c.topology.delivery_fiber.length_km = c.topology.l2_km;
  const auto& ch = r.section(topo, "topology", "channels");
  r.known(ch, "topology.channels", {"count", "spacing_ghz", "first_thz"});
  std::size_t n_ch = 40;
  double spacing = 100.0;
  double first = 191.2;
  r.integer(ch, "topology.channels", "count", n_ch, 1, 1000);
  r.number(ch, "topology.channels", "spacing_ghz", spacing, 0.0, 1e4, true);
  r.number(ch, "topology.channels", "first_thz", first, 0.0, 1000.0, true);
  c.topology.channel_freqs_thz.clear();
  for (const auto& carrier : build_channel_grid(n_ch, spacing, first, 0.0))
    c.topology.channel_freqs_thz.push_back(carrier.frequency_thz);
  if (topo.contains("launch_csv")) {
    if (topo.at("launch_csv").is_string())
      c.launch_csv = detail::resolve(base_dir, topo.at("launch_csv").get<std::string>());
    else
      r.problems.push_back("topology.launch_csv: expected a path string");
  }

  const auto& pumps = r.section(j, "config", "pumps");
  r.known(pumps, "pumps", {"forward", "remote", "backward_init_dbm"});
  r.integer(pumps, "pumps", "forward", c.forward_pumps, 0, 200);
  r.integer(pumps, "pumps", "remote", c.remote_pumps, 0, 200);
  r.number(pumps, "pumps", "backward_init_dbm", c.backward_init_dbm, -inf, inf);

  auto& o = c.optimizer;
  const auto& opt = r.section(j, "config", "optimizer");
  r.known(opt, "optimizer",
          {"learning_rate", "max_iters", "merge_threshold_ghz", "prune_below_mw", "stall_window", "stall_rel_tol",
           "penalty_weight", "f_min_thz", "f_max_thz", "p_max_w", "p_tot_w", "dz_km", "step_rule"});
  r.number(opt, "optimizer", "learning_rate", o.learning_rate, 0.0, 10.0, true);
  r.integer(opt, "optimizer", "max_iters", o.max_iters, 1, 1000000);
  r.number(opt, "optimizer", "merge_threshold_ghz", o.merge_threshold_ghz, 0.0, 1e5);
  r.number(opt, "optimizer", "prune_below_mw", o.prune_below_mw, 0.0, 1e5);
  r.integer(opt, "optimizer", "stall_window", o.stall_window, 1, 100000);
  r.number(opt, "optimizer", "stall_rel_tol", o.stall_rel_tol, 0.0, 1.0, true);
  r.number(opt, "optimizer", "penalty_weight", o.penalty_weight, 0.0, 1e9, true);
  r.number(opt, "optimizer", "f_min_thz", o.f_min_thz, 0.0, 1000.0, true);
  r.number(opt, "optimizer", "f_max_thz", o.f_max_thz, 0.0, 1000.0, true);
  r.number(opt, "optimizer", "dz_km", o.solver.dz_km, 0.0, 100.0, true);
  r.read(opt, "optimizer", "step_rule", o.solver.step_rule);
  if (o.f_max_thz <= o.f_min_thz) r.problems.push_back("optimizer: f_max_thz must exceed f_min_thz");
  const auto& pmax = r.section(opt, "optimizer", "p_max_w");
  r.known(pmax, "optimizer.p_max_w", {"forward", "remote", "backward"});
  r.number(pmax, "optimizer.p_max_w", "forward", o.forward.p_max_w, 0.0, 100.0, true);
  r.number(pmax, "optimizer.p_max_w", "remote", o.remote.p_max_w, 0.0, 100.0, true);
  r.number(pmax, "optimizer.p_max_w", "backward", o.backward.p_max_w, 0.0, 100.0, true);
  const auto& ptot = r.section(opt, "optimizer", "p_tot_w");
  r.known(ptot, "optimizer.p_tot_w", {"forward", "remote", "backward"});
  for (auto [key, lim] : {std::pair{"forward", &o.forward}, std::pair{"remote", &o.remote}, std::pair{"backward", &o.backward}}) {
    double v = 0.0;
    if (!ptot.contains(key)) continue;
    r.number(ptot, "optimizer.p_tot_w", key, v, 0.0, 1000.0, true);
    if (v > 0.0) lim->p_tot_w = v;
  }

  std::optional<std::uint64_t> seed;
  if (j.is_object() && j.contains("seed")) {
    std::uint64_t s = 0;
    r.integer(j, "config", "seed", s, 0, std::numeric_limits<long long>::max());
    seed = s;
  }
  const auto& gf = r.section(j, "config", "gain_fit");
  r.known(gf, "gain_fit", {"epochs", "batch_size", "learning_rate", "final_learning_rate", "sample_spacing_thz", "seed",
                           "mse_threshold"});
  if (seed) c.gain_fit.seed = *seed;
  r.integer(gf, "gain_fit", "epochs", c.gain_fit.epochs, 1, 10000000);
  r.integer(gf, "gain_fit", "batch_size", c.gain_fit.batch_size, 1, 1000000);
  r.number(gf, "gain_fit", "learning_rate", c.gain_fit.learning_rate, 0.0, 10.0, true);
  r.number(gf, "gain_fit", "final_learning_rate", c.gain_fit.final_learning_rate, 0.0, 10.0, true);
  r.number(gf, "gain_fit", "sample_spacing_thz", c.gain_fit.sample_spacing_thz, 0.0, 10.0, true);
  r.number(gf, "gain_fit", "mse_threshold", c.gain_fit.mse_threshold, 0.0, 1.0, true);
  r.integer(gf, "gain_fit", "seed", c.gain_fit.seed, 0, std::numeric_limits<long long>::max());

  const auto& bw = r.section(j, "config", "backward");
  r.known(bw, "backward", {"grid_points", "random_rows", "dataset_seed", "train_seed", "epochs", "batch_size",
                           "learning_rate", "final_learning_rate", "threads", "bvp_dz_km"});
  if (seed) c.dataset.seed = c.train.seed = *seed;
  r.integer(bw, "backward", "grid_points", c.dataset.grid_points, 2, 100);
  r.integer(bw, "backward", "random_rows", c.dataset.random_rows, 0, 10000000);
  r.integer(bw, "backward", "dataset_seed", c.dataset.seed, 0, std::numeric_limits<long long>::max());
  r.integer(bw, "backward", "train_seed", c.train.seed, 0, std::numeric_limits<long long>::max());
  r.integer(bw, "backward", "epochs", c.train.epochs, 1, 10000000);
  r.integer(bw, "backward", "batch_size", c.train.batch_size, 1, 1000000);
  r.number(bw, "backward", "learning_rate", c.train.learning_rate, 0.0, 10.0, true);
  r.number(bw, "backward", "final_learning_rate", c.train.final_learning_rate, 0.0, 10.0, true);
  r.integer(bw, "backward", "threads", c.dataset.threads, 0, 4096);
  r.number(bw, "backward", "bvp_dz_km", c.dataset.bvp.dz_km, 0.0, 100.0, true);

  const auto& paths = r.section(j, "config", "paths");
  r.known(paths, "paths", {"gain_table", "cache_dir"});
  if (paths.contains("gain_table")) {
    if (paths.at("gain_table").is_string())
      c.gain_table = detail::resolve(base_dir, paths.at("gain_table").get<std::string>());
    else
      r.problems.push_back("paths.gain_table: expected a path string");
  }
  if (paths.contains("cache_dir")) {
    if (paths.at("cache_dir").is_string())
      c.cache_dir = detail::resolve(base_dir, paths.at("cache_dir").get<std::string>());
    else
      r.problems.push_back("paths.cache_dir: expected a path string");
  }

  const auto& val = r.section(j, "config", "validation");
  r.known(val, "validation", {"oracle_dz_km", "bvp_dz_km", "modes"});
  r.number(val, "validation", "oracle_dz_km", c.validation.oracle_dz_km, 0.0, 100.0, true);
  r.number(val, "validation", "bvp_dz_km", c.validation.bvp_dz_km, 0.0, 100.0, true);
  r.read(val, "validation", "modes", c.validation.modes);

  if (c.topology.kind == LinkKind::ropa) {
    if (c.forward_pumps + c.remote_pumps == 0) r.problems.push_back("pumps: ropa topology needs forward or remote pumps");
  } else {
    if (c.remote_pumps > 0) r.problems.push_back("pumps.remote: hybrid topology has no remote pumps");
    if (c.topology.channel_freqs_thz.size() != c.amp.load.size())
      r.problems.push_back("topology.channels: hybrid topology needs the backward amplifier's 40-channel grid");
    if (c.backward_init_dbm < c.amp.min_power_dbm || c.backward_init_dbm > c.amp.max_power_dbm)
      r.problems.push_back("pumps.backward_init_dbm: outside the backward model range [0, 21] dBm");
  }
  if (!r.problems.empty()) throw ConfigError(r.problems);

  if (c.launch_csv) c.topology.launch_dbm = detail::read_launch_csv(*c.launch_csv, c.topology.channel_freqs_thz.size());
  return c;
}

inline ScenarioConfig load_scenario(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  } catch (const Error& e) {
    throw ConfigError({e.what()});
  }
  return parse_scenario(j, path.parent_path());
}

/// Initial pump set: forward/remote evenly spread over the frequency range
/// at P_max / N each, backward at the fixed frequencies.
inline PumpSet initial_pumps(const ScenarioConfig& c) {
  PumpSet s;
  const auto& o = c.optimizer;
  auto f = spread_pumps(c.forward_pumps, PumpGroup::forward, o.f_min_thz, o.f_max_thz, o.forward.p_max_w * 1e3);
  auto r = spread_pumps(c.remote_pumps, PumpGroup::remote, o.f_min_thz, o.f_max_thz, o.remote.p_max_w * 1e3);
  s.pumps.insert(s.pumps.end(), f.begin(), f.end());
  s.pumps.insert(s.pumps.end(), r.begin(), r.end());
  if (c.hybrid()) {
    for (double fb : c.amp.pump_freqs_thz) {
      Pump p;
      p.group = PumpGroup::backward;
      p.frequency_thz = fb;
      p.power_mw = dbm_to_mw(c.backward_init_dbm);
      p.optimize_frequency = false;
      s.pumps.push_back(p);
    }
  }
  return s;
}

// Cached stages.

using Logger = std::function<void(const std::string&)>;

inline fs::path cache_dir_for(const ScenarioConfig& c, const fs::path& out_dir) {
  return c.cache_dir ? *c.cache_dir : out_dir / "cache";
}

inline nlohmann::json gain_fit_key(const RamanGainTable& t, const GainFitConfig& g) {
  return {{"table", table_fingerprint(t)},     {"hidden", g.hidden},
          {"epochs", g.epochs},                {"batch_size", g.batch_size},
          {"learning_rate", g.learning_rate},  {"final_learning_rate", g.final_learning_rate},
          {"spacing", g.sample_spacing_thz},   {"holdout", g.holdout_points},
          {"input_scale", g.input_scale_thz},  {"threshold", g.mse_threshold},
          {"seed", g.seed}};
}

inline fs::path gain_cache_path(const ScenarioConfig& c, const fs::path& cache) {
  const auto table = load_gain_table(c.gain_table.string());
  return cache / ("gr_" + hex64(fnv1a(gain_fit_key(table, c.gain_fit).dump())) + ".json");
}

inline GainInterpolator ensure_gain_interpolator(const ScenarioConfig& c, const fs::path& cache, const Logger& log = {}) {
  const auto table = load_gain_table(c.gain_table.string());
  const auto path = gain_cache_path(c, cache);
  if (fs::exists(path)) {
    if (log) log("g_R interpolant: cached " + path.string());
    return gain_interpolator_from_json(nlohmann::json::parse(read_file(path)));
  }
  if (log) log("g_R interpolant: fitting (" + std::to_string(c.gain_fit.epochs) + " epochs)");
  auto g = fit_neural_interpolator(table, c.gain_fit);
  nlohmann::json j;
  to_json(j, g);
  write_file_atomic(path, j.dump());
  if (log) log("g_R interpolant: held-out MSE " + std::to_string(g.heldout_mse()));
  return g;
}

inline DatasetConfig dataset_config(const ScenarioConfig& c) {
  DatasetConfig d = c.dataset;
  d.bvp.interpolator = std::make_shared<const GainInterpolator>(GainInterpolator::linear(load_gain_table(c.gain_table.string())));
  return d;
}

/// Cache stem of the dataset; `<stem>.csv` and `<stem>.json` on disk.
inline fs::path dataset_cache_stem(const ScenarioConfig& c, const fs::path& cache) {
  return cache / ("bwd_dataset_" + dataset_hash(c.amp, dataset_config(c)));
}

inline GainDataset ensure_dataset(const ScenarioConfig& c, const fs::path& cache, const Logger& log = {}) {
  const auto cfg = dataset_config(c);
  const auto stem = dataset_cache_stem(c, cache);
  auto csv = stem;
  csv += ".csv";
  if (fs::exists(csv)) {
    if (log) log("backward dataset: cached " + csv.string());
    return load_dataset(stem);
  }
  if (log) log("backward dataset: solving " + std::to_string(cfg.grid_points * cfg.grid_points * cfg.grid_points * cfg.grid_points + cfg.random_rows) + " rows");
  auto ds = generate_dataset(c.amp, cfg);
  save_dataset(ds, stem);
  if (log) log("backward dataset: " + std::to_string(ds.size()) + " rows, " + std::to_string(ds.excluded_rows) + " excluded");
  return ds;
}

inline fs::path backward_model_cache_path(const ScenarioConfig& c, const fs::path& cache) {
  const auto& t = c.train;
  const nlohmann::json key = {{"dataset", dataset_hash(c.amp, dataset_config(c))}, {"hidden", t.hidden},
                              {"epochs", t.epochs}, {"batch_size", t.batch_size},
                              {"learning_rate", t.learning_rate}, {"final_learning_rate", t.final_learning_rate},
                              {"holdout", t.holdout_fraction}, {"seed", t.seed}};
  return cache / ("bwd_model_" + hex64(fnv1a(key.dump())) + ".json");
}

inline BackwardGainModel ensure_backward_model(const ScenarioConfig& c, const fs::path& cache, const Logger& log = {}) {
  const auto ds = ensure_dataset(c, cache, log);
  const auto& t = c.train;
  const auto path = backward_model_cache_path(c, cache);
  if (fs::exists(path)) {
    if (log) log("backward model: cached " + path.string());
    return nlohmann::json::parse(read_file(path)).get<BackwardGainModel>();
  }
  if (log) log("backward model: training (" + std::to_string(t.epochs) + " epochs)");
  auto m = train_backward_model(ds, t, c.amp);
  write_file_atomic(path, nlohmann::json(m).dump());
  if (log) log("backward model: held-out MSE " + std::to_string(m.mse_db2) + " dB^2, MAE " + std::to_string(m.mae_db) + " dB");
  return m;
}

// Validation.

struct ValidationReport {
  ValidationMode mode = ValidationMode::neural_gr;
  std::vector<double> freqs_thz;
  std::vector<double> target_dbm;
  std::vector<double> model_dbm;
  std::vector<double> oracle_dbm;
  double mae_db = 0.0;   // max |oracle - target|
  double mse_db2 = 0.0;  // mean (oracle - target)^2
  double max_model_oracle_db = 0.0;
  // Hybrid only: largest channel difference at the end of section 1.
  std::optional<double> section1_max_diff_db;
};

inline void to_json(nlohmann::json& j, const ValidationReport& v) {
  j = {{"mode", v.mode},           {"mae_db", v.mae_db},
       {"mse_db2", v.mse_db2},     {"max_model_oracle_db", v.max_model_oracle_db},
       {"freqs_thz", v.freqs_thz}, {"target_dbm", v.target_dbm},
       {"model_dbm", v.model_dbm}, {"oracle_dbm", v.oracle_dbm}};
  if (v.section1_max_diff_db) j["section1_max_diff_db"] = *v.section1_max_diff_db;
}

namespace detail {
inline std::vector<Carrier> channel_carriers(const LinkTopology& t) {
  std::vector<Carrier> out;
  const auto launch = t.launch();
  for (std::size_t i = 0; i < launch.size(); ++i) {
    Carrier c;
    c.frequency_thz = t.channel_freqs_thz[i];
    c.power_mw = dbm_to_mw(launch[i]);
    c.attenuation_db_per_km = t.fiber.attenuation_db_per_km;
    out.push_back(c);
  }
  return out;
}

inline std::vector<Carrier> pump_carriers(const PumpSet& s, PumpGroup g, Direction d, double att) {
  std::vector<Carrier> out;
  for (const auto& p : s.pumps) {
    if (p.group != g || !(p.power_mw > 0.0)) continue;
    Carrier c;
    c.frequency_thz = p.frequency_thz;
    c.power_mw = p.power_mw;
    c.direction = d;
    c.role = Role::pump;
    c.attenuation_db_per_km = att;
    out.push_back(c);
  }
  return out;
}
}  // namespace detail

/// Oracle received powers. ropa: fine-step RK4 per fiber piece. hybrid: one
/// BVP over the whole L1 + L2 span. `g` is the gain curve the oracle uses.
inline std::vector<double> oracle_received(const PumpSet& pumps, const LinkTopology& topo,
                                           const std::shared_ptr<const GainInterpolator>& g, const ValidationSettings& vs,
                                           std::vector<double>* section1_dbm = nullptr) {
  topo.check();
  const auto ch = detail::channel_carriers(topo);
  const std::size_t nc = ch.size();
  const double att = topo.fiber.attenuation_db_per_km;
  if (topo.kind == LinkKind::ropa) {
    OracleConfig oc;
    oc.dz_km = vs.oracle_dz_km;
    oc.interpolator = g;
    auto seg_a = ch;
    const auto fwd = detail::pump_carriers(pumps, PumpGroup::forward, Direction::forward, att);
    seg_a.insert(seg_a.end(), fwd.begin(), fwd.end());
    FiberSpec f1 = topo.fiber;
    f1.length_km = topo.l1_km;
    const auto out_a = propagate_span_oracle(seg_a, f1, oc).output_dbm;
    if (section1_dbm) section1_dbm->assign(out_a.begin(), out_a.begin() + static_cast<std::ptrdiff_t>(nc));
    auto seg_b = ch;
    for (std::size_t i = 0; i < nc; ++i) seg_b[i].power_mw = dbm_to_mw(out_a[i]);
    auto remote = detail::pump_carriers(pumps, PumpGroup::remote, Direction::forward, topo.delivery_fiber.attenuation_db_per_km);
    if (!remote.empty()) {
      const auto arrived = propagate_span_oracle(remote, topo.delivery_fiber, oc).output_dbm;
      for (std::size_t j = 0; j < remote.size(); ++j) {
        remote[j].power_mw = dbm_to_mw(arrived[j]);
        remote[j].attenuation_db_per_km = att;
        seg_b.push_back(remote[j]);
      }
    }
    FiberSpec f2 = topo.fiber;
    f2.length_km = topo.l2_km;
    const auto out_b = propagate_span_oracle(seg_b, f2, oc).output_dbm;
    return {out_b.begin(), out_b.begin() + static_cast<std::ptrdiff_t>(nc)};
  }
  auto fwd = ch;
  const auto fp = detail::pump_carriers(pumps, PumpGroup::forward, Direction::forward, att);
  fwd.insert(fwd.end(), fp.begin(), fp.end());
  const auto bwd = detail::pump_carriers(pumps, PumpGroup::backward, Direction::backward, att);
  FiberSpec f = topo.fiber;
  f.length_km = topo.total_km();
  BvpConfig bc;
  bc.dz_km = vs.bvp_dz_km;
  bc.tol_db = vs.bvp_tol_db;
  bc.max_sweeps = vs.bvp_max_sweeps;
  bc.interpolator = g;
  const auto res = solve_bvp(fwd, bwd, f, bc);
  std::vector<double> out;
  for (std::size_t i = 0; i < nc; ++i) out.push_back(res.profile.powers_dbm[i].back());
  if (section1_dbm) {
    const auto& z = res.profile.z_km;
    const auto k = static_cast<std::size_t>(std::min_element(z.begin(), z.end(), [&](double a, double b) {
                                              return std::abs(a - topo.l1_km) < std::abs(b - topo.l1_km);
                                            }) - z.begin());
    section1_dbm->clear();
    for (std::size_t i = 0; i < nc; ++i) section1_dbm->push_back(res.profile.powers_dbm[i][k]);
  }
  return out;
}

/// Model received powers and section-1 channel powers for a fixed pump set.
struct ModelEval {
  std::vector<double> received_dbm;
  std::vector<double> section1_dbm;
  LinkOutput link;
};

inline ModelEval model_received(const PumpSet& pumps, const LinkTopology& topo, const ForwardSolveConfig& solver,
                                const BackwardGainModel* bgm, bool keep_profiles = false) {
  ad::Tape tape;
  const auto vars = pump_constants(tape, pumps);
  ModelEval m;
  if (topo.kind == LinkKind::ropa) {
    m.link = model_link_ropa(tape, pumps, vars, topo, solver, keep_profiles);
  } else {
    if (!bgm) throw Error("hybrid model needs a backward gain model");
    m.link = model_link_hybrid(tape, pumps, vars, topo, *bgm, solver, keep_profiles);
  }
  for (const auto& v : m.link.received_dbm) m.received_dbm.push_back(v.value);
  return m;
}

inline ValidationReport validate_design(const PumpSet& pumps, const LinkTopology& topo, std::span<const double> target,
                                        std::span<const double> model_dbm, ValidationMode mode,
                                        const RamanGainTable& table, const ValidationSettings& vs,
                                        std::span<const double> model_section1 = {}) {
  auto g = std::make_shared<const GainInterpolator>(mode == ValidationMode::neural_gr ? GainInterpolator::linear(table)
                                                                                      : GainInterpolator::linear_fit(table));
  ValidationReport v;
  v.mode = mode;
  v.freqs_thz = topo.channel_freqs_thz;
  v.target_dbm.assign(target.begin(), target.end());
  v.model_dbm.assign(model_dbm.begin(), model_dbm.end());
  std::vector<double> s1;
  v.oracle_dbm = oracle_received(pumps, topo, g, vs, &s1);
  if (v.oracle_dbm.size() != target.size()) throw Error("validate: target length differs from channel count");
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double e = v.oracle_dbm[i] - target[i];
    v.mae_db = std::max(v.mae_db, std::abs(e));
    v.mse_db2 += e * e / static_cast<double>(target.size());
    if (!model_dbm.empty()) v.max_model_oracle_db = std::max(v.max_model_oracle_db, std::abs(v.oracle_dbm[i] - model_dbm[i]));
  }
  if (topo.kind == LinkKind::hybrid && model_section1.size() == s1.size() && !s1.empty()) {
    double d = 0.0;
    for (std::size_t i = 0; i < s1.size(); ++i) d = std::max(d, std::abs(s1[i] - model_section1[i]));
    v.section1_max_diff_db = d;
  }
  return v;
}

inline std::string validation_csv(const ValidationReport& v) {
  std::ostringstream os;
  os << "f_thz,target_dbm,model_dbm,oracle_dbm\n";
  for (std::size_t i = 0; i < v.freqs_thz.size(); ++i)
    os << fmt_double(v.freqs_thz[i]) << ',' << fmt_double(v.target_dbm[i]) << ','
       << (v.model_dbm.empty() ? std::string() : fmt_double(v.model_dbm[i])) << ',' << fmt_double(v.oracle_dbm[i]) << '\n';
  return os.str();
}

// End-to-end run.

struct ScenarioResult {
  OptimizationReport report;
  std::vector<ValidationReport> validations;
  std::optional<BackwardGainModel> backward_model;
  double gain_fit_mse = 0.0;
  double optimize_seconds = 0.0;
  nlohmann::json report_json;
};

inline std::string profile_csv(const std::vector<PowerProfile>& profiles, const LinkTopology& topo) {
  std::ostringstream os;
  os << "z_km,f_thz,p_dbm\n";
  // Delivery fiber (ropa, second profile) has its own coordinates and is left out.
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    if (topo.kind == LinkKind::ropa && profiles.size() == 3 && k == 1) continue;
    const auto& p = profiles[k];
    for (std::size_t c = 0; c < p.num_carriers(); ++c)
      for (std::size_t s = 0; s < p.num_positions(); ++s)
        os << fmt_double(p.z_km[s]) << ',' << fmt_double(p.frequencies_thz[c]) << ',' << fmt_double(p.powers_dbm[c][s]) << '\n';
  }
  return os.str();
}

inline std::string trace_csv(const OptimizationReport& r) {
  std::ostringstream os;
  os << "iteration,cost,mse_db2,penalty,pumps\n";
  for (const auto& t : r.trace)
    os << t.iteration << ',' << fmt_double(t.cost) << ',' << fmt_double(t.mse_db2) << ',' << fmt_double(t.penalties.sum())
       << ',' << t.pumps << '\n';
  return os.str();
}

inline std::string summary_csv(const ScenarioResult& s) {
  const auto& r = s.report;
  std::ostringstream os;
  os << "key,value\n";
  os << "iterations," << r.iterations << '\n';
  os << "stop_reason," << r.stop_reason << '\n';
  os << "final_mse_db2," << fmt_double(r.final_mse_db2) << '\n';
  os << "final_mae_db," << fmt_double(r.final_mae_db) << '\n';
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (double v : r.received_dbm) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  os << "received_peak_to_peak_db," << fmt_double(hi - lo) << '\n';
  for (PumpGroup g : {PumpGroup::forward, PumpGroup::remote, PumpGroup::backward}) {
    os << "initial_" << group_name(g) << "_pumps," << r.initial.count(g) << '\n';
    os << "final_" << group_name(g) << "_pumps," << r.final_pumps.count(g) << '\n';
    os << "final_" << group_name(g) << "_total_w," << fmt_double(r.final_pumps.total_mw(g) * 1e-3) << '\n';
  }
  os << "section1_total_dbm," << fmt_double(r.section1_total_dbm) << '\n';
  os << "validity_warning," << (r.validity_warning ? "true" : "false") << '\n';
  for (const auto& v : s.validations) {
    const std::string m = nlohmann::json(v.mode).get<std::string>();
    os << "validation_" << m << "_mae_db," << fmt_double(v.mae_db) << '\n';
    os << "validation_" << m << "_mse_db2," << fmt_double(v.mse_db2) << '\n';
  }
  return os.str();
}

inline nlohmann::json scenario_report_json(const ScenarioConfig& c, const ScenarioResult& s) {
  nlohmann::json j;
  j["name"] = c.name;
  j["topology"] = c.topology;
  j["target_dbm_per_channel"] = c.target_dbm_per_channel;
  j["optimization"] = s.report;
  j["validation"] = s.validations;
  j["gain_fit_heldout_mse"] = s.gain_fit_mse;
  if (s.backward_model)
    j["backward_model"] = {{"mse_db2", s.backward_model->mse_db2},
                           {"mae_db", s.backward_model->mae_db},
                           {"dataset_hash", s.backward_model->dataset_hash}};
  return j;
}

struct RunOptions {
  bool validate = true;
  const Logger* log = nullptr;
  std::function<void(const IterationRecord&)> on_iter;
};

/// Optimizes, validates and writes report.json, pumps.json, profile.csv,
/// trace.csv, summary.csv and validation.csv (+ validation_linear_gr.csv).
inline ScenarioResult run_scenario(const ScenarioConfig& c, const fs::path& out_dir, const RunOptions& opts = {}) {
  const Logger log = opts.log ? *opts.log : Logger{};
  const auto cache = cache_dir_for(c, out_dir);
  ScenarioResult res;
  auto gr = std::make_shared<const GainInterpolator>(ensure_gain_interpolator(c, cache, log));
  res.gain_fit_mse = gr->heldout_mse();
  if (c.hybrid()) res.backward_model = ensure_backward_model(c, cache, log);

  OptimizerConfig oc = c.optimizer;
  oc.solver.interpolator = gr;
  OptimizationProblem prob{c.topology, c.target(), res.backward_model ? &*res.backward_model : nullptr};
  if (log) log("optimizing " + c.name);
  const auto t0 = std::chrono::steady_clock::now();
  res.report = optimize(initial_pumps(c), prob, oc, opts.on_iter);
  res.optimize_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (res.report.failure) throw Error("optimization failed: " + *res.report.failure);
  if (log) {
    std::ostringstream os;
    os << "optimization: " << res.report.iterations << " iterations (" << res.report.stop_reason << "), MSE "
       << res.report.final_mse_db2 << " dB^2, MAE " << res.report.final_mae_db << " dB";
    log(os.str());
  }

  if (opts.validate) {
    const auto table = load_gain_table(c.gain_table.string());
    std::vector<double> s1;
    if (c.hybrid() && !res.report.profiles.empty()) {
      const auto& p = res.report.profiles.front();
      for (std::size_t i = 0; i < c.topology.channel_freqs_thz.size(); ++i) s1.push_back(p.powers_dbm[i].back());
    }
    for (auto mode : c.validation.modes) {
      res.validations.push_back(
          validate_design(res.report.final_pumps, c.topology, c.target(), res.report.received_dbm, mode, table, c.validation, s1));
      if (log) log("validation " + nlohmann::json(mode).get<std::string>() + ": MAE " + std::to_string(res.validations.back().mae_db) + " dB");
    }
  }

  fs::create_directories(out_dir);
  res.report_json = scenario_report_json(c, res);
  write_file_atomic(out_dir / "report.json", res.report_json.dump(2));
  write_file_atomic(out_dir / "pumps.json", nlohmann::json(res.report.final_pumps).dump(2));
  write_file_atomic(out_dir / "profile.csv", profile_csv(res.report.profiles, c.topology));
  write_file_atomic(out_dir / "trace.csv", trace_csv(res.report));
  write_file_atomic(out_dir / "summary.csv", summary_csv(res));
  for (const auto& v : res.validations) {
    const std::string name = v.mode == ValidationMode::neural_gr ? "validation.csv" : "validation_linear_gr.csv";
    write_file_atomic(out_dir / name, validation_csv(v));
  }
  return res;
}

}  // namespace raman
