#pragma once

// Backward Raman amplifier with four fixed pump frequencies: synthetic
// on-off gain dataset from the BVP solver, the 4 -> 256 -> 128 -> 40
// surrogate, and the load depletion study.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "raman/autodiff.hpp"
#include "raman/io.hpp"
#include "raman/mlp.hpp"
#include "raman/raman_gain.hpp"
#include "raman/srs_bvp.hpp"
#include "raman/units.hpp"

namespace raman {

inline constexpr std::size_t kBackwardPumps = 4;

struct BackwardAmpSpec {
  std::array<double, kBackwardPumps> pump_freqs_thz{206.1, 207.5, 209.0, 210.6};
  double min_power_dbm = 0.0;
  double max_power_dbm = 21.0;
  double pump_attenuation_db_per_km = 0.2;
  FiberSpec fiber{};
  std::vector<Carrier> load = build_channel_grid(40, 100.0, 191.2, -13.0);

  std::vector<double> channel_freqs() const {
    std::vector<double> f;
    for (const auto& c : load) f.push_back(c.frequency_thz);
    return f;
  }
  std::vector<Carrier> pumps(std::span<const double> powers_dbm) const {
    if (powers_dbm.size() != kBackwardPumps) throw Error("backward amplifier needs exactly 4 pump powers");
    std::vector<Carrier> out;
    for (std::size_t i = 0; i < kBackwardPumps; ++i) {
      Carrier c;
      c.frequency_thz = pump_freqs_thz[i];
      c.power_mw = dbm_to_mw(powers_dbm[i]);
      c.direction = Direction::backward;
      c.role = Role::pump;
      c.attenuation_db_per_km = pump_attenuation_db_per_km;
      out.push_back(c);
    }
    return out;
  }
};

inline void to_json(nlohmann::json& j, const BackwardAmpSpec& s) {
  j = {{"pump_freqs_thz", s.pump_freqs_thz},
       {"pump_power_range_dbm", {s.min_power_dbm, s.max_power_dbm}},
       {"pump_attenuation_db_per_km", s.pump_attenuation_db_per_km},
       {"fiber", s.fiber},
       {"load", s.load}};
}

inline void from_json(const nlohmann::json& j, BackwardAmpSpec& s) {
  s = BackwardAmpSpec{};
  if (j.contains("pump_freqs_thz")) s.pump_freqs_thz = j.at("pump_freqs_thz").get<std::array<double, kBackwardPumps>>();
  if (j.contains("pump_power_range_dbm")) {
    const auto r = j.at("pump_power_range_dbm").get<std::vector<double>>();
    if (r.size() != 2) throw Error("pump_power_range_dbm needs two entries");
    s.min_power_dbm = r[0];
    s.max_power_dbm = r[1];
  }
  if (j.contains("pump_attenuation_db_per_km")) s.pump_attenuation_db_per_km = j.at("pump_attenuation_db_per_km");
  if (j.contains("fiber")) s.fiber = j.at("fiber").get<FiberSpec>();
  if (j.contains("load")) s.load = j.at("load").get<std::vector<Carrier>>();
  if (!(s.max_power_dbm > s.min_power_dbm)) throw Error("pump power range must be increasing");
}

struct DatasetConfig {
  std::size_t grid_points = 6;
  std::size_t random_rows = 500;
  std::uint64_t seed = 7;
  BvpConfig bvp{};
  // 0 = hardware concurrency.
  unsigned threads = 0;
};

struct GainDataset {
  std::vector<std::vector<double>> inputs;   // pump powers, dBm
  std::vector<std::vector<double>> targets;  // on-off gains, dB
  std::vector<double> channel_freqs_thz;
  std::size_t excluded_rows = 0;
  std::string spec_hash;
  nlohmann::json provenance;

  std::size_t size() const { return inputs.size(); }
};

inline std::string table_fingerprint(const RamanGainTable& t) {
  std::ostringstream os;
  for (std::size_t i = 0; i < t.size(); ++i) os << fmt_double(t.offsets_thz[i]) << ':' << fmt_double(t.normalized_gain[i]) << ';';
  return hex64(fnv1a(os.str()));
}

inline nlohmann::json dataset_provenance(const BackwardAmpSpec& spec, const DatasetConfig& cfg) {
  if (!cfg.bvp.interpolator) throw Error("dataset config has no gain interpolator");
  return {{"spec", spec},
          {"grid_points", cfg.grid_points},
          {"random_rows", cfg.random_rows},
          {"seed", cfg.seed},
          {"bvp", {{"dz_km", cfg.bvp.dz_km}, {"tol_db", cfg.bvp.tol_db}, {"max_sweeps", cfg.bvp.max_sweeps}}},
          {"gain_table", table_fingerprint(cfg.bvp.interpolator->table())},
          {"gain_kind", cfg.bvp.interpolator->kind()}};
}

inline std::string dataset_hash(const BackwardAmpSpec& spec, const DatasetConfig& cfg) {
  return hex64(fnv1a(dataset_provenance(spec, cfg).dump()));
}

/// On-off gains for one setting of the four pumps.
inline std::vector<double> backward_gain_row(const BackwardAmpSpec& spec, std::span<const double> pump_dbm,
                                             const BvpConfig& bvp) {
  const auto res = solve_bvp(spec.load, spec.pumps(pump_dbm), spec.fiber, bvp);
  return on_off_gain(res.profile, spec.fiber, spec.load);
}

inline std::vector<std::vector<double>> dataset_inputs(const BackwardAmpSpec& spec, const DatasetConfig& cfg) {
  if (cfg.grid_points < 2) throw Error("generate_dataset: need at least 2 grid points per pump");
  std::vector<double> levels(cfg.grid_points);
  for (std::size_t i = 0; i < cfg.grid_points; ++i)
    levels[i] = spec.min_power_dbm +
                (spec.max_power_dbm - spec.min_power_dbm) * static_cast<double>(i) / static_cast<double>(cfg.grid_points - 1);
  levels.back() = spec.max_power_dbm;
  std::vector<std::vector<double>> rows;
  const std::size_t g = cfg.grid_points;
  for (std::size_t a = 0; a < g; ++a)
    for (std::size_t b = 0; b < g; ++b)
      for (std::size_t c = 0; c < g; ++c)
        for (std::size_t d = 0; d < g; ++d) rows.push_back({levels[a], levels[b], levels[c], levels[d]});
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(spec.min_power_dbm, spec.max_power_dbm);
  for (std::size_t r = 0; r < cfg.random_rows; ++r) {
    std::vector<double> row(kBackwardPumps);
    for (auto& v : row) v = u(rng);
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Solves every row concurrently. Rows whose BVP fails are dropped and
/// counted in excluded_rows. `progress(done, total)` is called from workers.
inline GainDataset generate_dataset(const BackwardAmpSpec& spec, const DatasetConfig& cfg,
                                    const std::function<void(std::size_t, std::size_t)>& progress = {}) {
  const auto rows = dataset_inputs(spec, cfg);
  std::vector<std::vector<double>> gains(rows.size());
  std::vector<char> ok(rows.size(), 0);
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= rows.size()) return;
      try {
        gains[i] = backward_gain_row(spec, rows[i], cfg.bvp);
        ok[i] = 1;
      } catch (const BvpConvergenceError&) {
        ok[i] = 0;
      }
      const std::size_t d = ++done;
      if (progress) {
        std::lock_guard lock(progress_mutex);
        progress(d, rows.size());
      }
    }
  };
  unsigned threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(rows.size(), 1)));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  GainDataset ds;
  ds.channel_freqs_thz = spec.channel_freqs();
  ds.provenance = dataset_provenance(spec, cfg);
  ds.spec_hash = hex64(fnv1a(ds.provenance.dump()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!ok[i]) {
      ++ds.excluded_rows;
      continue;
    }
    ds.inputs.push_back(rows[i]);
    ds.targets.push_back(std::move(gains[i]));
  }
  return ds;
}

inline std::string dataset_csv(const GainDataset& ds) {
  std::ostringstream os;
  for (std::size_t i = 0; i < kBackwardPumps; ++i) os << (i ? "," : "") << "p" << i + 1 << "_dbm";
  const std::size_t n_out = ds.targets.empty() ? ds.channel_freqs_thz.size() : ds.targets.front().size();
  for (std::size_t i = 0; i < n_out; ++i) os << ",g" << i + 1 << "_db";
  os << '\n';
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t i = 0; i < ds.inputs[r].size(); ++i) os << (i ? "," : "") << fmt_double(ds.inputs[r][i]);
    for (double g : ds.targets[r]) os << ',' << fmt_double(g);
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json dataset_sidecar(const GainDataset& ds) {
  return {{"spec_hash", ds.spec_hash},
          {"rows", ds.size()},
          {"excluded_rows", ds.excluded_rows},
          {"channel_freqs_thz", ds.channel_freqs_thz},
          {"provenance", ds.provenance}};
}

/// Writes `<stem>.csv` and `<stem>.json`.
inline void save_dataset(const GainDataset& ds, const std::filesystem::path& stem) {
  auto csv = stem;
  csv += ".csv";
  auto js = stem;
  js += ".json";
  write_file_atomic(csv, dataset_csv(ds));
  write_file_atomic(js, dataset_sidecar(ds).dump(2));
}

inline GainDataset load_dataset(const std::filesystem::path& stem) {
  auto csv = stem;
  csv += ".csv";
  auto js = stem;
  js += ".json";
  GainDataset ds;
  const auto side = nlohmann::json::parse(read_file(js));
  ds.spec_hash = side.at("spec_hash");
  ds.excluded_rows = side.at("excluded_rows");
  ds.channel_freqs_thz = side.at("channel_freqs_thz").get<std::vector<double>>();
  ds.provenance = side.at("provenance");
  std::istringstream in(read_file(csv));
  std::string line;
  if (!std::getline(in, line)) throw Error("dataset csv is empty: " + csv.string());
  const std::size_t cols = split_csv_line(line).size();
  if (cols <= kBackwardPumps) throw Error("dataset csv has no gain columns");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != cols) throw Error("dataset csv line " + std::to_string(line_no) + ": wrong column count");
    std::vector<double> row;
    for (const auto& c : cells) row.push_back(std::stod(c));
    ds.inputs.emplace_back(row.begin(), row.begin() + kBackwardPumps);
    ds.targets.emplace_back(row.begin() + kBackwardPumps, row.end());
  }
  if (ds.size() != side.at("rows").get<std::size_t>()) throw Error("dataset csv row count disagrees with sidecar");
  return ds;
}

struct BackwardTrainConfig {
  std::vector<std::size_t> hidden{256, 128};
  int epochs = 1500;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double final_learning_rate = 1e-5;
  double holdout_fraction = 0.1;
  std::size_t min_rows = 500;
  std::uint64_t seed = 7;
  double mse_threshold_db2 = 0.01;
  double mae_threshold_db = 1.0;
};

struct BackwardGainModel {
  Mlp net;
  double min_power_dbm = 0.0;
  double max_power_dbm = 21.0;
  std::array<double, kBackwardPumps> pump_freqs_thz{};
  std::vector<double> channel_freqs_thz;
  double mse_db2 = 0.0;
  double mae_db = 0.0;
  std::size_t train_rows = 0;
  std::size_t heldout_rows = 0;
  bool trained = false;
  std::string dataset_hash;

  double scale(double p_dbm) const { return (p_dbm - min_power_dbm) / (max_power_dbm - min_power_dbm); }
};

class BackwardTrainError : public Error {
 public:
  BackwardTrainError(const std::string& what, double mse, double mae) : Error(what), mse_db2(mse), mae_db(mae) {}
  double mse_db2;
  double mae_db;
};

struct GainMetrics {
  double mse_db2 = 0.0;
  double mae_db = 0.0;
};

/// Mean squared error over all channels and rows, and the largest absolute
/// error over all channels and rows.
inline GainMetrics gain_metrics(const std::vector<std::vector<double>>& predicted,
                                const std::vector<std::vector<double>>& measured) {
  if (predicted.size() != measured.size() || predicted.empty()) throw Error("gain_metrics: shape mismatch");
  GainMetrics m;
  std::size_t count = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].size() != measured[i].size()) throw Error("gain_metrics: shape mismatch");
    for (std::size_t n = 0; n < predicted[i].size(); ++n) {
      const double e = predicted[i][n] - measured[i][n];
      m.mse_db2 += e * e;
      m.mae_db = std::max(m.mae_db, std::abs(e));
      ++count;
    }
  }
  m.mse_db2 /= static_cast<double>(count);
  return m;
}

inline void check_pump_range(const BackwardGainModel& model, std::span<const double> p_dbm) {
  if (p_dbm.size() != kBackwardPumps) throw Error("predict_gain: need exactly 4 pump powers");
  for (double p : p_dbm)
    if (!std::isfinite(p) || p < model.min_power_dbm - 1e-9 || p > model.max_power_dbm + 1e-9)
      throw Error("predict_gain: pump power " + std::to_string(p) + " dBm outside the trained range [" +
                  std::to_string(model.min_power_dbm) + ", " + std::to_string(model.max_power_dbm) + "]");
}

inline std::vector<double> predict_gain(const BackwardGainModel& model, std::span<const double> p_dbm) {
  check_pump_range(model, p_dbm);
  std::vector<double> x;
  for (double p : p_dbm) x.push_back(model.scale(p));
  return model.net(x);
}

inline std::vector<std::vector<double>> predict_gain_batch(const BackwardGainModel& model,
                                                           const std::vector<std::vector<double>>& rows) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(kBackwardPumps), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check_pump_range(model, rows[r]);
    for (std::size_t i = 0; i < kBackwardPumps; ++i)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) = model.scale(rows[r][i]);
  }
  const Eigen::MatrixXd y = model.net.forward_batch(x);
  std::vector<std::vector<double>> out(rows.size(), std::vector<double>(static_cast<std::size_t>(y.rows())));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Eigen::Index n = 0; n < y.rows(); ++n) out[r][static_cast<std::size_t>(n)] = y(n, static_cast<Eigen::Index>(r));
  return out;
}

/// Tape version; differentiable in the four pump powers (dBm).
inline std::vector<ad::Var> predict_gain(const BackwardGainModel& model, std::span<const ad::Var> p_dbm) {
  std::vector<double> v;
  for (const auto& p : p_dbm) v.push_back(p.value);
  check_pump_range(model, v);
  const double inv = 1.0 / (model.max_power_dbm - model.min_power_dbm);
  std::vector<ad::Var> x;
  for (const auto& p : p_dbm) x.push_back((p - model.min_power_dbm) * inv);
  return model.net.record(x);
}

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

inline DatasetSplit split_dataset(std::size_t rows, double heldout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(rows)));
  DatasetSplit s;
  s.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  return s;
}

inline BackwardGainModel train_backward_model(const GainDataset& ds, const BackwardTrainConfig& cfg,
                                              const BackwardAmpSpec& spec = {},
                                              const std::function<bool(int, double)>& on_epoch = {}) {
  if (ds.inputs.size() != ds.targets.size()) throw Error("train_backward_model: row counts differ");
  if (ds.size() < cfg.min_rows)
    throw Error("train_backward_model: need at least " + std::to_string(cfg.min_rows) + " rows, got " +
                std::to_string(ds.size()));
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0)) throw Error("holdout fraction must be in (0, 1)");
  const std::set<std::vector<double>> distinct(ds.inputs.begin(), ds.inputs.end());
  if (distinct.size() < 2) throw Error("train_backward_model: degenerate split, all input rows are identical");
  const std::size_t n_out = ds.targets.front().size();
  for (std::size_t r = 0; r < ds.size(); ++r)
    if (ds.inputs[r].size() != kBackwardPumps || ds.targets[r].size() != n_out)
      throw Error("train_backward_model: ragged row " + std::to_string(r));

  BackwardGainModel model;
  model.min_power_dbm = spec.min_power_dbm;
  model.max_power_dbm = spec.max_power_dbm;
  model.pump_freqs_thz = spec.pump_freqs_thz;
  model.channel_freqs_thz = ds.channel_freqs_thz;
  model.dataset_hash = ds.spec_hash;
  for (const auto& row : ds.inputs) check_pump_range(model, row);

  const auto split = split_dataset(ds.size(), cfg.holdout_fraction, cfg.seed);
  std::set<std::vector<double>> train_inputs;
  for (auto i : split.train) train_inputs.insert(ds.inputs[i]);
  if (split.heldout.empty() || split.train.empty()) throw Error("train_backward_model: degenerate split");
  model.train_rows = split.train.size();
  model.heldout_rows = split.heldout.size();

  Eigen::MatrixXd x(static_cast<Eigen::Index>(kBackwardPumps), static_cast<Eigen::Index>(split.train.size()));
  Eigen::MatrixXd y(static_cast<Eigen::Index>(n_out), static_cast<Eigen::Index>(split.train.size()));
  for (std::size_t c = 0; c < split.train.size(); ++c) {
    const auto r = split.train[c];
    for (std::size_t i = 0; i < kBackwardPumps; ++i)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = model.scale(ds.inputs[r][i]);
    for (std::size_t n = 0; n < n_out; ++n)
      y(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) = ds.targets[r][n];
  }
  std::vector<std::size_t> sizes{kBackwardPumps};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(n_out);
  model.net = Mlp(sizes, cfg.seed);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.final_learning_rate = cfg.final_learning_rate;
  tc.seed = cfg.seed + 1;
  train_mse(model.net, x, y, tc, on_epoch);
  model.trained = true;

  std::vector<std::vector<double>> hold_in;
  std::vector<std::vector<double>> hold_out;
  for (auto r : split.heldout) {
    hold_in.push_back(ds.inputs[r]);
    hold_out.push_back(ds.targets[r]);
  }
  const auto m = gain_metrics(predict_gain_batch(model, hold_in), hold_out);
  model.mse_db2 = m.mse_db2;
  model.mae_db = m.mae_db;
  if (m.mse_db2 > cfg.mse_threshold_db2 || m.mae_db > cfg.mae_threshold_db) {
    std::ostringstream os;
    os << "train_backward_model: held-out MSE " << m.mse_db2 << " dB^2, MAE " << m.mae_db
       << " dB miss the targets " << cfg.mse_threshold_db2 << " / " << cfg.mae_threshold_db;
    throw BackwardTrainError(os.str(), m.mse_db2, m.mae_db);
  }
  return model;
}

inline void to_json(nlohmann::json& j, const BackwardGainModel& m) {
  j = {{"net", m.net},
       {"input_range_dbm", {m.min_power_dbm, m.max_power_dbm}},
       {"pump_freqs_thz", m.pump_freqs_thz},
       {"channel_freqs_thz", m.channel_freqs_thz},
       {"metrics", {{"mse_db2", m.mse_db2}, {"mae_db", m.mae_db}}},
       {"train_rows", m.train_rows},
       {"heldout_rows", m.heldout_rows},
       {"trained", m.trained},
       {"dataset_hash", m.dataset_hash}};
}

inline void from_json(const nlohmann::json& j, BackwardGainModel& m) {
  m.net = j.at("net").get<Mlp>();
  const auto r = j.at("input_range_dbm").get<std::vector<double>>();
  if (r.size() != 2) throw Error("input_range_dbm needs two entries");
  m.min_power_dbm = r[0];
  m.max_power_dbm = r[1];
  m.pump_freqs_thz = j.at("pump_freqs_thz").get<std::array<double, kBackwardPumps>>();
  m.channel_freqs_thz = j.at("channel_freqs_thz").get<std::vector<double>>();
  m.mse_db2 = j.at("metrics").at("mse_db2");
  m.mae_db = j.at("metrics").at("mae_db");
  m.train_rows = j.at("train_rows");
  m.heldout_rows = j.at("heldout_rows");
  m.trained = j.at("trained");
  m.dataset_hash = j.at("dataset_hash");
  if (m.net.input_size() != kBackwardPumps || m.net.output_size() != m.channel_freqs_thz.size())
    throw Error("backward model: net shape does not match its channel list");
}

// Depletion study.

struct LoadProfile {
  std::string name;
  std::vector<double> relative_db;  // per channel, before normalization
};

/// Flat, and +/- tilts of `tilt_db` end to end with a uniform ripple of at
/// most `ripple_db`.
inline std::vector<LoadProfile> default_load_profiles(std::size_t channels, double tilt_db = 5.0,
                                                      double ripple_db = 0.5, std::uint64_t seed = 11) {
  std::vector<LoadProfile> out{{"flat", std::vector<double>(channels, 0.0)}, {"tilt_up", {}}, {"tilt_down", {}}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-ripple_db, ripple_db);
  for (std::size_t k = 0; k < channels; ++k) {
    const double t = channels > 1 ? static_cast<double>(k) / static_cast<double>(channels - 1) : 0.0;
    out[1].relative_db.push_back(tilt_db * (t - 0.5) + u(rng));
  }
  for (std::size_t k = 0; k < channels; ++k) {
    const double t = channels > 1 ? static_cast<double>(k) / static_cast<double>(channels - 1) : 0.0;
    out[2].relative_db.push_back(-tilt_db * (t - 0.5) + u(rng));
  }
  return out;
}

/// Channel powers (dBm) with the given shape and total power.
inline std::vector<double> shape_to_total(std::span<const double> relative_db, double total_dbm) {
  double sum = 0.0;
  for (double r : relative_db) sum += dbm_to_mw(r);
  const double shift = total_dbm - mw_to_dbm(sum);
  std::vector<double> out;
  for (double r : relative_db) out.push_back(r + shift);
  return out;
}

struct DepletionPoint {
  std::string profile;
  double total_dbm = 0.0;
  std::vector<double> gain_db;
  double mean_gain_db = 0.0;
};

inline std::vector<DepletionPoint> depletion_study(const BackwardAmpSpec& spec, const std::vector<LoadProfile>& profiles,
                                                   std::span<const double> totals_dbm, const BvpConfig& bvp,
                                                   double pump_dbm = 21.0) {
  const std::vector<double> pumps(kBackwardPumps, pump_dbm);
  std::vector<DepletionPoint> out;
  for (const auto& prof : profiles) {
    if (prof.relative_db.size() != spec.load.size()) throw Error("load profile " + prof.name + " has the wrong length");
    for (double total : totals_dbm) {
      auto s = spec;
      const auto p = shape_to_total(prof.relative_db, total);
      for (std::size_t k = 0; k < s.load.size(); ++k) s.load[k].power_mw = dbm_to_mw(p[k]);
      DepletionPoint pt;
      pt.profile = prof.name;
      pt.total_dbm = total;
      pt.gain_db = backward_gain_row(s, pumps, bvp);
      pt.mean_gain_db = std::accumulate(pt.gain_db.begin(), pt.gain_db.end(), 0.0) / static_cast<double>(pt.gain_db.size());
      out.push_back(std::move(pt));
    }
  }
  return out;
}

/// Largest per-channel gain difference between any two profiles at one
/// total load power.
inline double profile_deviation_db(const std::vector<DepletionPoint>& pts, double total_dbm) {
  std::vector<const DepletionPoint*> at;
  for (const auto& p : pts)
    if (std::abs(p.total_dbm - total_dbm) < 1e-9) at.push_back(&p);
  if (at.empty()) throw Error("no depletion points at " + std::to_string(total_dbm) + " dBm");
  double worst = 0.0;
  for (std::size_t a = 0; a < at.size(); ++a)
    for (std::size_t b = a + 1; b < at.size(); ++b)
      for (std::size_t n = 0; n < at[a]->gain_db.size(); ++n)
        worst = std::max(worst, std::abs(at[a]->gain_db[n] - at[b]->gain_db[n]));
  return worst;
}

inline std::string depletion_csv(const std::vector<DepletionPoint>& pts, std::span<const double> channel_freqs) {
  std::ostringstream os;
  os << "profile,total_dbm,f_thz,gain_db\n";
  for (const auto& p : pts)
    for (std::size_t n = 0; n < p.gain_db.size(); ++n)
      os << p.profile << ',' << fmt_double(p.total_dbm) << ',' << fmt_double(channel_freqs[n]) << ','
         << fmt_double(p.gain_db[n]) << '\n';
  return os.str();
}

}  // namespace raman
