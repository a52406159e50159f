#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "raman/raman.hpp"

namespace fs = std::filesystem;
using raman::ScenarioConfig;

namespace {

struct Globals {
  std::string config;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

ScenarioConfig load(const Globals& g) {
  if (g.config.empty()) throw raman::ConfigError({"--config is required"});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raman::read_file(g.config));
  } catch (const nlohmann::json::parse_error& e) {
    throw raman::ConfigError({g.config + ": " + e.what()});
  } catch (const raman::Error& e) {
    throw raman::ConfigError({e.what()});
  }
  if (g.seed && j.is_object()) j["seed"] = *g.seed;
  return raman::parse_scenario(j, fs::path(g.config).parent_path());
}

raman::Logger logger(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& s) { std::cerr << "[ramanopt] " << s << std::endl; };
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_timing(const fs::path& out, const std::string& stage, double secs) {
  nlohmann::json j = nlohmann::json::object();
  const auto path = out / "timing.json";
  if (fs::exists(path)) j = nlohmann::json::parse(raman::read_file(path));
  j[stage] = secs;
  raman::write_file_atomic(path, j.dump(2));
}

int cmd_fit_gr(const Globals& g) {
  const auto c = load(g);
  const fs::path out(g.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto gr = raman::ensure_gain_interpolator(c, raman::cache_dir_for(c, out), logger(g));
  nlohmann::json j;
  to_json(j, gr);
  raman::write_file_atomic(out / "gr_interpolant.json", j.dump());
  write_timing(out, "fit_gr_s", seconds_since(t0));
  std::cout << "g_R held-out MSE " << gr.heldout_mse() << "\n";
  return 0;
}

int cmd_gen_dataset(const Globals& g) {
  const auto c = load(g);
  const fs::path out(g.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = raman::ensure_dataset(c, raman::cache_dir_for(c, out), logger(g));
  raman::save_dataset(ds, out / "backward_dataset");
  write_timing(out, "gen_dataset_s", seconds_since(t0));
  std::cout << "dataset rows " << ds.size() << ", excluded " << ds.excluded_rows << ", hash " << ds.spec_hash << "\n";
  return 0;
}

int cmd_train_backward(const Globals& g) {
  const auto c = load(g);
  const fs::path out(g.out_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = raman::ensure_backward_model(c, raman::cache_dir_for(c, out), logger(g));
  raman::write_file_atomic(out / "backward_model.json", nlohmann::json(m).dump());
  write_timing(out, "train_backward_s", seconds_since(t0));
  std::cout << "backward model held-out MSE " << m.mse_db2 << " dB^2, MAE " << m.mae_db << " dB\n";
  return 0;
}

int cmd_optimize(const Globals& g, bool validate) {
  const auto c = load(g);
  const fs::path out(g.out_dir);
  const auto log = logger(g);
  raman::RunOptions opts;
  opts.validate = validate;
  opts.log = &log;
  if (log)
    opts.on_iter = [&log](const raman::IterationRecord& r) {
      if (r.iteration % 100 == 0)
        log("iter " + std::to_string(r.iteration) + " cost " + std::to_string(r.cost) + " pumps " + std::to_string(r.pumps));
    };
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = raman::run_scenario(c, out, opts);
  write_timing(out, "optimize_s", res.optimize_seconds);
  write_timing(out, "total_s", seconds_since(t0));
  std::cout << "final MSE " << res.report.final_mse_db2 << " dB^2, MAE " << res.report.final_mae_db << " dB, "
            << res.report.iterations << " iterations (" << res.report.stop_reason << ")\n";
  for (const auto& v : res.validations)
    std::cout << "validation " << nlohmann::json(v.mode).get<std::string>() << ": MAE " << v.mae_db << " dB\n";
  return 0;
}

int cmd_validate(const Globals& g, const std::string& pumps_path) {
  const auto c = load(g);
  const fs::path out(g.out_dir);
  const fs::path pp = pumps_path.empty() ? out / "pumps.json" : fs::path(pumps_path);
  const auto pumps = nlohmann::json::parse(raman::read_file(pp)).get<raman::PumpSet>();
  const auto cache = raman::cache_dir_for(c, out);
  auto solver = c.optimizer.solver;
  solver.interpolator = std::make_shared<const raman::GainInterpolator>(raman::ensure_gain_interpolator(c, cache, logger(g)));
  std::optional<raman::BackwardGainModel> bgm;
  if (c.hybrid()) bgm = raman::ensure_backward_model(c, cache, logger(g));
  const auto model = raman::model_received(pumps, c.topology, solver, bgm ? &*bgm : nullptr, c.hybrid());
  std::vector<double> s1;
  if (c.hybrid())
    for (std::size_t i = 0; i < c.topology.channel_freqs_thz.size(); ++i)
      s1.push_back(model.link.profiles.front().powers_dbm[i].back());
  const auto table = raman::load_gain_table(c.gain_table.string());
  nlohmann::json all = nlohmann::json::array();
  for (auto mode : c.validation.modes) {
    const auto v = raman::validate_design(pumps, c.topology, c.target(), model.received_dbm, mode, table, c.validation, s1);
    raman::write_file_atomic(out / (mode == raman::ValidationMode::neural_gr ? "validation.csv" : "validation_linear_gr.csv"),
                             raman::validation_csv(v));
    all.push_back(v);
    std::cout << "validation " << nlohmann::json(mode).get<std::string>() << ": MAE " << v.mae_db << " dB, MSE "
              << v.mse_db2 << " dB^2, max |oracle - model| " << v.max_model_oracle_db << " dB\n";
  }
  raman::write_file_atomic(out / "validation.json", all.dump(2));
  return 0;
}

int cmd_depletion(const Globals& g) {
  const auto c = load(g);
  const fs::path out(g.out_dir);
  const auto bvp = raman::dataset_config(c).bvp;
  const auto profiles = raman::default_load_profiles(c.amp.load.size());
  const std::vector<double> totals{-5.0, 0.0, 5.0, 10.0, 15.0, 20.0};
  const auto pts = raman::depletion_study(c.amp, profiles, totals, bvp);
  raman::write_file_atomic(out / "depletion.csv", raman::depletion_csv(pts, c.amp.channel_freqs()));
  nlohmann::json j = nlohmann::json::array();
  for (double t : totals) {
    const double d = raman::profile_deviation_db(pts, t);
    j.push_back({{"total_dbm", t}, {"deviation_db", d}});
    std::cout << "total " << std::setw(5) << t << " dBm: max gain deviation " << d << " dB\n";
  }
  raman::write_file_atomic(out / "depletion.json", j.dump(2));
  return 0;
}

int cmd_report(const Globals& g) {
  const fs::path out(g.out_dir);
  const auto j = nlohmann::json::parse(raman::read_file(out / "report.json"));
  const auto& o = j.at("optimization");
  std::cout << "scenario   " << j.at("name").get<std::string>() << "\n";
  std::cout << "iterations " << o.at("iterations") << " (" << o.at("stop_reason").get<std::string>() << ")\n";
  std::cout << "MSE        " << o.at("final_mse_db2") << " dB^2\n";
  std::cout << "MAE        " << o.at("final_mae_db") << " dB\n";
  for (const auto& v : j.at("validation"))
    std::cout << "validation " << v.at("mode").get<std::string>() << " MAE " << v.at("mae_db") << " dB\n";
  std::cout << "final pumps\n";
  for (const auto& p : o.at("final_pumps").at("pumps"))
    std::cout << "  " << std::setw(8) << p.at("group").get<std::string>() << "  " << std::fixed << std::setprecision(3)
              << p.at("frequency_thz").get<double>() << " THz  " << std::setprecision(2) << p.at("power_mw").get<double>()
              << " mW\n" << std::defaultfloat;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Raman amplifier pump optimization"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Scenario JSON");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  auto* seed_opt = app.add_option("--seed", seed, "Seed overriding every stage seed");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress output");

  std::string pumps_path;
  auto* fit = app.add_subcommand("fit-gr", "Fit the neural g_R interpolant");
  auto* gen = app.add_subcommand("gen-dataset", "Generate the backward amplifier dataset");
  auto* train = app.add_subcommand("train-backward", "Train the backward gain model");
  auto* opt = app.add_subcommand("optimize", "Optimize pumps and validate the result");
  bool no_validate = false;
  opt->add_flag("--no-validate", no_validate, "Skip oracle validation");
  auto* val = app.add_subcommand("validate", "Validate a pump set against the oracle solvers");
  val->add_option("--pumps", pumps_path, "pumps.json (default: <out-dir>/pumps.json)");
  auto* dep = app.add_subcommand("depletion-study", "Gain vs load power and shape");
  auto* rep = app.add_subcommand("report", "Print a summary of <out-dir>/report.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*fit) return cmd_fit_gr(g);
    if (*gen) return cmd_gen_dataset(g);
    if (*train) return cmd_train_backward(g);
    if (*opt) return cmd_optimize(g, !no_validate);
    if (*val) return cmd_validate(g, pumps_path);
    if (*dep) return cmd_depletion(g);
    if (*rep) return cmd_report(g);
  } catch (const raman::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
