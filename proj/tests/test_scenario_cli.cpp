#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "raman/raman.hpp"

using namespace raman;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "raman_scenario_cli_test";

json tiny_ropa() {
  return json::parse(R"({
    "name": "tiny",
    "seed": 3,
    "topology": {"kind": "ropa", "l1_km": 20, "l2_km": 20, "edfa_out_dbm": 0,
                 "channels": {"count": 4, "spacing_ghz": 1000, "first_thz": 192.0}},
    "target_dbm_per_channel": -6.0,
    "pumps": {"forward": 3, "remote": 2},
    "optimizer": {"max_iters": 40, "dz_km": 2.0, "stall_window": 10, "p_max_w": {"forward": 0.5, "remote": 0.5}},
    "gain_fit": {"epochs": 20, "mse_threshold": 1.0},
    "validation": {"oracle_dz_km": 0.01}
  })");
}

fs::path write_config(const std::string& name, const json& j) {
  fs::create_directories(kWork);
  auto c = j;
  c["paths"]["cache_dir"] = (kWork / "cache").string();
  const auto p = kWork / name;
  std::ofstream(p) << c.dump(2);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(RAMANOPT_EXE) + " -q " + args + " > " + (kWork / "cli.log").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string s;
  std::getline(in, s);
  return s;
}

std::shared_ptr<const GainInterpolator> table_gain() {
  static const auto g = std::make_shared<const GainInterpolator>(
      GainInterpolator::linear(load_gain_table(std::string(RAMAN_DATA_DIR) + "/ssmf_gr.csv")));
  return g;
}

std::vector<std::string> problems_of(const json& j) {
  try {
    parse_scenario(j);
  } catch (const ConfigError& e) {
    return e.problems;
  }
  return {};
}

bool mentions(const std::vector<std::string>& ps, const std::string& s) {
  for (const auto& p : ps)
    if (p.find(s) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(ParseScenario, ShippedScenariosLoad) {
  const auto s1 = load_scenario(fs::path(RAMAN_SOURCE_DIR) / "scenarios/scenario1.json");
  EXPECT_EQ(s1.topology.kind, LinkKind::ropa);
  EXPECT_DOUBLE_EQ(s1.topology.l1_km, 150.0);
  EXPECT_DOUBLE_EQ(s1.topology.l2_km, 100.0);
  EXPECT_EQ(s1.forward_pumps, 20u);
  EXPECT_EQ(s1.remote_pumps, 20u);
  EXPECT_DOUBLE_EQ(s1.target_dbm_per_channel, -26.0);
  EXPECT_EQ(s1.topology.channel_freqs_thz.size(), 40u);
  const auto p1 = initial_pumps(s1);
  EXPECT_NEAR(p1.total_mw(PumpGroup::forward), 2000.0, 1e-9);
  EXPECT_NEAR(p1.total_mw(PumpGroup::remote), 2000.0, 1e-9);

  const auto s2 = load_scenario(fs::path(RAMAN_SOURCE_DIR) / "scenarios/scenario2.json");
  EXPECT_TRUE(s2.hybrid());
  EXPECT_DOUBLE_EQ(s2.target_dbm_per_channel, -31.0);
  const auto p2 = initial_pumps(s2);
  EXPECT_EQ(p2.count(PumpGroup::forward), 4u);
  EXPECT_EQ(p2.count(PumpGroup::backward), 4u);
  for (const auto& p : p2.pumps)
    if (p.group == PumpGroup::backward) {
      EXPECT_NEAR(mw_to_dbm(p.power_mw), 10.0, 1e-12);
      EXPECT_FALSE(p.optimize_frequency);
    }
}

TEST(ParseScenario, CollectsEveryProblem) {
  auto j = tiny_ropa();
  j["topology"]["l1_km"] = -5;
  j["optimizer"]["learning_rate"] = "fast";
  j["optimizer"]["max_iters"] = 2.5;
  j["optimizer"]["f_min_thz"] = 230.0;
  j["pumps"]["forward"] = -1;
  const auto ps = problems_of(j);
  EXPECT_TRUE(mentions(ps, "topology.l1_km"));
  EXPECT_TRUE(mentions(ps, "optimizer.learning_rate"));
  EXPECT_TRUE(mentions(ps, "optimizer.max_iters"));
  EXPECT_TRUE(mentions(ps, "f_max_thz must exceed f_min_thz"));
  EXPECT_TRUE(mentions(ps, "pumps.forward"));
  EXPECT_GE(ps.size(), 5u);
}

TEST(ParseScenario, UnknownKeysAreRejected) {
  auto j = tiny_ropa();
  j["toplogy"] = json::object();
  j["optimizer"]["lerning_rate"] = 0.1;
  j["topology"]["channels"]["cnt"] = 3;
  const auto ps = problems_of(j);
  EXPECT_TRUE(mentions(ps, "config.toplogy: unknown field"));
  EXPECT_TRUE(mentions(ps, "optimizer.lerning_rate: unknown field"));
  EXPECT_TRUE(mentions(ps, "topology.channels.cnt: unknown field"));
}

TEST(ParseScenario, RequiredFieldsAndTopologyRules) {
  auto j = tiny_ropa();
  j.erase("target_dbm_per_channel");
  j["topology"].erase("kind");
  auto ps = problems_of(j);
  EXPECT_TRUE(mentions(ps, "target_dbm_per_channel: required"));
  EXPECT_TRUE(mentions(ps, "topology.kind: required"));

  j = tiny_ropa();
  j["topology"]["kind"] = "hybrid";
  j["pumps"]["backward_init_dbm"] = 25.0;
  ps = problems_of(j);
  EXPECT_TRUE(mentions(ps, "hybrid topology has no remote pumps"));
  EXPECT_TRUE(mentions(ps, "40-channel grid"));
  EXPECT_TRUE(mentions(ps, "backward_init_dbm"));

  j = tiny_ropa();
  j["pumps"] = {{"forward", 0}, {"remote", 0}};
  EXPECT_TRUE(mentions(problems_of(j), "needs forward or remote pumps"));
  EXPECT_THROW(parse_scenario(json::array()), ConfigError);
}

TEST(ParseScenario, SeedOverridesStageSeeds) {
  auto j = tiny_ropa();
  j["seed"] = 77;
  const auto c = parse_scenario(j);
  EXPECT_EQ(c.gain_fit.seed, 77u);
  EXPECT_EQ(c.dataset.seed, 77u);
  EXPECT_EQ(c.train.seed, 77u);
  j["gain_fit"]["seed"] = 5;
  EXPECT_EQ(parse_scenario(j).gain_fit.seed, 5u);
}

TEST(ParseScenario, LaunchCsvRelativeToConfig) {
  fs::create_directories(kWork);
  std::ofstream(kWork / "launch.csv") << "f_thz,p_dbm\n192,1\n193,2\n194,3\n195,4\n";
  auto j = tiny_ropa();
  j["topology"]["launch_csv"] = "launch.csv";
  const auto c = parse_scenario(j, kWork);
  EXPECT_EQ(c.topology.launch(), (std::vector<double>{1.0, 2.0, 3.0, 4.0}));
  j["topology"]["channels"]["count"] = 5;
  j["topology"]["channels"]["spacing_ghz"] = 500;
  EXPECT_THROW(parse_scenario(j, kWork), Error);
}

TEST(Validation, ZeroPumpsGiveAnalyticLoss) {
  LinkTopology t;
  t.l1_km = 30.0;
  t.l2_km = 25.0;
  t.delivery_fiber.length_km = 25.0;
  t.channel_freqs_thz = {193.0};
  t.launch_dbm = {3.0};
  ValidationSettings vs;
  vs.oracle_dz_km = 0.01;
  vs.bvp_dz_km = 0.05;
  PumpSet none{{{205.0, 0.0, PumpGroup::forward, true}, {206.0, 0.0, PumpGroup::remote, true}}};
  const auto ropa = oracle_received(none, t, table_gain(), vs);
  EXPECT_NEAR(ropa[0], 3.0 - 0.2 * 55.0, 1e-9);
  t.kind = LinkKind::hybrid;
  PumpSet bw{{{206.1, 0.0, PumpGroup::backward, false}}};
  const auto hyb = oracle_received(bw, t, table_gain(), vs);
  EXPECT_NEAR(hyb[0], 3.0 - 0.2 * 55.0, 1e-9);
}

TEST(Validation, RopaModelMatchesOracleAndProfilesJoin) {
  LinkTopology t;
  t.l1_km = 40.0;
  t.l2_km = 30.0;
  t.delivery_fiber.length_km = 30.0;
  t.channel_freqs_thz = {192.0, 193.0, 194.0, 195.0};
  t.launch_dbm = {0.0, 0.0, 0.0, 0.0};
  PumpSet s{{{205.03, 300.0, PumpGroup::forward, true}, {207.61, 200.0, PumpGroup::remote, true}}};
  ForwardSolveConfig fc;
  fc.interpolator = table_gain();
  const auto m = model_received(s, t, fc, nullptr, true);
  ASSERT_EQ(m.link.profiles.size(), 3u);
  const auto& a = m.link.profiles[0];
  const auto& b = m.link.profiles[2];
  EXPECT_DOUBLE_EQ(b.z_km.front(), 40.0);
  EXPECT_NEAR(b.z_km.back(), 70.0, 1e-9);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto ia = static_cast<std::size_t>(std::find(a.frequencies_thz.begin(), a.frequencies_thz.end(), t.channel_freqs_thz[i]) - a.frequencies_thz.begin());
    const auto ib = static_cast<std::size_t>(std::find(b.frequencies_thz.begin(), b.frequencies_thz.end(), t.channel_freqs_thz[i]) - b.frequencies_thz.begin());
    EXPECT_DOUBLE_EQ(a.powers_dbm[ia].back(), b.powers_dbm[ib].front());
    EXPECT_NEAR(b.powers_dbm[ib].back(), m.received_dbm[i], 1e-12);
  }
  ValidationSettings vs;
  vs.oracle_dz_km = 0.01;
  const auto v = validate_design(s, t, std::vector<double>(4, -10.0), m.received_dbm, ValidationMode::neural_gr,
                                 load_gain_table(std::string(RAMAN_DATA_DIR) + "/ssmf_gr.csv"), vs);
  EXPECT_LT(v.max_model_oracle_db, 0.01);
  double mae = 0.0;
  for (double o : v.oracle_dbm) mae = std::max(mae, std::abs(o + 10.0));
  EXPECT_DOUBLE_EQ(v.mae_db, mae);
  const auto csv = profile_csv(m.link.profiles, t);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "z_km,f_thz,p_dbm");
}

TEST(Validation, HybridValidityFlag) {
  LinkTopology t;
  t.kind = LinkKind::hybrid;
  t.l1_km = 30.0;
  t.l2_km = 30.0;
  t.edfa_out_dbm = 5.0;
  BackwardGainModel bgm;
  bgm.net = Mlp({4, 4, 40}, 1);
  bgm.pump_freqs_thz = BackwardAmpSpec{}.pump_freqs_thz;
  bgm.channel_freqs_thz = t.channel_freqs_thz;
  ForwardSolveConfig fc;
  fc.interpolator = table_gain();
  PumpSet s;
  for (double f : bgm.pump_freqs_thz) s.pumps.push_back({f, 10.0, PumpGroup::backward, false});
  const auto low = model_received(s, t, fc, &bgm);
  EXPECT_FALSE(low.link.validity_warning);
  EXPECT_NEAR(low.link.section1_total_dbm, 5.0 - 0.2 * 30.0, 0.05);
  s.pumps.push_back({205.0, 2000.0, PumpGroup::forward, true});
  const auto high = model_received(s, t, fc, &bgm);
  EXPECT_GT(high.link.section1_total_dbm, 10.0);
  EXPECT_TRUE(high.link.validity_warning);
}

TEST(Cli, ConfigErrorsExitWithCodeTwo) {
  auto j = tiny_ropa();
  j["topology"]["l1_km"] = -1;
  j["bogus"] = 1;
  const auto p = write_config("bad.json", j);
  EXPECT_EQ(run_cli("--config " + p.string() + " --out-dir " + (kWork / "bad").string() + " optimize"), 2);
  std::ifstream in(kWork / "cli.log");
  const std::string log((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_NE(log.find("topology.l1_km"), std::string::npos);
  EXPECT_NE(log.find("config.bogus: unknown field"), std::string::npos);
  EXPECT_FALSE(fs::exists(kWork / "bad" / "report.json"));

  std::ofstream(kWork / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("--config " + (kWork / "broken.json").string() + " optimize"), 2);
  EXPECT_EQ(run_cli("--config " + (kWork / "missing.json").string() + " optimize"), 2);
  EXPECT_EQ(run_cli("optimize"), 2);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, OptimizeWritesArtifactsDeterministically) {
  const auto p = write_config("tiny.json", tiny_ropa());
  const auto out1 = kWork / "run1";
  const auto out2 = kWork / "run2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  ASSERT_EQ(run_cli("--config " + p.string() + " --out-dir " + out1.string() + " optimize"), 0);
  ASSERT_EQ(run_cli("--config " + p.string() + " --out-dir " + out2.string() + " optimize"), 0);
  EXPECT_EQ(first_line(out1 / "profile.csv"), "z_km,f_thz,p_dbm");
  EXPECT_EQ(first_line(out1 / "trace.csv"), "iteration,cost,mse_db2,penalty,pumps");
  EXPECT_EQ(first_line(out1 / "validation.csv"), "f_thz,target_dbm,model_dbm,oracle_dbm");
  EXPECT_EQ(first_line(out1 / "validation_linear_gr.csv"), "f_thz,target_dbm,model_dbm,oracle_dbm");
  EXPECT_EQ(first_line(out1 / "summary.csv"), "key,value");
  EXPECT_TRUE(fs::exists(out1 / "timing.json"));
  for (const char* f : {"pumps.json", "report.json", "trace.csv", "validation.csv"})
    EXPECT_EQ(read_file(out1 / f), read_file(out2 / f)) << f;

  const auto report = json::parse(read_file(out1 / "report.json"));
  EXPECT_EQ(report.at("name"), "tiny");
  EXPECT_EQ(report.at("validation").size(), 2u);
  const auto pumps = json::parse(read_file(out1 / "pumps.json")).get<PumpSet>();
  EXPECT_GE(pumps.pumps.size(), 1u);

  ASSERT_EQ(run_cli("--config " + p.string() + " --out-dir " + out1.string() + " validate"), 0);
  const auto v = json::parse(read_file(out1 / "validation.json"));
  EXPECT_DOUBLE_EQ(v.at(0).at("mae_db").get<double>(), report.at("validation").at(0).at("mae_db").get<double>());
  EXPECT_EQ(run_cli("--out-dir " + out1.string() + " report"), 0);
}

TEST(Cli, FitGrWritesInterpolant) {
  const auto p = write_config("tiny.json", tiny_ropa());
  const auto out = kWork / "fit";
  ASSERT_EQ(run_cli("--config " + p.string() + " --out-dir " + out.string() + " fit-gr"), 0);
  const auto g = gain_interpolator_from_json(json::parse(read_file(out / "gr_interpolant.json")));
  EXPECT_EQ(g.kind(), GainKind::neural);
  EXPECT_LE(g.heldout_mse(), 1.0);
}
