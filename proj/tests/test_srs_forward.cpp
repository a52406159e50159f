#include <algorithm>
#include <numeric>
#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "raman/link.hpp"
#include "raman/srs_forward.hpp"

using namespace raman;

namespace {

const std::string kTable = std::string(RAMAN_DATA_DIR) + "/ssmf_gr.csv";

std::shared_ptr<const GainInterpolator> table_gain() {
  static const auto g = std::make_shared<const GainInterpolator>(GainInterpolator::linear(load_gain_table(kTable)));
  return g;
}

ForwardSolveConfig solver(double dz, StepRule rule = StepRule::net_rate) {
  ForwardSolveConfig c;
  c.dz_km = dz;
  c.step_rule = rule;
  c.interpolator = table_gain();
  return c;
}

OracleConfig oracle(double dz = 1e-3) {
  OracleConfig c;
  c.dz_km = dz;
  c.interpolator = table_gain();
  return c;
}

Carrier pump(double f, double mw, double att = 0.2) {
  Carrier c;
  c.frequency_thz = f;
  c.power_mw = mw;
  c.role = Role::pump;
  c.attenuation_db_per_km = att;
  return c;
}

// Segment A of the initial Scenario-1 design: EDFA-shaped 15 dBm load and
// 20 forward pumps sharing 2 W over 198..220 THz, 150 km.
std::vector<Carrier> scenario1_segment_a() {
  LinkTopology t;
  const auto launch = t.launch();
  std::vector<Carrier> cs;
  for (std::size_t i = 0; i < launch.size(); ++i) {
    Carrier c;
    c.frequency_thz = t.channel_freqs_thz[i];
    c.power_mw = dbm_to_mw(launch[i]);
    cs.push_back(c);
  }
  for (const auto& p : spread_pumps(20, PumpGroup::forward, 198.0, 220.0, 2000.0)) cs.push_back(pump(p.frequency_thz, p.power_mw));
  return cs;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double photon_flux(const std::vector<Carrier>& cs, const std::vector<double>& dbm) {
  double s = 0.0;
  for (std::size_t i = 0; i < cs.size(); ++i) s += dbm_to_mw(dbm[i]) / cs[i].frequency_thz;
  return s;
}

}  // namespace

TEST(EffectiveLength, SeriesAndClosedFormAgree) {
  for (double b : {-0.5, -1e-3, -1e-7, 0.0, 1e-7, 1e-3, 0.046, 2.0}) {
    const double dz = 0.1;
    const long double bl = b;
    const double want = b == 0.0 ? dz : static_cast<double>(-std::expm1(-bl * dz) / bl);
    EXPECT_NEAR(effective_length(b, dz), want, 1e-14);
    const double h = 1e-6;
    const double slope = (effective_length(b + h, dz) - effective_length(b - h, dz)) / (2 * h);
    EXPECT_NEAR(effective_length_slope(b, dz), slope, 1e-8);
  }
}

TEST(StepSizes, TruncatedLastStep) {
  const auto s = step_sizes(1.05, 0.1);
  ASSERT_EQ(s.size(), 11u);
  EXPECT_NEAR(s.back(), 0.05, 1e-12);
  EXPECT_EQ(step_sizes(100.0, 0.1).size(), 1000u);
  EXPECT_THROW(step_sizes(1.0, 2.0), Error);
  EXPECT_THROW(step_sizes(1.0, 0.0), Error);
}

TEST(PropagateStep, SingleCarrierIsPureLoss) {
  FiberSpec f;
  for (double p : {1e-3, 1.0, 500.0}) {
    std::vector<double> x{std::log(p)};
    propagate_step(x, {pump(193.0, p)}, f, 0.1, *table_gain());
    EXPECT_NEAR(x[0], std::log(p) - attenuation_np_per_km(0.2) * 0.1, 1e-14);
  }
}

TEST(PropagateStep, EqualFrequenciesDoNotCouple) {
  FiberSpec f;
  std::vector<double> x{std::log(100.0), std::log(1.0)};
  propagate_step(x, {pump(193.0, 100.0), pump(193.0, 1.0)}, f, 0.1, *table_gain());
  EXPECT_NEAR(x[0], std::log(100.0) - 0.1 * attenuation_np_per_km(0.2), 1e-14);
  EXPECT_NEAR(x[1], -0.1 * attenuation_np_per_km(0.2), 1e-14);
}

TEST(PropagateStep, PeakOffsetHandEvaluation) {
  FiberSpec f;
  const double a = 0.2 * std::log(10.0) / 10.0;
  const double c = 0.39;
  const double fs = 193.0;
  const double fp = 206.2;
  const double k_sp = c;
  const double k_ps = -(fp / fs) * c;
  // Literal rule: Leff from the pump's loss.
  {
    std::vector<double> x{std::log(1.0), std::log(100.0)};
    propagate_step(x, {pump(fs, 1.0), pump(fp, 100.0)}, f, 0.1, *table_gain(), false, StepRule::literal);
    const double leff = (1.0 - std::exp(-a * 0.1)) / a;
    EXPECT_NEAR(x[0], -a * 0.1 + k_sp * leff * 0.1, 1e-13);
    EXPECT_NEAR(x[1], std::log(100.0) - a * 0.1 + k_ps * leff * 1e-3, 1e-13);
  }
  // Net-rate rule: Leff from the pump's net decay rate a - 1e-3 K_ps P_s.
  {
    std::vector<double> x{std::log(1.0), std::log(100.0)};
    propagate_step(x, {pump(fs, 1.0), pump(fp, 100.0)}, f, 0.1, *table_gain());
    const double b_p = a - 1e-3 * k_ps * 1.0;
    const double b_s = a - 1e-3 * k_sp * 100.0;
    const double leff_p = (1.0 - std::exp(-b_p * 0.1)) / b_p;
    const double leff_s = (1.0 - std::exp(-b_s * 0.1)) / b_s;
    EXPECT_NEAR(x[0], -a * 0.1 + k_sp * leff_p * 0.1, 1e-13);
    EXPECT_NEAR(x[1], std::log(100.0) - a * 0.1 + k_ps * leff_s * 1e-3, 1e-13);
  }
}

TEST(PropagateStep, RejectsBackwardCarriersAndShapeMismatch) {
  FiberSpec f;
  auto c = pump(193.0, 1.0);
  c.direction = Direction::backward;
  std::vector<double> x{0.0};
  EXPECT_THROW(propagate_step(x, {c}, f, 0.1, *table_gain()), Error);
  std::vector<double> y{0.0, 0.0};
  EXPECT_THROW(propagate_step(y, {pump(193.0, 1.0)}, f, 0.1, *table_gain()), Error);
}

TEST(PropagateSpan, PureLossOverHundredKilometres) {
  FiberSpec f;
  Carrier c;
  c.power_mw = 1.0;
  const auto r = propagate_span({c}, f, solver(0.1));
  EXPECT_NEAR(r.output_dbm[0], -20.0, 1e-9);
  const auto o = propagate_span_oracle({c}, f, oracle());
  EXPECT_NEAR(o.output_dbm[0], -20.0, 1e-9);
}

TEST(PropagateSpan, ZeroPowerPumpsChangeNothing) {
  FiberSpec f;
  auto load = build_channel_grid(40, 100.0, 191.2, -13.0);
  const auto bare = propagate_span(load, f, solver(0.1));
  auto with = load;
  for (double fp : {205.0, 208.0, 212.0}) with.push_back(pump(fp, 0.0));
  const auto r = propagate_span(with, f, solver(0.1));
  for (std::size_t i = 0; i < load.size(); ++i) EXPECT_EQ(r.output_dbm[i], bare.output_dbm[i]);
  for (std::size_t i = load.size(); i < with.size(); ++i) EXPECT_TRUE(std::isinf(r.output_dbm[i]));
}

TEST(PropagateSpan, ConfigErrors) {
  FiberSpec f;
  f.length_km = 1.0;
  EXPECT_THROW(propagate_span({pump(193.0, 1.0)}, f, solver(2.0)), Error);
  ForwardSolveConfig no_g;
  EXPECT_THROW(propagate_span({pump(193.0, 1.0)}, f, no_g), Error);
}

TEST(Oracle, SelfConvergence) {
  FiberSpec f;
  f.length_km = 50.0;
  auto cs = build_channel_grid(10, 400.0, 191.2, 0.0);
  cs.push_back(pump(205.37, 300.0));
  cs.push_back(pump(208.91, 200.0));
  const auto a = propagate_span_oracle(cs, f, oracle(1e-3));
  const auto b = propagate_span_oracle(cs, f, oracle(5e-4));
  EXPECT_LT(max_abs_diff(a.output_dbm, b.output_dbm), 1e-4);
}

TEST(Oracle, LosslessPhotonConservation) {
  FiberSpec f;
  f.length_km = 20.0;
  f.attenuation_db_per_km = 0.0;
  std::vector<Carrier> cs{pump(193.0, 5.0, 0.0), pump(205.4, 400.0, 0.0)};
  const auto r = propagate_span_oracle(cs, f, oracle(1e-3));
  std::vector<double> in{mw_to_dbm(5.0), mw_to_dbm(400.0)};
  EXPECT_NEAR(photon_flux(cs, r.output_dbm) / photon_flux(cs, in), 1.0, 1e-9);
  EXPECT_GT(r.output_dbm[0], mw_to_dbm(5.0) + 1.0);
}

TEST(PropagateSpan, LosslessPhotonConservationMultiCarrier) {
  FiberSpec f;
  f.length_km = 50.0;
  f.attenuation_db_per_km = 0.0;
  auto cs = build_channel_grid(20, 200.0, 191.2, -3.0, 0.0);
  for (double fp : {203.3, 206.7, 211.1}) cs.push_back(pump(fp, 250.0, 0.0));
  std::vector<double> in;
  for (const auto& c : cs) in.push_back(mw_to_dbm(c.power_mw));
  const auto o = propagate_span_oracle(cs, f, oracle(1e-3));
  EXPECT_NEAR(photon_flux(cs, o.output_dbm) / photon_flux(cs, in), 1.0, 1e-9);
  const auto r = propagate_span(cs, f, solver(0.1));
  EXPECT_NEAR(photon_flux(cs, r.output_dbm) / photon_flux(cs, in), 1.0, 1e-4);
}

TEST(PropagateSpan, ConvergesToOracleOnScenario1PumpSet) {
  FiberSpec f;
  f.length_km = 150.0;
  const auto cs = scenario1_segment_a();
  const auto ref = propagate_span_oracle(cs, f, oracle(1e-3));
  double prev = INFINITY;
  for (double dz : {1.0, 0.5, 0.2, 0.1}) {
    const double d = max_abs_diff(propagate_span(cs, f, solver(dz)).output_dbm, ref.output_dbm);
    EXPECT_LE(d, prev) << "dz " << dz;
    prev = d;
  }
  EXPECT_LE(prev, 0.05);
}

TEST(PropagateSpan, PermutationInvariance) {
  FiberSpec f;
  f.length_km = 80.0;
  auto cs = build_channel_grid(12, 300.0, 191.2, -2.0);
  for (double fp : {204.4, 207.9, 213.2}) cs.push_back(pump(fp, 150.0));
  const auto base = propagate_span(cs, f, solver(0.1));
  const auto base_o = propagate_span_oracle(cs, f, oracle(1e-2));
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::size_t> perm(cs.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Carrier> shuffled;
    for (auto i : perm) shuffled.push_back(cs[i]);
    const auto r = propagate_span(shuffled, f, solver(0.1));
    const auto ro = propagate_span_oracle(shuffled, f, oracle(1e-2));
    for (std::size_t j = 0; j < perm.size(); ++j) {
      EXPECT_EQ(r.output_dbm[j], base.output_dbm[perm[j]]);
      EXPECT_EQ(ro.output_dbm[j], base_o.output_dbm[perm[j]]);
    }
  }
}

TEST(RecordSpan, FusedAdjointMatchesScalarTapeReplay) {
  FiberSpec f;
  f.length_km = 3.0;
  const std::vector<double> freqs{191.6, 193.7, 195.05, 204.33, 207.81, 212.47};
  const std::vector<double> p0{0.5, 1.0, 0.8, 120.0, 200.0, 90.0};
  std::vector<double> loss(freqs.size(), attenuation_np_per_km(0.2));
  const std::vector<double> w{1.0, -0.5, 2.0, 0.3, -0.2, 0.7};
  for (StepRule rule : {StepRule::literal, StepRule::net_rate}) {
    auto cfg = solver(0.25, rule);
    std::vector<double> g_fused;
    {
      ad::Tape tape;
      const auto fv = tape.inputs(freqs);
      std::vector<double> lp;
      for (double p : p0) lp.push_back(std::log(p));
      const auto xv = tape.inputs(lp);
      const auto out = record_span(fv, xv, loss, f.length_km, cfg, f);
      ad::Var y = out[0] * w[0];
      for (std::size_t i = 1; i < out.size(); ++i) y = y + out[i] * w[i];
      auto all = fv;
      all.insert(all.end(), xv.begin(), xv.end());
      g_fused = tape.gradient(y, all);
    }
    // Replay with one scalar node per operation. K enters as its value plus
    // first-order terms in both frequencies so the tape carries dK/df.
    std::vector<double> g_scalar;
    {
      ad::Tape tape;
      const auto fv = tape.inputs(freqs);
      std::vector<double> lp;
      for (double p : p0) lp.push_back(std::log(p));
      const auto x0 = tape.inputs(lp);
      const std::size_t n = freqs.size();
      const auto km = coupling_matrix(*table_gain(), freqs, 0.39, false, true);
      std::vector<ad::Var> k;
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
          k.push_back((fv[a] - freqs[a]) * km.d_fn[a * n + b] + (fv[b] - freqs[b]) * km.d_fm[a * n + b] +
                      km.k[a * n + b]);
      auto xv = x0;
      for (double dz : step_sizes(f.length_km, cfg.dz_km))
        propagate_step<ad::Var, ad::Var>(xv, k, loss, dz, rule);
      ad::Var y = xv[0] * w[0];
      for (std::size_t i = 1; i < n; ++i) y = y + xv[i] * w[i];
      auto wrt = fv;
      wrt.insert(wrt.end(), x0.begin(), x0.end());
      g_scalar = tape.gradient(y, wrt);
    }
    ASSERT_EQ(g_fused.size(), g_scalar.size());
    for (std::size_t i = 0; i < g_fused.size(); ++i)
      EXPECT_NEAR(g_fused[i], g_scalar[i], 1e-10 * std::max(1.0, std::abs(g_scalar[i])));
  }
}

TEST(RecordSpan, GradientMatchesFiniteDifferences) {
  FiberSpec f;
  f.length_km = 60.0;
  auto chans = build_channel_grid(8, 500.0, 191.2, 0.0);
  const std::vector<double> pf{205.05, 206.27, 208.13};
  const std::vector<double> pp{180.0, 120.0, 250.0};
  auto run = [&](const std::vector<double>& fr, const std::vector<double>& pw) {
    auto cs = chans;
    for (std::size_t i = 0; i < fr.size(); ++i) cs.push_back(pump(fr[i], pw[i]));
    const auto out = propagate_span(cs, f, solver(0.1)).output_dbm;
    double s = 0.0;
    for (std::size_t i = 0; i < chans.size(); ++i) s += out[i] * (1.0 + 0.1 * static_cast<double>(i));
    return s;
  };
  ad::Tape tape;
  std::vector<ad::Var> fv;
  std::vector<ad::Var> xv;
  std::vector<double> loss;
  for (const auto& c : chans) {
    fv.push_back(tape.constant(c.frequency_thz));
    xv.push_back(tape.constant(std::log(c.power_mw)));
    loss.push_back(attenuation_np_per_km(0.2));
  }
  std::vector<ad::Var> pf_v;
  std::vector<ad::Var> pp_v;
  for (std::size_t i = 0; i < pf.size(); ++i) {
    pf_v.push_back(tape.input(pf[i]));
    pp_v.push_back(tape.input(mw_to_dbm(pp[i])));
    fv.push_back(pf_v.back());
    xv.push_back(pp_v.back() / kDbPerNeper);
    loss.push_back(attenuation_np_per_km(0.2));
  }
  const auto out = record_span(fv, xv, loss, f.length_km, solver(0.1), f);
  ad::Var y = out[0] * kDbPerNeper;
  for (std::size_t i = 1; i < chans.size(); ++i) y = y + out[i] * (kDbPerNeper * (1.0 + 0.1 * static_cast<double>(i)));
  const auto gf = tape.gradient(y, pf_v);
  const auto gp = tape.gradient(y, pp_v);
  for (std::size_t i = 0; i < pf.size(); ++i) {
    auto a = pf;
    auto b = pf;
    a[i] += 1e-3;
    b[i] -= 1e-3;
    const double fd_f = (run(a, pp) - run(b, pp)) / 2e-3;
    EXPECT_NEAR(gf[i], fd_f, 1e-3 * std::abs(fd_f));
    auto c = pp;
    auto d = pp;
    c[i] *= std::pow(10.0, 0.01 / 10.0);
    d[i] /= std::pow(10.0, 0.01 / 10.0);
    const double fd_p = (run(pf, c) - run(pf, d)) / 0.02;
    EXPECT_NEAR(gp[i], fd_p, 1e-3 * std::abs(fd_p));
  }
}

TEST(ProfileCsv, LongFormat) {
  FiberSpec f;
  f.length_km = 1.0;
  auto cfg = solver(0.5);
  cfg.record_profile = true;
  const auto r = propagate_span({pump(193.0, 1.0), pump(205.0, 100.0)}, f, cfg);
  ASSERT_TRUE(r.profile.has_value());
  EXPECT_EQ(r.profile->z_km, (std::vector<double>{0.0, 0.5, 1.0}));
  std::ostringstream os;
  write_profile_csv(os, *r.profile);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "z_km,f_thz,p_dbm");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
  EXPECT_NEAR(r.profile->powers_dbm[0].back(), r.output_dbm[0], 1e-12);
}
