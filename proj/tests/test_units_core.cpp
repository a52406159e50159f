#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "raman/units.hpp"

using namespace raman;

TEST(DbmToMw, ReferencePoints) {
  EXPECT_DOUBLE_EQ(dbm_to_mw(0.0), 1.0);
  EXPECT_NEAR(dbm_to_mw(30.0), 1000.0, 1e-10);
  EXPECT_NEAR(dbm_to_mw(-26.0), 0.0025118864315095794, 1e-15);
}

TEST(DbmToMw, RejectsNonFinite) {
  EXPECT_THROW(dbm_to_mw(std::nan("")), Error);
  EXPECT_THROW(dbm_to_mw(INFINITY), Error);
}

TEST(MwToDbm, ZeroIsMinusInfinityAndNegativeThrows) {
  EXPECT_TRUE(std::isinf(mw_to_dbm(0.0)));
  EXPECT_LT(mw_to_dbm(0.0), 0.0);
  EXPECT_THROW(mw_to_dbm(-1.0), Error);
}

TEST(DbmToMw, RoundTripOverRange) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-60.0, 35.0);
  for (int i = 0; i < 2000; ++i) {
    const double p = u(rng);
    const double back = mw_to_dbm(dbm_to_mw(p));
    EXPECT_NEAR(back, p, 1e-12 * std::max(1.0, std::abs(p)));
    const double mw = dbm_to_mw(p);
    EXPECT_NEAR(dbm_to_mw(mw_to_dbm(mw)) / mw, 1.0, 1e-12);
  }
}

TEST(Attenuation, ReferencePoints) {
  EXPECT_NEAR(attenuation_np_per_km(0.2), 0.2 * std::numbers::ln10 / 10.0, 1e-16);
  EXPECT_NEAR(attenuation_np_per_km(0.2), 0.04605, 1e-5);
  EXPECT_NEAR(attenuation_np_per_km(10.0 / std::numbers::ln10), 1.0, 1e-15);
  EXPECT_THROW(attenuation_np_per_km(0.0), Error);
  EXPECT_THROW(attenuation_np_per_km(-0.2), Error);
}

TEST(Attenuation, SolverConversionAllowsLossless) {
  EXPECT_EQ(loss_np_per_km(0.0), 0.0);
  EXPECT_THROW(loss_np_per_km(-1.0), Error);
}

TEST(ChannelGrid, FortyChannelCBand) {
  const auto g = build_channel_grid(40, 100.0, 191.2, -13.0);
  ASSERT_EQ(g.size(), 40u);
  EXPECT_NEAR(g.front().frequency_thz, 191.2, 1e-12);
  EXPECT_NEAR(g.back().frequency_thz, 195.1, 1e-12);
  EXPECT_NEAR(mw_to_dbm(total_power_mw(g)), -13.0 + 10.0 * std::log10(40.0), 1e-12);
  EXPECT_NEAR(mw_to_dbm(total_power_mw(g)), 3.02, 0.01);
  for (const auto& c : g) {
    EXPECT_EQ(c.direction, Direction::forward);
    EXPECT_EQ(c.role, Role::channel);
  }
}

TEST(ChannelGrid, SingleChannel) {
  const auto g = build_channel_grid(1, 100.0, 193.0, 0.0);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_DOUBLE_EQ(g[0].frequency_thz, 193.0);
  EXPECT_DOUBLE_EQ(g[0].power_mw, 1.0);
}

TEST(ChannelGrid, ArithmeticSpacing) {
  const auto g = build_channel_grid(3, 50.0, 200.0, -3.0);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_NEAR(g[0].frequency_thz, 200.0, 1e-12);
  EXPECT_NEAR(g[1].frequency_thz, 200.05, 1e-12);
  EXPECT_NEAR(g[2].frequency_thz, 200.1, 1e-12);
}

TEST(ChannelGrid, TotalPowerIsExactMultiple) {
  for (int n : {1, 7, 40, 96}) {
    for (double p : {-20.0, -3.0, 0.0, 4.5}) {
      const auto g = build_channel_grid(static_cast<std::size_t>(n), 50.0, 190.0, p);
      EXPECT_NEAR(total_power_mw(g), n * std::pow(10.0, p / 10.0), 1e-12 * n);
    }
  }
}

TEST(ChannelGrid, RejectsBadArguments) {
  EXPECT_THROW(build_channel_grid(0, 100.0, 193.0, 0.0), Error);
  EXPECT_THROW(build_channel_grid(4, 0.0, 193.0, 0.0), Error);
  EXPECT_THROW(build_channel_grid(4, -50.0, 193.0, 0.0), Error);
}

TEST(Validate, CarrierAndFiberInvariants) {
  Carrier c;
  EXPECT_NO_THROW(validate(c));
  c.frequency_thz = 0.0;
  EXPECT_THROW(validate(c), Error);
  c = Carrier{};
  c.power_mw = -1.0;
  EXPECT_THROW(validate(c), Error);
  FiberSpec f;
  EXPECT_NO_THROW(validate(f));
  f.length_km = 0.0;
  EXPECT_THROW(validate(f), Error);
  f = FiberSpec{};
  f.effective_area_um2 = 0.0;
  EXPECT_THROW(validate(f), Error);
  f = FiberSpec{};
  f.raman_peak_efficiency_per_w_km = 0.0;
  EXPECT_THROW(validate(f), Error);
}

TEST(Json, FiberRoundTripAndDefaults) {
  FiberSpec f;
  f.length_km = 42.0;
  f.raman_peak_efficiency_per_w_km = 0.5;
  const nlohmann::json j = f;
  const auto g = j.get<FiberSpec>();
  EXPECT_EQ(g.length_km, 42.0);
  EXPECT_EQ(g.raman_peak_efficiency_per_w_km, 0.5);
  const auto d = nlohmann::json::object().get<FiberSpec>();
  EXPECT_EQ(d.length_km, 100.0);
  EXPECT_EQ(d.effective_area_um2, 80.0);
  EXPECT_EQ(d.attenuation_db_per_km, 0.2);
  EXPECT_EQ(d.raman_peak_efficiency_per_w_km, 0.39);
  EXPECT_THROW((nlohmann::json{{"length_km", -1}}.get<FiberSpec>()), Error);
}

TEST(Json, CarrierRoundTrip) {
  Carrier c;
  c.frequency_thz = 205.5;
  c.power_mw = 250.0;
  c.direction = Direction::backward;
  c.role = Role::pump;
  const nlohmann::json j = c;
  EXPECT_EQ(j.at("direction"), "backward");
  EXPECT_EQ(j.at("role"), "pump");
  const auto d = j.get<Carrier>();
  EXPECT_EQ(d.frequency_thz, 205.5);
  EXPECT_NEAR(d.power_mw, 250.0, 1e-10);
  EXPECT_EQ(d.direction, Direction::backward);
  Carrier off = c;
  off.power_mw = 0.0;
  const nlohmann::json jo = off;
  EXPECT_TRUE(jo.at("power_dbm").is_null());
  EXPECT_EQ(jo.get<Carrier>().power_mw, 0.0);
}
