#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "raman/adam.hpp"
#include "raman/autodiff.hpp"
#include "raman/mlp.hpp"

using namespace raman;
using ad::Var;

namespace {

// Straight loops over the documented parameter layout.
std::vector<double> loop_eval(const Mlp& net, std::vector<double> a) {
  const auto& s = net.layer_sizes();
  for (std::size_t l = 0; l + 1 < s.size(); ++l) {
    std::vector<double> z(s[l + 1]);
    for (std::size_t o = 0; o < s[l + 1]; ++o) {
      double acc = net.bias(l, o);
      for (std::size_t i = 0; i < s[l]; ++i) acc += net.weight(l, o, i) * a[i];
      z[o] = (l + 2 < s.size()) ? std::max(0.0, acc) : acc;
    }
    a = std::move(z);
  }
  return a;
}

// Same net evaluated with scalar tape operations only.
std::vector<Var> scalar_record(const Mlp& net, std::vector<Var> a) {
  const auto& s = net.layer_sizes();
  for (std::size_t l = 0; l + 1 < s.size(); ++l) {
    std::vector<Var> z;
    for (std::size_t o = 0; o < s[l + 1]; ++o) {
      Var acc = a[0] * net.weight(l, o, 0) + net.bias(l, o);
      for (std::size_t i = 1; i < s[l]; ++i) acc = acc + a[i] * net.weight(l, o, i);
      z.push_back(l + 2 < s.size() ? ad::relu(acc) : acc);
    }
    a = std::move(z);
  }
  return a;
}

}  // namespace

TEST(Grad, Square) {
  const std::vector<double> x{3.0};
  const auto r = ad::grad([](std::span<const Var> v) { return v[0] * v[0]; }, x);
  EXPECT_DOUBLE_EQ(r.value, 9.0);
  EXPECT_DOUBLE_EQ(r.gradient[0], 6.0);
}

TEST(Grad, Product) {
  const std::vector<double> x{2.0, 5.0};
  const auto r = ad::grad([](std::span<const Var> v) { return v[0] * v[1]; }, x);
  EXPECT_DOUBLE_EQ(r.value, 10.0);
  EXPECT_DOUBLE_EQ(r.gradient[0], 5.0);
  EXPECT_DOUBLE_EQ(r.gradient[1], 2.0);
}

TEST(Grad, CompositeMatchesFiniteDifferences) {
  auto f = [](std::span<const Var> v) {
    Var a = ad::exp(v[0] * 0.3) * ad::log(v[1] * v[1] + 1.0);
    Var b = ad::sqrt(v[2] * v[2] + 2.0) / (1.0 + v[0] * v[0]);
    Var c = ad::max(v[1], v[2]) - ad::min(v[0], v[2]) * 0.5;
    const std::vector<Var> parts{a, b, c, -v[1] / v[3]};
    return ad::sum(parts);
  };
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x{u(rng), u(rng), u(rng), 2.5 + u(rng)};
    if (std::abs(x[1] - x[2]) < 1e-2 || std::abs(x[0] - x[2]) < 1e-2) x[2] += 0.1;
    const auto g = ad::grad(f, x);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto xp = x;
      auto xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (ad::value(f, xp) - ad::value(f, xm)) / (2 * h);
      EXPECT_NEAR(g.gradient[i], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Grad, NonFiniteNamesTheNode) {
  const std::vector<double> x{-1.0};
  try {
    ad::grad([](std::span<const Var> v) { return ad::log(v[0]); }, x);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
  }
}

TEST(Grad, FanOutAccumulates) {
  const std::vector<double> x{1.5};
  const auto r = ad::grad(
      [](std::span<const Var> v) {
        Var a = v[0] * v[0];
        return a * a + a;
      },
      x);
  EXPECT_NEAR(r.gradient[0], 4 * std::pow(1.5, 3) + 2 * 1.5, 1e-12);
}

TEST(Tape, ParentsPrecedeChildrenAndMixingTapesThrows) {
  ad::Tape t1;
  ad::Tape t2;
  Var a = t1.input(1.0);
  Var b = t2.input(2.0);
  EXPECT_THROW(a + b, Error);
  Var c = a * 3.0 + a;
  EXPECT_GT(c.index, a.index);
  EXPECT_THROW(t2.gradient(c, std::vector<Var>{a}), Error);
}

TEST(GradientCheck, PolynomialIsExact) {
  const std::vector<double> x{0.7, -1.3, 2.0};
  const double d = ad::gradient_check(
      [](std::span<const Var> v) { return v[0] * v[0] * 3.0 + v[0] * v[1] - v[2] * v[2] * 0.5 + v[1]; }, x, 1e-4);
  EXPECT_LE(d, 1e-8);
}

TEST(GradientCheck, NanPropagatesAsError) {
  const std::vector<double> x{0.0};
  EXPECT_THROW(ad::gradient_check([](std::span<const Var> v) { return ad::log(v[0]); }, x, 1e-4), Error);
  EXPECT_THROW(ad::gradient_check([](std::span<const Var> v) { return v[0]; }, x, 0.0), Error);
}

TEST(GradientCheck, MlpAwayFromKinks) {
  const Mlp net({3, 16, 16, 1}, 5);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 50 && checked < 10; ++trial) {
    std::vector<double> x{u(rng), u(rng), u(rng)};
    // Skip points whose pre-activations sit within the FD step of a kink.
    std::vector<double> a = x;
    bool near_kink = false;
    const auto& s = net.layer_sizes();
    for (std::size_t l = 0; l + 2 < s.size(); ++l) {
      std::vector<double> z(s[l + 1]);
      for (std::size_t o = 0; o < s[l + 1]; ++o) {
        double acc = net.bias(l, o);
        for (std::size_t i = 0; i < s[l]; ++i) acc += net.weight(l, o, i) * a[i];
        if (std::abs(acc) < 1e-3) near_kink = true;
        z[o] = std::max(0.0, acc);
      }
      a = z;
    }
    if (near_kink) continue;
    ++checked;
    const double d = ad::gradient_check([&](std::span<const Var> v) { return net.record(v)[0]; }, x, 1e-6);
    EXPECT_LE(d, 1e-5);
  }
  EXPECT_GE(checked, 5);
}

TEST(Mlp, ZeroNetGivesZero) {
  const auto net = Mlp::zeros({4, 8, 3});
  const auto y = net(std::vector<double>{1, 2, 3, 4});
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, SingleLayerIdentity) {
  auto net = Mlp::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) net.weight(0, i, i) = 1.0;
  const std::vector<double> x{-1.5, 0.25, 7.0};
  const auto y = net(x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Mlp, MatchesIndependentLoops) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Mlp net({4, 256, 128, 40}, seed);
    for (auto& p : net.parameters()) p += 0.01 * n(rng);
    std::vector<double> x{n(rng), n(rng), n(rng), n(rng)};
    const auto want = loop_eval(net, x);
    const auto got = net(x);
    ASSERT_EQ(got.size(), 40u);
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-12 * std::max(1.0, std::abs(want[k])));
    Eigen::MatrixXd xb(4, 2);
    for (int i = 0; i < 4; ++i) xb(i, 0) = xb(i, 1) = x[static_cast<std::size_t>(i)];
    const Eigen::MatrixXd yb = net.forward_batch(xb);
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(yb(static_cast<Eigen::Index>(k), 1), want[k], 1e-12 * std::max(1.0, std::abs(want[k])));
  }
}

TEST(Mlp, FusedRecordMatchesScalarTape) {
  const Mlp net({3, 12, 7, 5}, 17);
  const std::vector<double> x{0.3, -0.8, 1.1};
  const std::vector<double> w{0.5, -1.0, 2.0, 0.25, -0.75};
  std::vector<double> g_fused;
  std::vector<double> g_scalar;
  for (int mode = 0; mode < 2; ++mode) {
    ad::Tape tape;
    const auto in = tape.inputs(x);
    const auto out = mode == 0 ? net.record(in) : scalar_record(net, in);
    Var y = out[0] * w[0];
    for (std::size_t k = 1; k < out.size(); ++k) y = y + out[k] * w[k];
    (mode == 0 ? g_fused : g_scalar) = tape.gradient(y, in);
  }
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(g_fused[i], g_scalar[i], 1e-12);
}

TEST(Mlp, ShapeMismatchThrows) {
  const Mlp net({3, 4, 1}, 1);
  EXPECT_THROW(net(std::vector<double>{1.0, 2.0}), Error);
  std::vector<double> g(net.parameters().size() + 1);
  EXPECT_THROW(net.mse_gradient(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(1, 2), g), Error);
}

TEST(Mlp, MseGradientMatchesFiniteDifferences) {
  Mlp net({2, 6, 3}, 4);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd x(2, 5);
  Eigen::MatrixXd y(3, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = n(rng);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = n(rng);
  std::vector<double> g(net.parameters().size());
  net.mse_gradient(x, y, g);
  std::vector<double> scratch(g.size());
  auto params = net.parameters();
  const double h = 1e-6;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double p0 = params[i];
    params[i] = p0 + h;
    const double fp = net.mse_gradient(x, y, scratch);
    params[i] = p0 - h;
    const double fm = net.mse_gradient(x, y, scratch);
    params[i] = p0;
    EXPECT_NEAR(g[i], (fp - fm) / (2 * h), 1e-6);
  }
}

TEST(Mlp, JsonRoundTrip) {
  const Mlp net({2, 5, 3}, 8);
  const nlohmann::json j = net;
  const auto back = j.get<Mlp>();
  const std::vector<double> x{0.4, -0.2};
  EXPECT_EQ(net(x), back(x));
  auto bad = j;
  bad["weights"][0].erase(0);
  EXPECT_THROW(bad.get<Mlp>(), Error);
}

TEST(Mlp, TrainingReducesLossDeterministically) {
  Eigen::MatrixXd x(1, 64);
  Eigen::MatrixXd y(1, 64);
  for (int i = 0; i < 64; ++i) {
    x(0, i) = i / 63.0;
    y(0, i) = std::sin(3.0 * x(0, i));
  }
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 16;
  cfg.learning_rate = 1e-2;
  Mlp a({1, 32, 1}, 3);
  Mlp b({1, 32, 1}, 3);
  std::vector<double> g(a.parameters().size());
  const double before = a.mse_gradient(x, y, g);
  train_mse(a, x, y, cfg);
  train_mse(b, x, y, cfg);
  const double after = a.mse_gradient(x, y, g);
  EXPECT_LT(after, 0.05 * before);
  EXPECT_TRUE(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
}

TEST(Adam, ZeroGradientLeavesParameters) {
  AdamState s(3, 1e-3);
  std::vector<double> p{1.0, -2.0, 3.0};
  const auto p0 = p;
  const std::vector<double> g(3, 0.0);
  for (int i = 0; i < 10; ++i) adam_step(s, p, g);
  EXPECT_EQ(p, p0);
}

TEST(Adam, FirstStepHandEvaluated) {
  AdamState s(1, 1e-3);
  std::vector<double> p{0.0};
  adam_step(s, p, std::vector<double>{1.0});
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps).
  EXPECT_NEAR(p[0], -1e-3 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, ConstantGradientStepTendsToLearningRate) {
  AdamState s(2, 0.01);
  std::vector<double> p{0.0, 0.0};
  const std::vector<double> g{3.0, -0.2};
  for (int i = 0; i < 5000; ++i) {
    const auto before = p;
    adam_step(s, p, g);
    if (i > 100) {
      EXPECT_NEAR(p[0] - before[0], -0.01, 0.01 * 0.01);
      EXPECT_NEAR(p[1] - before[1], 0.01, 0.01 * 0.01);
    }
  }
}

TEST(Adam, ShapeMismatchThrows) {
  AdamState s(2, 1e-3);
  std::vector<double> p{0.0, 0.0, 0.0};
  EXPECT_THROW(adam_step(s, p, std::vector<double>{1.0, 1.0, 1.0}), Error);
}
