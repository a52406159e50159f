#pragma once

// Normalized Raman gain coefficient g(df): the tabulated curve, its
// piecewise-linear interpolant, a straight-line fit through the origin, and
// a trained neural interpolant that is smooth enough to differentiate in
// the frequency offset. Also the signed pairwise coupling used by the
// solvers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "raman/mlp.hpp"
#include "raman/units.hpp"

namespace raman {

struct RamanGainTable {
  std::vector<double> offsets_thz;
  std::vector<double> normalized_gain;

  double max_offset_thz() const { return offsets_thz.back(); }
  std::size_t size() const { return offsets_thz.size(); }
};

inline RamanGainTable make_gain_table(std::vector<double> offsets, std::vector<double> gains) {
  if (offsets.size() < 2) throw Error("gain table: need at least two rows");
  if (offsets.size() != gains.size()) throw Error("gain table: column lengths differ");
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    if (!std::isfinite(offsets[i]) || !std::isfinite(gains[i])) throw Error("gain table: non-finite entry");
    if (gains[i] < 0.0 || gains[i] > 1.0001)
      throw Error("gain table: gain outside [0, 1] at row " + std::to_string(i));
    if (i > 0 && !(offsets[i] > offsets[i - 1]))
      throw Error("gain table: offsets not strictly ascending at row " + std::to_string(i));
  }
  if (offsets.front() != 0.0) throw Error("gain table: first offset must be 0");
  if (std::abs(gains.front()) > 1e-12) throw Error("gain table: gain at zero offset must be 0");
  const double peak = *std::max_element(gains.begin(), gains.end());
  if (std::abs(peak - 1.0) > 1e-4) throw Error("gain table: curve is not normalized to a unit peak");
  return {std::move(offsets), std::move(gains)};
}

/// Reads a `offset_thz,gain` CSV with a header line.
inline RamanGainTable load_gain_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open gain table " + path);
  std::string line;
  if (!std::getline(in, line)) throw Error("gain table " + path + " is empty");
  std::vector<double> offsets;
  std::vector<double> gains;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::istringstream ss(line);
    std::string a;
    std::string b;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b))
      throw Error("gain table " + path + ": malformed line " + std::to_string(lineno));
    try {
      offsets.push_back(std::stod(a));
      gains.push_back(std::stod(b));
    } catch (const std::exception&) {
      throw Error("gain table " + path + ": malformed number on line " + std::to_string(lineno));
    }
  }
  if (offsets.empty()) throw Error("gain table " + path + " has no data rows");
  return make_gain_table(std::move(offsets), std::move(gains));
}

namespace detail {
inline void check_domain(const RamanGainTable& t, double df) {
  if (!(df >= 0.0) || df > t.max_offset_thz() + 1e-12)
    throw Error("gain offset " + std::to_string(df) + " THz outside [0, " + std::to_string(t.max_offset_thz()) + "]");
}
// Index of the segment [i, i+1] containing df; knots belong to the segment on their right.
inline std::size_t segment(const RamanGainTable& t, double df) {
  auto it = std::upper_bound(t.offsets_thz.begin(), t.offsets_thz.end(), df);
  auto i = static_cast<std::size_t>(std::distance(t.offsets_thz.begin(), it));
  i = i == 0 ? 0 : i - 1;
  return std::min(i, t.size() - 2);
}
}  // namespace detail

inline double linear_gain(const RamanGainTable& t, double df) {
  detail::check_domain(t, df);
  const std::size_t i = detail::segment(t, df);
  const double f0 = t.offsets_thz[i];
  const double f1 = t.offsets_thz[i + 1];
  const double w = (df - f0) / (f1 - f0);
  return t.normalized_gain[i] + w * (t.normalized_gain[i + 1] - t.normalized_gain[i]);
}

inline double linear_gain_slope(const RamanGainTable& t, double df) {
  detail::check_domain(t, df);
  const std::size_t i = detail::segment(t, df);
  return (t.normalized_gain[i + 1] - t.normalized_gain[i]) / (t.offsets_thz[i + 1] - t.offsets_thz[i]);
}

enum class GainKind { linear, linear_fit, neural };

NLOHMANN_JSON_SERIALIZE_ENUM(GainKind,
                             {{GainKind::linear, "linear"}, {GainKind::linear_fit, "linear_fit"}, {GainKind::neural, "neural"}})

struct GainEval {
  double gain = 0.0;
  double derivative = 0.0;
};

/// Evaluates g(df) and dg/d(df) on [0, max offset] of its table.
///
/// `linear` interpolates the table piecewise; `linear_fit` is the line
/// through the origin fitted to the rising edge of the curve (up to its
/// peak) and extended over the whole domain; `neural` is an MLP on the
/// offset scaled by `input_scale_thz`.
class GainInterpolator {
 public:
  static GainInterpolator linear(RamanGainTable table) {
    GainInterpolator g;
    g.kind_ = GainKind::linear;
    g.table_ = std::move(table);
    return g;
  }

  static GainInterpolator linear_fit(RamanGainTable table) {
    GainInterpolator g;
    g.kind_ = GainKind::linear_fit;
    const auto peak = std::max_element(table.normalized_gain.begin(), table.normalized_gain.end());
    const auto last = static_cast<std::size_t>(std::distance(table.normalized_gain.begin(), peak));
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i <= last; ++i) {
      num += table.offsets_thz[i] * table.normalized_gain[i];
      den += table.offsets_thz[i] * table.offsets_thz[i];
    }
    g.slope_ = num / den;
    g.table_ = std::move(table);
    return g;
  }

  static GainInterpolator neural(RamanGainTable table, Mlp net, double input_scale_thz, double heldout_mse) {
    if (net.input_size() != 1 || net.output_size() != 1) throw Error("neural gain interpolator needs a 1 -> 1 net");
    if (!(input_scale_thz > 0.0)) throw Error("neural gain interpolator: input scale must be > 0");
    GainInterpolator g;
    g.kind_ = GainKind::neural;
    g.table_ = std::move(table);
    g.net_ = std::make_shared<const Mlp>(std::move(net));
    g.input_scale_ = input_scale_thz;
    g.heldout_mse_ = heldout_mse;
    return g;
  }

  GainKind kind() const { return kind_; }
  const RamanGainTable& table() const { return table_; }
  const Mlp* net() const { return net_.get(); }
  double max_offset_thz() const { return table_.max_offset_thz(); }
  double input_scale_thz() const { return input_scale_; }
  double heldout_mse() const { return heldout_mse_; }
  double slope() const { return slope_; }

  GainEval eval(double df) const {
    detail::check_domain(table_, df);
    switch (kind_) {
      case GainKind::linear: return {linear_gain(table_, df), linear_gain_slope(table_, df)};
      case GainKind::linear_fit: return {slope_ * df, slope_};
      case GainKind::neural: {
        const double x = df / input_scale_;
        const double y = (*net_)(std::span<const double>(&x, 1))[0];
        const double one = 1.0;
        const double dy = net_->input_vjp(std::span<const double>(&x, 1), std::span<const double>(&one, 1))[0];
        return {y, dy / input_scale_};
      }
    }
    return {};
  }

  /// Same as eval() for every offset; the neural kind runs one batched pass.
  std::vector<GainEval> eval_many(std::span<const double> df) const {
    std::vector<GainEval> out(df.size());
    if (kind_ != GainKind::neural) {
      for (std::size_t i = 0; i < df.size(); ++i) out[i] = eval(df[i]);
      return out;
    }
    if (df.empty()) return out;
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(df.size()));
    for (std::size_t i = 0; i < df.size(); ++i) {
      detail::check_domain(table_, df[i]);
      x(0, static_cast<Eigen::Index>(i)) = df[i] / input_scale_;
    }
    const Eigen::MatrixXd y = net_->forward_batch(x);
    const Eigen::MatrixXd dy = net_->input_gradient_batch(x);
    for (std::size_t i = 0; i < df.size(); ++i) {
      const auto c = static_cast<Eigen::Index>(i);
      out[i] = {y(0, c), dy(0, c) / input_scale_};
    }
    return out;
  }

 private:
  GainKind kind_ = GainKind::linear;
  RamanGainTable table_;
  std::shared_ptr<const Mlp> net_;
  double input_scale_ = 40.0;
  double heldout_mse_ = 0.0;
  double slope_ = 0.0;
};

inline GainEval eval_gain(const GainInterpolator& g, double df) { return g.eval(df); }

struct GainFitConfig {
  std::vector<std::size_t> hidden = {100, 100, 100};
  int epochs = 3000;
  std::size_t batch_size = 64;
  double learning_rate = 2e-3;
  double final_learning_rate = 1e-5;
  double sample_spacing_thz = 0.05;
  std::size_t holdout_points = 2000;
  double input_scale_thz = 40.0;
  double mse_threshold = 1e-4;
  std::uint64_t seed = 42;
};

class GainFitError : public Error {
 public:
  GainFitError(const std::string& what, double achieved) : Error(what), achieved_mse(achieved) {}
  double achieved_mse;
};

/// MSE of an interpolator against the table's piecewise-linear curve at
/// uniformly drawn offsets.
inline double heldout_gain_mse(const GainInterpolator& g, const RamanGainTable& t, std::size_t points,
                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, t.max_offset_thz());
  std::vector<double> df(points);
  for (auto& d : df) d = u(rng);
  const auto ev = g.eval_many(df);
  double s = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    const double e = ev[i].gain - linear_gain(t, df[i]);
    s += e * e;
  }
  return s / static_cast<double>(points);
}

/// Trains the neural interpolant with Adam on the MSE against densely
/// sampled table values. Throws GainFitError if the held-out MSE misses
/// `cfg.mse_threshold`.
inline GainInterpolator fit_neural_interpolator(const RamanGainTable& table, const GainFitConfig& cfg,
                                                const std::function<bool(int, double)>& on_epoch = {}) {
  const RamanGainTable t = make_gain_table(table.offsets_thz, table.normalized_gain);
  if (!(cfg.sample_spacing_thz > 0.0)) throw Error("gain fit: sample spacing must be > 0");
  std::vector<double> xs;
  for (double f = 0.0; f <= t.max_offset_thz() + 1e-12; f += cfg.sample_spacing_thz) xs.push_back(f);
  xs.insert(xs.end(), t.offsets_thz.begin(), t.offsets_thz.end());
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end(), [](double a, double b) { return std::abs(a - b) < 1e-9; }), xs.end());
  for (auto& x : xs) x = std::min(x, t.max_offset_thz());

  Eigen::MatrixXd x(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::MatrixXd y(1, static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    x(0, static_cast<Eigen::Index>(i)) = xs[i] / cfg.input_scale_thz;
    y(0, static_cast<Eigen::Index>(i)) = linear_gain(t, xs[i]);
  }

  std::vector<std::size_t> sizes{1};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(1);
  Mlp net(sizes, cfg.seed);
  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.final_learning_rate = cfg.final_learning_rate;
  tc.seed = cfg.seed + 1;
  train_mse(net, x, y, tc, on_epoch);

  auto g = GainInterpolator::neural(t, std::move(net), cfg.input_scale_thz, 0.0);
  const double mse = heldout_gain_mse(g, t, cfg.holdout_points, cfg.seed + 2);
  if (!(mse <= cfg.mse_threshold))
    throw GainFitError("neural g_R fit missed the MSE threshold: achieved " + std::to_string(mse), mse);
  return GainInterpolator::neural(t, *g.net(), cfg.input_scale_thz, mse);
}

inline void to_json(nlohmann::json& j, const GainInterpolator& g) {
  j = {{"kind", g.kind()},
       {"table", {{"offset_thz", g.table().offsets_thz}, {"gain", g.table().normalized_gain}}}};
  if (g.kind() == GainKind::neural) {
    j["input_scale_thz"] = g.input_scale_thz();
    j["heldout_mse"] = g.heldout_mse();
    j["net"] = *g.net();
  }
}

inline GainInterpolator gain_interpolator_from_json(const nlohmann::json& j) {
  auto t = make_gain_table(j.at("table").at("offset_thz").get<std::vector<double>>(),
                           j.at("table").at("gain").get<std::vector<double>>());
  switch (j.at("kind").get<GainKind>()) {
    case GainKind::linear: return GainInterpolator::linear(std::move(t));
    case GainKind::linear_fit: return GainInterpolator::linear_fit(std::move(t));
    case GainKind::neural:
      return GainInterpolator::neural(std::move(t), j.at("net").get<Mlp>(), j.at("input_scale_thz").get<double>(),
                                      j.value("heldout_mse", 0.0));
  }
  throw Error("unknown gain interpolator kind");
}

// ---------------------------------------------------------------------------
// Pairwise coupling
// ---------------------------------------------------------------------------

/// K_nm and its partials w.r.t. both frequencies, in 1/(W km).
struct Coupling {
  double k = 0.0;
  double d_fn = 0.0;
  double d_fm = 0.0;
};

/// Coupling of carrier m onto carrier n given g and g' at |f_m - f_n|.
/// Gain side (f_m > f_n): c * g. Depletion side: -(f_n/f_m) * c * g, or
/// plain -c * g when `plain_antisymmetric` is set.
inline Coupling coupling_from_gain(const GainEval& ge, double f_n, double f_m, double c_peak,
                                   bool plain_antisymmetric = false) {
  if (f_m == f_n) return {};
  if (f_m > f_n) return {c_peak * ge.gain, -c_peak * ge.derivative, c_peak * ge.derivative};
  if (plain_antisymmetric) return {-c_peak * ge.gain, -c_peak * ge.derivative, c_peak * ge.derivative};
  const double r = f_n / f_m;
  return {-r * c_peak * ge.gain, -c_peak * (ge.gain / f_m + r * ge.derivative),
          c_peak * r * (ge.gain / f_m + ge.derivative)};
}

/// Offsets beyond the table carry no coupling.
inline GainEval gain_or_zero(const GainInterpolator& g, double df) {
  if (df > g.max_offset_thz()) return {};
  return g.eval(df);
}

inline double coupling_coefficient(const GainInterpolator& g, double f_n, double f_m, const FiberSpec& fiber,
                                   bool plain_antisymmetric = false) {
  if (!(f_n > 0.0) || !(f_m > 0.0)) throw Error("coupling_coefficient: frequencies must be > 0");
  return coupling_from_gain(gain_or_zero(g, std::abs(f_m - f_n)), f_n, f_m, fiber.raman_peak_efficiency_per_w_km,
                            plain_antisymmetric)
      .k;
}

/// Dense N x N coupling matrix (row n, column m), optionally with partials.
struct CouplingMatrix {
  std::size_t n = 0;
  std::vector<double> k;
  std::vector<double> d_fn;
  std::vector<double> d_fm;

  double operator()(std::size_t row, std::size_t col) const { return k[row * n + col]; }
};

inline CouplingMatrix coupling_matrix(const GainInterpolator& g, std::span<const double> freqs, double c_peak,
                                      bool plain_antisymmetric = false, bool with_partials = false) {
  const std::size_t n = freqs.size();
  CouplingMatrix m;
  m.n = n;
  m.k.assign(n * n, 0.0);
  if (with_partials) {
    m.d_fn.assign(n * n, 0.0);
    m.d_fm.assign(n * n, 0.0);
  }
  std::vector<double> offsets;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double df = std::abs(freqs[a] - freqs[b]);
      if (df == 0.0 || df > g.max_offset_thz()) continue;
      offsets.push_back(df);
      pairs.emplace_back(a, b);
    }
  }
  const auto ev = g.eval_many(offsets);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [a, b] = pairs[p];
    const Coupling ab = coupling_from_gain(ev[p], freqs[a], freqs[b], c_peak, plain_antisymmetric);
    const Coupling ba = coupling_from_gain(ev[p], freqs[b], freqs[a], c_peak, plain_antisymmetric);
    m.k[a * n + b] = ab.k;
    m.k[b * n + a] = ba.k;
    if (with_partials) {
      m.d_fn[a * n + b] = ab.d_fn;
      m.d_fm[a * n + b] = ab.d_fm;
      m.d_fn[b * n + a] = ba.d_fn;
      m.d_fm[b * n + a] = ba.d_fm;
    }
  }
  return m;
}

}  // namespace raman
