#pragma once

// Feed-forward network with ReLU hidden layers and an identity output layer.
// Parameters live in one flat buffer (per layer: row-major weights, then
// biases) so optimizers can treat them as a single vector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "raman/adam.hpp"
#include "raman/autodiff.hpp"
#include "raman/units.hpp"

namespace raman {

/// Parameter storage with Eigen's heap alignment.
using AlignedVector = std::vector<double, Eigen::aligned_allocator<double>>;

class Mlp {
 public:
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Mlp() = default;

  /// He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
  explicit Mlp(std::vector<std::size_t> layer_sizes, std::uint64_t seed = 0) : sizes_(std::move(layer_sizes)) {
    layout();
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(sizes_[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      double* w = params_.data() + offsets_[l];
      for (std::size_t k = 0; k < sizes_[l] * sizes_[l + 1]; ++k) w[k] = u(rng);
    }
  }

  static Mlp zeros(std::vector<std::size_t> layer_sizes) {
    Mlp net;
    net.sizes_ = std::move(layer_sizes);
    net.layout();
    return net;
  }

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  std::size_t num_weight_layers() const { return sizes_.size() - 1; }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }

  double& weight(std::size_t layer, std::size_t out, std::size_t in) {
    return params_[offsets_[layer] + out * sizes_[layer] + in];
  }
  double weight(std::size_t layer, std::size_t out, std::size_t in) const {
    return params_[offsets_[layer] + out * sizes_[layer] + in];
  }
  double& bias(std::size_t layer, std::size_t out) { return params_[bias_offset(layer) + out]; }
  double bias(std::size_t layer, std::size_t out) const { return params_[bias_offset(layer) + out]; }

  std::vector<double> operator()(std::span<const double> x) const {
    std::vector<std::vector<double>> acts;
    forward_keep(x, acts);
    return acts.back();
  }

  /// Vector-Jacobian product: returns sum_k out_adj[k] * d out_k / d x.
  std::vector<double> input_vjp(std::span<const double> x, std::span<const double> out_adj) const {
    std::vector<std::vector<double>> acts;
    forward_keep(x, acts);
    return backprop_input(acts, out_adj);
  }

  /// Evaluates the net on tape variables as one fused node.
  std::vector<ad::Var> record(std::span<const ad::Var> x) const {
    if (x.empty()) throw Error("Mlp::record: empty input");
    std::vector<double> xv(x.size());
    std::vector<std::uint32_t> idx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      xv[i] = x[i].value;
      idx[i] = x[i].index;
    }
    auto acts = std::make_shared<std::vector<std::vector<double>>>();
    forward_keep(xv, *acts);
    const std::vector<double> y = acts->back();
    ad::Tape& tape = *x.front().tape;
    const auto first = static_cast<std::uint32_t>(tape.size());
    const std::size_t n_out = y.size();
    return tape.push_fused(y, [this_copy = *this, acts, idx, first, n_out](std::span<double> adj) {
      const std::span<const double> out_adj(adj.data() + first, n_out);
      const auto gx = this_copy.backprop_input(*acts, out_adj);
      for (std::size_t i = 0; i < idx.size(); ++i) adj[idx[i]] += gx[i];
    });
  }

  /// Batched forward pass; columns are samples.
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& x) const {
    check_batch(x);
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < num_weight_layers(); ++l) {
      Eigen::MatrixXd z = weights_map(l) * a;
      z.colwise() += biases_map(l);
      if (l + 1 < num_weight_layers()) z = z.cwiseMax(0.0);
      a = std::move(z);
    }
    return a;
  }

  /// Per-sample input gradients of a single-output net; columns are samples.
  Eigen::MatrixXd input_gradient_batch(const Eigen::MatrixXd& x) const {
    if (output_size() != 1) throw Error("input_gradient_batch needs a single-output net");
    std::vector<Eigen::MatrixXd> pre;
    forward_batch_keep(x, pre);
    Eigen::MatrixXd delta = Eigen::MatrixXd::Ones(1, x.cols());
    for (std::size_t l = num_weight_layers(); l-- > 0;) {
      delta = weights_map(l).transpose() * delta;
      if (l > 0) delta.array() *= (pre[l - 1].array() > 0.0).cast<double>();
    }
    return delta;
  }

  /// Mean squared error over all outputs and samples; fills `grad` (same
  /// layout as parameters()).
  double mse_gradient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, std::span<double> grad) const {
    if (grad.size() != params_.size()) throw Error("mse_gradient: gradient buffer has wrong size");
    if (y.rows() != static_cast<Eigen::Index>(output_size()) || y.cols() != x.cols())
      throw Error("mse_gradient: target shape mismatch");
    std::vector<Eigen::MatrixXd> pre;
    const Eigen::MatrixXd out = forward_batch_keep(x, pre);
    const Eigen::MatrixXd err = out - y;
    const double n = static_cast<double>(err.size());
    const double loss = err.squaredNorm() / n;
    Eigen::MatrixXd delta = (2.0 / n) * err;
    for (std::size_t l = num_weight_layers(); l-- > 0;) {
      Eigen::Map<RowMajor> gw(grad.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
                              static_cast<Eigen::Index>(sizes_[l]));
      Eigen::Map<Eigen::VectorXd> gb(grad.data() + bias_offset(l), static_cast<Eigen::Index>(sizes_[l + 1]));
      if (l == 0) {
        gw.noalias() = delta * x.transpose();
      } else {
        gw.noalias() = delta * pre[l - 1].cwiseMax(0.0).transpose();
      }
      gb = delta.rowwise().sum();
      if (l > 0) {
        Eigen::MatrixXd next = weights_map(l).transpose() * delta;
        next.array() *= (pre[l - 1].array() > 0.0).cast<double>();
        delta = std::move(next);
      }
    }
    return loss;
  }

  bool all_finite() const {
    return std::all_of(params_.begin(), params_.end(), [](double p) { return std::isfinite(p); });
  }

 private:
  void layout() {
    if (sizes_.size() < 2) throw Error("Mlp needs at least an input and an output layer");
    for (auto s : sizes_)
      if (s == 0) throw Error("Mlp layer sizes must be positive");
    offsets_.clear();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(off);
      off += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
    }
    params_.assign(off, 0.0);
  }

  std::size_t bias_offset(std::size_t l) const { return offsets_[l] + sizes_[l] * sizes_[l + 1]; }

  Eigen::Map<const RowMajor> weights_map(std::size_t l) const {
    return {params_.data() + offsets_[l], static_cast<Eigen::Index>(sizes_[l + 1]),
            static_cast<Eigen::Index>(sizes_[l])};
  }
  Eigen::Map<const Eigen::VectorXd> biases_map(std::size_t l) const {
    return {params_.data() + bias_offset(l), static_cast<Eigen::Index>(sizes_[l + 1])};
  }

  void check_batch(const Eigen::MatrixXd& x) const {
    if (x.rows() != static_cast<Eigen::Index>(input_size())) throw Error("Mlp: batch input has wrong row count");
  }

  Eigen::MatrixXd forward_batch_keep(const Eigen::MatrixXd& x, std::vector<Eigen::MatrixXd>& pre) const {
    check_batch(x);
    pre.clear();
    Eigen::MatrixXd a = x;
    for (std::size_t l = 0; l < num_weight_layers(); ++l) {
      Eigen::MatrixXd z = weights_map(l) * a;
      z.colwise() += biases_map(l);
      if (l + 1 < num_weight_layers()) {
        a = z.cwiseMax(0.0);
        pre.push_back(std::move(z));
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  // acts[0] = input, acts[l] = pre-activation of layer l (l >= 1).
  void forward_keep(std::span<const double> x, std::vector<std::vector<double>>& acts) const {
    if (x.size() != input_size()) throw Error("Mlp: input has wrong size");
    acts.assign(1, std::vector<double>(x.begin(), x.end()));
    for (std::size_t l = 0; l < num_weight_layers(); ++l) {
      const auto& in = acts.back();
      const std::size_t n_in = sizes_[l];
      const std::size_t n_out = sizes_[l + 1];
      const bool relu_in = l > 0;
      std::vector<double> z(n_out);
      const double* w = params_.data() + offsets_[l];
      const double* b = params_.data() + bias_offset(l);
      for (std::size_t o = 0; o < n_out; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < n_in; ++i) s += w[o * n_in + i] * (relu_in ? std::max(in[i], 0.0) : in[i]);
        z[o] = s;
      }
      acts.push_back(std::move(z));
    }
  }

  std::vector<double> backprop_input(const std::vector<std::vector<double>>& acts,
                                     std::span<const double> out_adj) const {
    if (out_adj.size() != output_size()) throw Error("Mlp: output adjoint has wrong size");
    std::vector<double> delta(out_adj.begin(), out_adj.end());
    for (std::size_t l = num_weight_layers(); l-- > 0;) {
      const std::size_t n_in = sizes_[l];
      const std::size_t n_out = sizes_[l + 1];
      const double* w = params_.data() + offsets_[l];
      std::vector<double> prev(n_in, 0.0);
      for (std::size_t o = 0; o < n_out; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        for (std::size_t i = 0; i < n_in; ++i) prev[i] += w[o * n_in + i] * d;
      }
      if (l > 0)
        for (std::size_t i = 0; i < n_in; ++i)
          if (!(acts[l][i] > 0.0)) prev[i] = 0.0;
      delta = std::move(prev);
    }
    return delta;
  }

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  AlignedVector params_;
};

struct TrainConfig {
  int epochs = 1000;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  // Geometric decay from learning_rate to this value over the run.
  double final_learning_rate = 1e-5;
  std::uint64_t seed = 1;
};

/// Mini-batch Adam on the mean squared error. Columns of x/y are samples.
/// `on_epoch(epoch, train_loss)` may return false to stop early.
inline double train_mse(Mlp& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const TrainConfig& cfg,
                        const std::function<bool(int, double)>& on_epoch = {}) {
  if (x.cols() != y.cols() || x.cols() == 0) throw Error("train_mse: inconsistent or empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw Error("train_mse: epochs and batch size must be positive");
  const auto n = static_cast<std::size_t>(x.cols());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  AdamState adam(net.parameters().size(), cfg.learning_rate);
  AlignedVector g(net.parameters().size());
  const double decay = cfg.epochs > 1 ? std::pow(cfg.final_learning_rate / cfg.learning_rate,
                                                 1.0 / static_cast<double>(cfg.epochs - 1))
                                      : 1.0;
  Eigen::MatrixXd xb;
  Eigen::MatrixXd yb;
  double last = 0.0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.learning_rate = cfg.learning_rate * std::pow(decay, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double acc = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      xb.resize(x.rows(), static_cast<Eigen::Index>(len));
      yb.resize(y.rows(), static_cast<Eigen::Index>(len));
      for (std::size_t k = 0; k < len; ++k) {
        xb.col(static_cast<Eigen::Index>(k)) = x.col(static_cast<Eigen::Index>(order[start + k]));
        yb.col(static_cast<Eigen::Index>(k)) = y.col(static_cast<Eigen::Index>(order[start + k]));
      }
      acc += net.mse_gradient(xb, yb, g) * static_cast<double>(len);
      adam_step(adam, net.parameters(), g);
    }
    last = acc / static_cast<double>(n);
    if (!std::isfinite(last)) throw Error("train_mse: loss diverged");
    if (on_epoch && !on_epoch(epoch, last)) break;
  }
  return last;
}

inline void to_json(nlohmann::json& j, const Mlp& net) {
  nlohmann::json weights = nlohmann::json::array();
  nlohmann::json biases = nlohmann::json::array();
  const auto& s = net.layer_sizes();
  for (std::size_t l = 0; l + 1 < s.size(); ++l) {
    std::vector<double> w;
    w.reserve(s[l] * s[l + 1]);
    for (std::size_t o = 0; o < s[l + 1]; ++o)
      for (std::size_t i = 0; i < s[l]; ++i) w.push_back(net.weight(l, o, i));
    std::vector<double> b;
    for (std::size_t o = 0; o < s[l + 1]; ++o) b.push_back(net.bias(l, o));
    weights.push_back(w);
    biases.push_back(b);
  }
  j = {{"layer_sizes", s}, {"hidden_activation", "relu"}, {"weights", weights}, {"biases", biases}};
}

inline void from_json(const nlohmann::json& j, Mlp& net) {
  net = Mlp::zeros(j.at("layer_sizes").get<std::vector<std::size_t>>());
  if (j.value("hidden_activation", std::string("relu")) != "relu") throw Error("only ReLU MLPs are supported");
  const auto& s = net.layer_sizes();
  const auto& weights = j.at("weights");
  const auto& biases = j.at("biases");
  if (weights.size() != s.size() - 1 || biases.size() != s.size() - 1) throw Error("MLP JSON: layer count mismatch");
  for (std::size_t l = 0; l + 1 < s.size(); ++l) {
    const auto w = weights[l].get<std::vector<double>>();
    const auto b = biases[l].get<std::vector<double>>();
    if (w.size() != s[l] * s[l + 1] || b.size() != s[l + 1]) throw Error("MLP JSON: parameter shape mismatch");
    for (std::size_t o = 0; o < s[l + 1]; ++o) {
      for (std::size_t i = 0; i < s[l]; ++i) net.weight(l, o, i) = w[o * s[l] + i];
      net.bias(l, o) = b[o];
    }
  }
  if (!net.all_finite()) throw Error("MLP JSON: non-finite parameter");
}

}  // namespace raman
