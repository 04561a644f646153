#pragma once

#include <string>
#include <utility>
#include <vector>

#include "temporl/rng.hpp"
#include "temporl/tensor.hpp"

namespace temporl::net {

using diff::Tensor;

enum class Activation { Relu, Tanh };
enum class OutputActivation { None, Sigmoid, Tanh };

struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden_sizes;
  int output_dim = 0;
  Activation activation = Activation::Relu;
  OutputActivation output_activation = OutputActivation::None;
};

// Named parameter list. Tensors are handles, so a ParamSet aliases the
// network that produced it.
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(std::string name, Tensor t) { items.emplace_back(std::move(name), std::move(t)); }
  void append(const ParamSet& other, const std::string& prefix);
  std::vector<Tensor> tensors() const;
  void zero_grad();
};

// Plain feed-forward net over diffmath tensors.
class Mlp {
 public:
  Mlp() = default;
  // Weights fan-in-scaled uniform, deterministic given the stream.
  Mlp(const MlpSpec& spec, RngStream& rng);

  Tensor forward(const Tensor& x) const;
  const MlpSpec& spec() const { return spec_; }
  ParamSet params(const std::string& prefix) const;

  // Final linear layer, exposed for custom initialization.
  Tensor& final_weight() { return weights_.back(); }
  Tensor& final_bias() { return biases_.back(); }

 private:
  MlpSpec spec_;
  std::vector<Tensor> weights_;  // in x out
  std::vector<Tensor> biases_;   // 1 x out
};

// Tanh-squashed Gaussian policy head: a = scale * tanh(mu + sigma * noise),
// with the change-of-variables correction folded into log_prob.
class SquashedGaussianPolicy {
 public:
  SquashedGaussianPolicy() = default;
  SquashedGaussianPolicy(int obs_dim, const std::vector<int>& hidden, int act_dim,
                         std::vector<double> action_scale, RngStream& rng);

  struct Sample {
    Tensor action;    // batch x act_dim
    Tensor log_prob;  // batch x 1
  };

  // noise must be standard normal, batch x act_dim.
  Sample sample(const Tensor& obs, const Tensor& noise) const;
  // Deterministic evaluation action: scale * tanh(mu).
  Tensor mean_action(const Tensor& obs) const;
  // log pi(a|obs) for given (possibly expert) actions inside the bounds.
  Tensor log_prob_of(const Tensor& obs, const Tensor& actions) const;

  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }
  const std::vector<double>& action_scale() const { return action_scale_; }
  ParamSet params(const std::string& prefix) const;

  static constexpr double kLogStdMin = -20.0;
  static constexpr double kLogStdMax = 2.0;

 private:
  Tensor trunk_forward(const Tensor& obs) const;

  int obs_dim_ = 0;
  int act_dim_ = 0;
  std::vector<double> action_scale_;
  Mlp trunk_;
  Tensor mean_w_, mean_b_;
  Tensor log_std_w_, log_std_b_;
};

// Adam with bias correction and optional decoupled weight decay.
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Tensor> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

  // Applies one update from the accumulated grads. Grads holding NaN abort.
  // grad_scale multiplies gradients before the moment updates.
  void step(double grad_scale = 1.0);
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long long step_count() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_ = 0.0;
  long long t_ = 0;
};

// target <- rho * target + (1 - rho) * online, elementwise.
void polyak_update(std::vector<Tensor>& target, const std::vector<Tensor>& online, double rho);

// Temporarily clears requires_grad on a parameter set (loss isolation).
class FreezeGuard {
 public:
  explicit FreezeGuard(const std::vector<Tensor>& params);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Tensor> params_;
  std::vector<bool> saved_;
};

}  // namespace temporl::net
