#include "temporl/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace temporl::net {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454836;  // ln(2*pi)

Tensor init_uniform(int rows, int cols, double bound, RngStream& rng) {
  Tensor t(rows, cols, 0.0, true);
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor apply_activation(const Tensor& x, Activation act) {
  return act == Activation::Relu ? diff::relu(x) : diff::tanh(x);
}

}  // namespace

void ParamSet::append(const ParamSet& other, const std::string& prefix) {
  for (const auto& [name, t] : other.items) items.emplace_back(prefix + name, t);
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items.size());
  for (const auto& [name, t] : items) out.push_back(t);
  return out;
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : items) t.zero_grad();
}

// ---------------------------------------------------------------------------

Mlp::Mlp(const MlpSpec& spec, RngStream& rng) : spec_(spec) {
  if (spec.input_dim < 1 || spec.output_dim < 1)
    throw diff::TensorError("Mlp: dims must be >= 1");
  std::vector<int> dims;
  dims.push_back(spec.input_dim);
  for (const int h : spec.hidden_sizes) dims.push_back(h);
  dims.push_back(spec.output_dim);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    weights_.push_back(init_uniform(dims[l], dims[l + 1], bound, rng));
    biases_.push_back(init_uniform(1, dims[l + 1], bound, rng));
  }
}

Tensor Mlp::forward(const Tensor& x) const {
  if (x.cols() != spec_.input_dim)
    throw diff::TensorError("Mlp::forward: input width " + std::to_string(x.cols()) +
                            " != " + std::to_string(spec_.input_dim));
  Tensor h = x;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    h = diff::add(diff::matmul(h, weights_[l]), biases_[l]);
    if (l + 1 < weights_.size()) h = apply_activation(h, spec_.activation);
  }
  switch (spec_.output_activation) {
    case OutputActivation::None:
      return h;
    case OutputActivation::Sigmoid:
      return diff::sigmoid(h);
    case OutputActivation::Tanh:
      return diff::tanh(h);
  }
  return h;
}

ParamSet Mlp::params(const std::string& prefix) const {
  ParamSet p;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    p.add(prefix + "w" + std::to_string(l), weights_[l]);
    p.add(prefix + "b" + std::to_string(l), biases_[l]);
  }
  return p;
}

// ---------------------------------------------------------------------------

SquashedGaussianPolicy::SquashedGaussianPolicy(int obs_dim, const std::vector<int>& hidden,
                                               int act_dim, std::vector<double> action_scale,
                                               RngStream& rng)
    : obs_dim_(obs_dim), act_dim_(act_dim), action_scale_(std::move(action_scale)) {
  if (static_cast<int>(action_scale_.size()) != act_dim)
    throw diff::TensorError("policy: action_scale size != act_dim");
  if (hidden.empty()) throw diff::TensorError("policy: needs at least one hidden layer");
  MlpSpec trunk_spec;
  trunk_spec.input_dim = obs_dim;
  trunk_spec.hidden_sizes.assign(hidden.begin(), hidden.end() - 1);
  trunk_spec.output_dim = hidden.back();
  trunk_spec.activation = Activation::Relu;
  trunk_spec.output_activation = OutputActivation::None;
  trunk_ = Mlp(trunk_spec, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden.back()));
  mean_w_ = init_uniform(hidden.back(), act_dim, bound, rng);
  mean_b_ = init_uniform(1, act_dim, bound, rng);
  log_std_w_ = init_uniform(hidden.back(), act_dim, bound, rng);
  log_std_b_ = init_uniform(1, act_dim, bound, rng);
}

Tensor SquashedGaussianPolicy::trunk_forward(const Tensor& obs) const {
  return diff::relu(trunk_.forward(obs));
}

SquashedGaussianPolicy::Sample SquashedGaussianPolicy::sample(const Tensor& obs,
                                                              const Tensor& noise) const {
  const Tensor h = trunk_forward(obs);
  const Tensor mu = diff::add(diff::matmul(h, mean_w_), mean_b_);
  const Tensor log_std =
      diff::clamp(diff::add(diff::matmul(h, log_std_w_), log_std_b_), kLogStdMin, kLogStdMax);
  const Tensor u = diff::reparam_gaussian(mu, log_std, noise);

  Tensor scale_row(1, act_dim_);
  for (int j = 0; j < act_dim_; ++j) scale_row.at(0, j) = action_scale_[j];
  const Tensor action = diff::mul(diff::tanh(u), scale_row);

  // Gaussian log-density of u: -(noise^2)/2 - log_std - log(2*pi)/2 per dim.
  const Tensor gauss =
      diff::sub(diff::scale(diff::square(noise.detach()), -0.5),
                diff::offset(log_std, 0.5 * kLogTwoPi));
  // log|da/du| = log(scale) + log(1 - tanh(u)^2), the latter in the stable
  // form 2*(log 2 - u - softplus(-2u)).
  Tensor log_scale_row(1, act_dim_);
  for (int j = 0; j < act_dim_; ++j) log_scale_row.at(0, j) = std::log(action_scale_[j]);
  const Tensor squash = diff::add(
      diff::scale(diff::add(diff::offset(diff::neg(u), std::log(2.0)),
                            diff::neg(diff::softplus(diff::scale(u, -2.0)))),
                  2.0),
      log_scale_row);
  const Tensor log_prob = diff::sum(diff::sub(gauss, squash), diff::Axis::Cols);
  return {action, log_prob};
}

Tensor SquashedGaussianPolicy::mean_action(const Tensor& obs) const {
  const Tensor h = trunk_forward(obs);
  const Tensor mu = diff::add(diff::matmul(h, mean_w_), mean_b_);
  Tensor scale_row(1, act_dim_);
  for (int j = 0; j < act_dim_; ++j) scale_row.at(0, j) = action_scale_[j];
  return diff::mul(diff::tanh(mu), scale_row);
}

Tensor SquashedGaussianPolicy::log_prob_of(const Tensor& obs, const Tensor& actions) const {
  const Tensor h = trunk_forward(obs);
  const Tensor mu = diff::add(diff::matmul(h, mean_w_), mean_b_);
  const Tensor log_std =
      diff::clamp(diff::add(diff::matmul(h, log_std_w_), log_std_b_), kLogStdMin, kLogStdMax);

  // Recover the pre-squash value; clamp keeps atanh finite for actions that
  // sit exactly on the bounds.
  Tensor u_vals(actions.rows(), act_dim_);
  for (int i = 0; i < actions.rows(); ++i)
    for (int j = 0; j < act_dim_; ++j) {
      double unit = actions.at(i, j) / action_scale_[j];
      unit = std::min(std::max(unit, -1.0 + 1e-6), 1.0 - 1e-6);
      u_vals.at(i, j) = std::atanh(unit);
    }
  const Tensor z = diff::div(diff::sub(u_vals, mu), diff::exp(log_std));
  const Tensor gauss = diff::sub(diff::scale(diff::square(z), -0.5),
                                 diff::offset(log_std, 0.5 * kLogTwoPi));
  Tensor log_scale_row(1, act_dim_);
  for (int j = 0; j < act_dim_; ++j) log_scale_row.at(0, j) = std::log(action_scale_[j]);
  const Tensor squash = diff::add(
      diff::scale(diff::add(diff::offset(diff::neg(u_vals), std::log(2.0)),
                            diff::neg(diff::softplus(diff::scale(u_vals, -2.0)))),
                  2.0),
      log_scale_row);
  return diff::sum(diff::sub(gauss, squash), diff::Axis::Cols);
}

ParamSet SquashedGaussianPolicy::params(const std::string& prefix) const {
  ParamSet p = trunk_.params(prefix + "trunk.");
  p.add(prefix + "mean_w", mean_w_);
  p.add(prefix + "mean_b", mean_b_);
  p.add(prefix + "log_std_w", log_std_w_);
  p.add(prefix + "log_std_b", log_std_b_);
  return p;
}

// ---------------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps,
           double weight_decay)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      weight_decay_(weight_decay) {
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k) {
    m_[k].assign(params_[k].size(), 0.0);
    v_[k].assign(params_[k].size(), 0.0);
  }
}

void Adam::step(double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = params_[k];
    if (!p.has_grad()) continue;  // parameter untouched by this loss
    const std::vector<double>& g = p.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] * grad_scale;
      if (std::isnan(gi))
        throw diff::TensorError("Adam: NaN gradient in parameter " + std::to_string(k) +
                                " entry " + std::to_string(i));
      m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * gi;
      v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m_[k][i] / bc1;
      const double vhat = v_[k][i] / bc2;
      double& w = p.data()[i];
      w -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      if (weight_decay_ != 0.0) w -= lr_ * weight_decay_ * w;
    }
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void polyak_update(std::vector<Tensor>& target, const std::vector<Tensor>& online, double rho) {
  if (target.size() != online.size())
    throw diff::TensorError("polyak_update: parameter count mismatch");
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (target[k].size() != online[k].size())
      throw diff::TensorError("polyak_update: shape mismatch");
    auto& t = target[k].data();
    const auto& o = online[k].data();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rho * t[i] + (1.0 - rho) * o[i];
  }
}

FreezeGuard::FreezeGuard(const std::vector<Tensor>& params) : params_(params) {
  saved_.reserve(params_.size());
  for (auto& p : params_) {
    saved_.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
}

FreezeGuard::~FreezeGuard() {
  for (std::size_t k = 0; k < params_.size(); ++k) params_[k].set_requires_grad(saved_[k]);
}

}  // namespace temporl::net
