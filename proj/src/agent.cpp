#include "temporl/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "temporl/checkpoint.hpp"

namespace temporl::agent {

namespace {

double dist2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Mode mode_from_name(const std::string& name) {
  if (name == "sac") return Mode::Sac;
  if (name == "sac_bc") return Mode::SacBc;
  if (name == "temporl") return Mode::TempoRL;
  throw std::runtime_error("unknown mode: " + name);
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::Sac: return "sac";
    case Mode::SacBc: return "sac_bc";
    case Mode::TempoRL: return "temporl";
  }
  return "sac";
}

// ---------------------------------------------------------------------------
// ReplayBuffer

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::runtime_error("ReplayBuffer: capacity must be > 0");
  slots_.resize(capacity_);
}

void ReplayBuffer::push(const Transition& t) {
  slots_[static_cast<std::size_t>(total_ % capacity_)] = t;
  episode_last_abs_[t.episode_id] = total_;
  ++total_;
}

std::size_t ReplayBuffer::size() const {
  return static_cast<std::size_t>(std::min<std::uint64_t>(total_, capacity_));
}

std::uint64_t ReplayBuffer::first_valid() const {
  return total_ > capacity_ ? total_ - capacity_ : 0;
}

const Transition& ReplayBuffer::at_abs(std::uint64_t abs) const {
  return slots_[static_cast<std::size_t>(abs % capacity_)];
}

std::uint64_t ReplayBuffer::episode_last(std::uint64_t abs) const {
  const auto it = episode_last_abs_.find(at_abs(abs).episode_id);
  return it == episode_last_abs_.end() ? abs : it->second;
}

// ---------------------------------------------------------------------------
// Agent

namespace {

net::Mlp make_q_net(int obs_dim, int act_dim, const std::vector<int>& hidden, RngStream& rng) {
  net::MlpSpec spec;
  spec.input_dim = obs_dim + act_dim;
  spec.hidden_sizes = hidden;
  spec.output_dim = 1;
  spec.activation = net::Activation::Relu;
  return net::Mlp(spec, rng);
}

net::Mlp make_mixing_net(int obs_dim, const std::vector<int>& hidden, double lambda0,
                         RngStream& rng) {
  net::MlpSpec spec;
  spec.input_dim = obs_dim;
  spec.hidden_sizes = hidden;
  spec.output_dim = 1;
  spec.activation = net::Activation::Relu;
  spec.output_activation = net::OutputActivation::Sigmoid;
  net::Mlp mlp(spec, rng);
  // Final layer: small weights, bias at logit(lambda0) so early mixing
  // weights sit near lambda0.
  for (double& w : mlp.final_weight().data()) w = rng.uniform(-1e-3, 1e-3);
  mlp.final_bias().data()[0] = std::log(lambda0 / (1.0 - lambda0));
  return mlp;
}

void copy_values(net::ParamSet dst, const net::ParamSet& src) {
  for (std::size_t k = 0; k < dst.items.size(); ++k)
    dst.items[k].second.data() = src.items[k].second.data();
}

}  // namespace

Agent::Agent(const AgentConfig& config, maze::Layout layout, std::uint64_t seed,
             std::optional<flow::FlowPrior> prior)
    : config_(config),
      layout_(layout),
      seed_(seed),
      env_(layout, seed),
      buffer_(config.replay_capacity),
      prior_(std::move(prior)),
      batch_rng_(seed, "batch"),
      noise_rng_(seed, "policy-noise"),
      prior_rng_(seed, "prior"),
      act_rng_(seed, "mixture-gate"),
      uniform_rng_(seed, "uniform-explore") {
  if (config_.mode == Mode::TempoRL && !prior_)
    throw std::runtime_error("TempoRL mode requires a trained prior");

  RngStream init_rng(seed, "agent-init");
  const int obs_dim = 4, act_dim = 2;
  policy_ = net::SquashedGaussianPolicy(obs_dim, config_.actor_hidden, act_dim, {1.0, 1.0},
                                        init_rng);
  q1_ = make_q_net(obs_dim, act_dim, config_.critic_hidden, init_rng);
  q2_ = make_q_net(obs_dim, act_dim, config_.critic_hidden, init_rng);
  q1_targ_ = make_q_net(obs_dim, act_dim, config_.critic_hidden, init_rng);
  q2_targ_ = make_q_net(obs_dim, act_dim, config_.critic_hidden, init_rng);
  copy_values(q1_targ_.params(""), q1_.params(""));
  copy_values(q2_targ_.params(""), q2_.params(""));
  mixing_ = make_mixing_net(obs_dim, config_.mixing_hidden, config_.lambda0, init_rng);

  pi_opt_ = net::Adam(policy_.params("").tensors(), config_.lr, config_.adam_beta1,
                      config_.adam_beta2);
  std::vector<Tensor> q_params = q1_.params("").tensors();
  for (const Tensor& t : q2_.params("").tensors()) q_params.push_back(t);
  q_opt_ = net::Adam(q_params, config_.lr, config_.adam_beta1, config_.adam_beta2);
  mix_opt_ = net::Adam(mixing_.params("").tensors(), config_.lr, config_.adam_beta1,
                       config_.adam_beta2);

  // Fixed 100-state probe set, identical across seeds for a given layout.
  RngStream probe_rng(0x70524f4245ull, "probe-" + maze::layout_name(layout));
  const maze::MazeSpec& spec = env_.spec();
  while (probe_states_.size() < 100) {
    const double x = probe_rng.uniform(0.0, spec.width);
    const double y = probe_rng.uniform(0.0, spec.height);
    if (spec.point_blocked(x, y)) continue;
    maze::Vec2 goal{};
    switch (spec.goal_rule) {
      case maze::GoalRule::CornerCells:
        goal = spec.goal_candidates[static_cast<std::size_t>(probe_rng.uniform_int(
            0, static_cast<std::int64_t>(spec.goal_candidates.size()) - 1))];
        break;
      case maze::GoalRule::FixedFarEnd:
        goal = spec.goal_candidates.front();
        break;
      case maze::GoalRule::UniformFree:
        goal = {probe_rng.uniform(0.0, spec.width), probe_rng.uniform(0.0, spec.height)};
        break;
    }
    probe_states_.push_back({x, y, goal[0], goal[1]});
  }
}

// Observations are fed to the networks scaled into the unit box; the buffer
// and the prior conditioning keep raw world units.
namespace {
double obs_norm(const maze::MazeSpec& spec) {
  return static_cast<double>(std::max(spec.width, spec.height));
}
}  // namespace

Tensor Agent::obs_tensor(const Batch& batch, bool next) const {
  const double norm = obs_norm(env_.spec());
  Tensor t(static_cast<int>(batch.size()), 4);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& src = next ? batch[i].next_obs : batch[i].obs;
    for (int j = 0; j < 4; ++j) t.at(static_cast<int>(i), j) = src[j] / norm;
  }
  return t;
}

Tensor Agent::q_forward(const net::Mlp& q, const Tensor& obs, const Tensor& act) const {
  return q.forward(diff::concat_cols(obs, act));
}

double Agent::mixing_weight(const maze::GcObservation& obs) const {
  if (config_.force_lambda) return *config_.force_lambda;
  if (config_.mode != Mode::TempoRL) return 0.0;
  diff::NoGradGuard guard;
  const double norm = obs_norm(env_.spec());
  Tensor in(1, 4);
  in.at(0, 0) = obs.position[0] / norm;
  in.at(0, 1) = obs.position[1] / norm;
  in.at(0, 2) = obs.goal[0] / norm;
  in.at(0, 3) = obs.goal[1] / norm;
  return mixing_.forward(in).value();
}

maze::Vec2 Agent::prior_action_now() {
  const flow::ConditioningSpec& cs = prior_->cond_spec();
  const std::vector<double> state{env_.position()[0], env_.position()[1]};
  const std::vector<double> row = cs.make_row(history_, state);
  Tensor cond;
  if (!row.empty()) {
    cond = Tensor(1, static_cast<int>(row.size()));
    for (std::size_t j = 0; j < row.size(); ++j) cond.at(0, static_cast<int>(j)) = row[j];
  }
  const std::vector<double> a = prior_->sample(cond, prior_rng_);
  return {a[0], a[1]};
}

Agent::MixtureSample Agent::sample_mixture(const maze::GcObservation& obs) {
  MixtureSample out;
  out.lambda = mixing_weight(obs);
  bool use_prior = false;
  if (out.lambda >= 1.0)
    use_prior = true;
  else if (out.lambda > 0.0)
    use_prior = act_rng_.bernoulli(out.lambda);
  if (use_prior && prior_) {
    out.from_prior = true;
    out.action = prior_action_now();
  } else {
    diff::NoGradGuard guard;
    const double norm = obs_norm(env_.spec());
    Tensor in(1, 4);
    in.at(0, 0) = obs.position[0] / norm;
    in.at(0, 1) = obs.position[1] / norm;
    in.at(0, 2) = obs.goal[0] / norm;
    in.at(0, 3) = obs.goal[1] / norm;
    Tensor noise(1, 2);
    noise.at(0, 0) = noise_rng_.normal();
    noise.at(0, 1) = noise_rng_.normal();
    const auto s = policy_.sample(in, noise);
    out.action = {s.action.at(0, 0), s.action.at(0, 1)};
  }
  return out;
}

std::vector<double> Agent::prior_cond_at(std::uint64_t abs, bool after) const {
  const flow::ConditioningSpec& cs = prior_->cond_spec();
  const Transition& base = buffer_.at_abs(abs);
  std::deque<std::vector<double>> recent;
  const int need = cs.kind == flow::CondKind::LastActions
                       ? cs.k
                       : (cs.kind == flow::CondKind::StateAndLastAction ? 1 : 0);
  if (need > 0) {
    std::vector<std::vector<double>> rev;
    std::uint64_t cur = after ? abs + 1 : abs;  // one past the newest included action
    for (int c = 0; c < need && cur > buffer_.first_valid(); ++c) {
      --cur;
      const Transition& tr = buffer_.at_abs(cur);
      if (tr.episode_id != base.episode_id) break;
      rev.push_back({tr.action[0], tr.action[1]});
    }
    for (auto it = rev.rbegin(); it != rev.rend(); ++it) recent.push_back(*it);
  }
  const std::vector<double> state =
      after ? std::vector<double>{base.next_pos[0], base.next_pos[1]}
            : std::vector<double>{base.pos[0], base.pos[1]};
  return cs.make_row(recent, state);
}

Batch Agent::sample_batch(int batch_size) {
  if (buffer_.size() == 0) throw std::runtime_error("sample_batch: empty buffer");
  const std::uint64_t first = buffer_.first_valid();
  const std::uint64_t total = buffer_.total();
  const double relabel_p =
      config_.hindsight_ratio > 0
          ? static_cast<double>(config_.hindsight_ratio) / (config_.hindsight_ratio + 1.0)
          : 0.0;

  Batch batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int b = 0; b < batch_size; ++b) {
    const std::uint64_t abs = static_cast<std::uint64_t>(batch_rng_.uniform_int(
        static_cast<std::int64_t>(first), static_cast<std::int64_t>(total) - 1));
    const Transition& tr = buffer_.at_abs(abs);

    BatchRow row;
    std::array<double, 2> goal = tr.goal;
    if (config_.hindsight_ratio > 0 && batch_rng_.uniform01() < relabel_p) {
      const std::uint64_t last = buffer_.episode_last(abs);
      const std::uint64_t j = static_cast<std::uint64_t>(batch_rng_.uniform_int(
          static_cast<std::int64_t>(abs), static_cast<std::int64_t>(last)));
      goal = buffer_.at_abs(j).next_pos;
      row.relabeled = true;
    }

    row.obs = {tr.pos[0], tr.pos[1], goal[0], goal[1]};
    row.action = tr.action;

    // n-step window; rewards and termination recomputed against the (possibly
    // relabeled) goal via the success-radius rule. Windows never cross
    // episode boundaries.
    double ret = 0.0;
    double gp = 1.0;
    std::uint64_t end = abs;
    bool terminal = false;
    for (int j = 0; j < config_.n_step; ++j) {
      const std::uint64_t idx = abs + j;
      if (idx >= total) break;
      const Transition& w = buffer_.at_abs(idx);
      if (w.episode_id != tr.episode_id) break;
      end = idx;
      const double r = dist2(w.next_pos, goal) < maze::kSuccessRadius ? 1.0 : 0.0;
      ret += gp * r;
      gp *= config_.gamma;
      if (r == 1.0) {
        terminal = true;
        break;
      }
    }
    row.n_step_return = ret;
    row.gamma_pow = gp;
    row.bootstrap = !terminal;
    const Transition& last_tr = buffer_.at_abs(end);
    row.next_obs = {last_tr.next_pos[0], last_tr.next_pos[1], goal[0], goal[1]};

    if (prior_) {
      row.cond_cur = prior_cond_at(abs, false);
      row.cond_next = prior_cond_at(end, true);
    }
    batch.push_back(std::move(row));
  }
  return batch;
}

std::vector<double> Agent::q_targets(const Batch& batch) {
  diff::NoGradGuard guard;
  const int B = static_cast<int>(batch.size());
  const Tensor next_obs = obs_tensor(batch, true);

  Tensor noise_tilde(B, 2);
  for (double& v : noise_tilde.data()) v = noise_rng_.normal();
  Tensor next_actions = policy_.sample(next_obs, noise_tilde).action.detach();

  // Mixture draw for the bootstrap action: Bernoulli(lambda(s')) per row.
  if (config_.mode == Mode::TempoRL && prior_) {
    std::vector<double> lam(static_cast<std::size_t>(B));
    if (config_.force_lambda) {
      std::fill(lam.begin(), lam.end(), *config_.force_lambda);
    } else {
      const Tensor lam_t = mixing_.forward(next_obs);
      for (int i = 0; i < B; ++i) lam[static_cast<std::size_t>(i)] = lam_t.at(i, 0);
    }
    std::vector<int> prior_rows;
    for (int i = 0; i < B; ++i) {
      const double l = lam[static_cast<std::size_t>(i)];
      bool use_prior = false;
      if (l >= 1.0)
        use_prior = true;
      else if (l > 0.0)
        use_prior = act_rng_.bernoulli(l);
      if (use_prior) prior_rows.push_back(i);
    }
    if (!prior_rows.empty()) {
      const int cd = prior_->cond_spec().cond_dim();
      Tensor cond;
      if (cd > 0) {
        cond = Tensor(static_cast<int>(prior_rows.size()), cd);
        for (std::size_t k = 0; k < prior_rows.size(); ++k)
          for (int j = 0; j < cd; ++j)
            cond.at(static_cast<int>(k), j) =
                batch[static_cast<std::size_t>(prior_rows[k])].cond_next[j];
      }
      const Tensor pa =
          prior_->sample_batch(cond, static_cast<int>(prior_rows.size()), prior_rng_);
      for (std::size_t k = 0; k < prior_rows.size(); ++k) {
        next_actions.at(prior_rows[k], 0) = pa.at(static_cast<int>(k), 0);
        next_actions.at(prior_rows[k], 1) = pa.at(static_cast<int>(k), 1);
      }
    }
  }

  // Independent policy draw for the entropy term.
  Tensor noise_prime(B, 2);
  for (double& v : noise_prime.data()) v = noise_rng_.normal();
  const auto ent = policy_.sample(next_obs, noise_prime);

  const Tensor tq1 = q_forward(q1_targ_, next_obs, next_actions);
  const Tensor tq2 = q_forward(q2_targ_, next_obs, next_actions);

  std::vector<double> y(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const BatchRow& row = batch[static_cast<std::size_t>(i)];
    const double boot = row.bootstrap
                            ? std::min(tq1.at(i, 0), tq2.at(i, 0)) -
                                  config_.alpha * ent.log_prob.at(i, 0)
                            : 0.0;
    y[static_cast<std::size_t>(i)] = row.n_step_return + row.gamma_pow * boot;
  }
  return y;
}

Tensor Agent::q_loss_graph(const Batch& batch, const std::vector<double>& targets) const {
  const int B = static_cast<int>(batch.size());
  const Tensor obs = obs_tensor(batch, false);
  Tensor act(B, 2);
  for (int i = 0; i < B; ++i) {
    act.at(i, 0) = batch[static_cast<std::size_t>(i)].action[0];
    act.at(i, 1) = batch[static_cast<std::size_t>(i)].action[1];
  }
  Tensor y(B, 1);
  for (int i = 0; i < B; ++i) y.at(i, 0) = targets[static_cast<std::size_t>(i)];

  const Tensor l1 = diff::mean(diff::square(diff::sub(q_forward(q1_, obs, act), y)));
  const Tensor l2 = diff::mean(diff::square(diff::sub(q_forward(q2_, obs, act), y)));
  return diff::add(l1, l2);
}

Tensor Agent::policy_loss_graph(const Batch& batch, const Tensor& noise) const {
  const int B = static_cast<int>(batch.size());
  const Tensor obs = obs_tensor(batch, false);

  // Mixing weight enters detached; only phi receives gradients.
  Tensor weight(B, 1, 1.0);
  if (config_.mode == Mode::TempoRL) {
    if (config_.force_lambda) {
      for (int i = 0; i < B; ++i) weight.at(i, 0) = 1.0 - *config_.force_lambda;
    } else {
      diff::NoGradGuard guard;
      const Tensor lam = mixing_.forward(obs);
      for (int i = 0; i < B; ++i) weight.at(i, 0) = 1.0 - lam.at(i, 0);
    }
  }

  std::vector<Tensor> frozen = q1_.params("").tensors();
  for (const Tensor& t : q2_.params("").tensors()) frozen.push_back(t);
  net::FreezeGuard freeze(frozen);

  const auto s = policy_.sample(obs, noise);
  const Tensor q = diff::minimum(q_forward(q1_, obs, s.action), q_forward(q2_, obs, s.action));
  const Tensor inner = diff::sub(q, diff::scale(s.log_prob, config_.alpha));
  return diff::neg(diff::mean(diff::mul(weight, inner)));
}

Tensor Agent::mixing_loss_graph(const Tensor& obs, const std::vector<double>& qdiff) const {
  const int B = obs.rows();
  Tensor diff_t(B, 1);
  for (int i = 0; i < B; ++i) diff_t.at(i, 0) = qdiff[static_cast<std::size_t>(i)];
  const Tensor lam = mixing_.forward(obs);
  return diff::neg(diff::mean(diff::mul(lam, diff_t)));
}

double Agent::update_q(const Batch& batch, const std::vector<double>& targets) {
  const Tensor loss = q_loss_graph(batch, targets);
  if (std::isnan(loss.value())) throw std::runtime_error("update_q: NaN loss");
  q_opt_.zero_grad();
  loss.backward();
  q_opt_.step();
  return loss.value();
}

double Agent::update_policy(const Batch& batch) {
  Tensor noise(static_cast<int>(batch.size()), 2);
  for (double& v : noise.data()) v = noise_rng_.normal();
  const Tensor loss = policy_loss_graph(batch, noise);
  if (std::isnan(loss.value())) throw std::runtime_error("update_policy: NaN loss");
  pi_opt_.zero_grad();
  loss.backward();
  pi_opt_.step();
  return loss.value();
}

double Agent::mixing_update_from_qdiff(const Tensor& obs, const std::vector<double>& qdiff) {
  const Tensor loss = mixing_loss_graph(obs, qdiff);
  mix_opt_.zero_grad();
  loss.backward();
  mix_opt_.step(config_.eps_lambda);
  return loss.value();
}

double Agent::update_mixing(const Batch& batch) {
  if (config_.mode != Mode::TempoRL || !prior_) return 0.0;
  const int B = static_cast<int>(batch.size());
  const Tensor obs = obs_tensor(batch, false);

  std::vector<double> qdiff(static_cast<std::size_t>(B));
  {
    diff::NoGradGuard guard;
    const int cd = prior_->cond_spec().cond_dim();
    Tensor cond;
    if (cd > 0) {
      cond = Tensor(B, cd);
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < cd; ++j)
          cond.at(i, j) = batch[static_cast<std::size_t>(i)].cond_cur[j];
    }
    const Tensor a_bar = prior_->sample_batch(cond, B, prior_rng_);
    Tensor noise(B, 2);
    for (double& v : noise.data()) v = noise_rng_.normal();
    const Tensor a_pi = policy_.sample(obs, noise).action;
    const Tensor q_bar =
        diff::minimum(q_forward(q1_, obs, a_bar), q_forward(q2_, obs, a_bar));
    const Tensor q_pi = diff::minimum(q_forward(q1_, obs, a_pi), q_forward(q2_, obs, a_pi));
    for (int i = 0; i < B; ++i) qdiff[static_cast<std::size_t>(i)] = q_bar.at(i, 0) - q_pi.at(i, 0);
  }
  return mixing_update_from_qdiff(obs, qdiff);
}

void Agent::update_targets() {
  std::vector<Tensor> t1 = q1_targ_.params("").tensors();
  std::vector<Tensor> t2 = q2_targ_.params("").tensors();
  net::polyak_update(t1, q1_.params("").tensors(), config_.rho);
  net::polyak_update(t2, q2_.params("").tensors(), config_.rho);
}

void Agent::update_once() {
  const Batch batch = sample_batch(config_.batch_size);
  const std::vector<double> targets = q_targets(batch);
  update_q(batch, targets);
  update_policy(batch);
  if (config_.mode == Mode::TempoRL) update_mixing(batch);
  update_targets();
}

void Agent::reset_episode_state() {
  ++episode_id_;
  episode_step_ = 0;
  history_.clear();
}

TrainResult Agent::train(long long total_env_steps,
                         const std::function<void(const CurveRow&)>& on_row) {
  TrainResult result;
  maze::GcObservation obs = env_.reset();
  history_.clear();
  episode_step_ = 0;

  double lambda_sum = 0.0;
  long long lambda_count = 0;
  double q_loss_sum = 0.0, pi_loss_sum = 0.0, mix_loss_sum = 0.0;
  long long update_count = 0;

  const int hist_cap = prior_ ? std::max(prior_->cond_spec().k, 1) : 1;

  for (long long step = 1; step <= total_env_steps; ++step) {
    maze::Vec2 action{};
    double lambda_used = 0.0;
    if (step <= config_.initial_exploration_steps && config_.mode != Mode::SacBc) {
      if (config_.mode == Mode::TempoRL) {
        action = prior_action_now();
        lambda_used = 1.0;
      } else {
        action = {uniform_rng_.uniform(-1.0, 1.0), uniform_rng_.uniform(-1.0, 1.0)};
      }
    } else if (config_.mode == Mode::TempoRL) {
      const MixtureSample ms = sample_mixture(obs);
      action = ms.action;
      lambda_used = ms.lambda;
    } else {
      diff::NoGradGuard guard;
      const double norm = obs_norm(env_.spec());
      Tensor in(1, 4);
      in.at(0, 0) = obs.position[0] / norm;
      in.at(0, 1) = obs.position[1] / norm;
      in.at(0, 2) = obs.goal[0] / norm;
      in.at(0, 3) = obs.goal[1] / norm;
      Tensor noise(1, 2);
      noise.at(0, 0) = noise_rng_.normal();
      noise.at(0, 1) = noise_rng_.normal();
      const auto s = policy_.sample(in, noise);
      action = {s.action.at(0, 0), s.action.at(0, 1)};
    }
    lambda_sum += lambda_used;
    ++lambda_count;

    const maze::Vec2 pos_before = obs.position;
    const maze::StepResult sr = env_.step(action);
    Transition tr;
    tr.pos = pos_before;
    tr.goal = obs.goal;
    tr.action = action;
    tr.reward = sr.reward;
    tr.next_pos = sr.obs.position;
    tr.terminal = sr.success;
    tr.episode_id = episode_id_;
    tr.step_idx = episode_step_;
    buffer_.push(tr);

    history_.push_back({action[0], action[1]});
    while (static_cast<int>(history_.size()) > hist_cap) history_.pop_front();
    obs = sr.obs;
    ++episode_step_;

    if (sr.done) {
      obs = env_.reset();
      reset_episode_state();
      ++episodes_done_;
    }

    if (step >= config_.steps_before_training &&
        step % config_.env_steps_per_iteration == 0) {
      for (int u = 0; u < config_.updates_per_iteration; ++u) {
        const Batch batch = sample_batch(config_.batch_size);
        const std::vector<double> targets = q_targets(batch);
        q_loss_sum += update_q(batch, targets);
        pi_loss_sum += update_policy(batch);
        if (config_.mode == Mode::TempoRL) mix_loss_sum += update_mixing(batch);
        update_targets();
        ++update_count;
      }
    }

    if (step % config_.steps_per_epoch == 0) {
      const std::uint64_t eval_seed =
          RngStream::derive(seed_, "eval") + static_cast<std::uint64_t>(step);
      const EvalResult ev = evaluate(config_.eval_episodes, eval_seed);
      CurveRow row;
      row.env_step = step;
      row.episode = episodes_done_;
      row.success_rate = ev.success_rate;
      row.mean_return = ev.mean_return;
      row.mean_lambda = lambda_count > 0 ? lambda_sum / lambda_count : 0.0;
      row.probe_lambda = probe_lambda();
      row.q_loss = update_count > 0 ? q_loss_sum / update_count : 0.0;
      row.pi_loss = update_count > 0 ? pi_loss_sum / update_count : 0.0;
      row.mix_loss = update_count > 0 ? mix_loss_sum / update_count : 0.0;
      result.curve.push_back(row);
      if (on_row) on_row(row);
      lambda_sum = 0.0;
      lambda_count = 0;
      q_loss_sum = pi_loss_sum = mix_loss_sum = 0.0;
      update_count = 0;
    }
  }
  result.total_env_steps = total_env_steps;
  return result;
}

Agent::EvalResult Agent::evaluate(int n_episodes, std::uint64_t eval_seed) {
  const double norm = obs_norm(env_.spec());
  const auto actor = [&](const maze::GcObservation& o) -> maze::Vec2 {
    diff::NoGradGuard guard;
    Tensor in(1, 4);
    in.at(0, 0) = o.position[0] / norm;
    in.at(0, 1) = o.position[1] / norm;
    in.at(0, 2) = o.goal[0] / norm;
    in.at(0, 3) = o.goal[1] / norm;
    const Tensor a = policy_.mean_action(in);
    return {a.at(0, 0), a.at(0, 1)};
  };
  EvalResult out;
  out.success_rate = evaluate_actor(layout_, eval_seed, n_episodes, actor, &out.mean_return);
  return out;
}

double Agent::probe_lambda() const {
  if (config_.mode != Mode::TempoRL) return 0.0;
  diff::NoGradGuard guard;
  const double norm = obs_norm(env_.spec());
  Tensor in(static_cast<int>(probe_states_.size()), 4);
  for (std::size_t i = 0; i < probe_states_.size(); ++i)
    for (int j = 0; j < 4; ++j)
      in.at(static_cast<int>(i), j) = probe_states_[i][static_cast<std::size_t>(j)] / norm;
  const Tensor lam = mixing_.forward(in);
  double s = 0.0;
  for (int i = 0; i < lam.rows(); ++i) s += lam.at(i, 0);
  return s / lam.rows();
}

std::vector<double> Agent::bc_pretrain(const maze::OfflineDataset& dataset, int epochs) {
  if (dataset.total_pairs() == 0) throw std::runtime_error("bc_pretrain: empty dataset");
  RngStream bc_rng(seed_, "bc");
  const double norm = obs_norm(env_.spec());

  // The offline data carries no goals; relabel with positions 10..100 steps
  // ahead so the policy sees the goal-conditioned input layout.
  std::vector<std::array<double, 4>> obs_rows;
  std::vector<std::array<double, 2>> act_rows;
  for (const auto& traj : dataset.trajectories) {
    const int T = static_cast<int>(traj.actions.size());
    for (int t = 0; t < T; ++t) {
      const int ahead = static_cast<int>(bc_rng.uniform_int(10, 100));
      const int j = std::min(t + ahead, T - 1);
      obs_rows.push_back({traj.states[t][0] / norm, traj.states[t][1] / norm,
                          traj.states[j][0] / norm, traj.states[j][1] / norm});
      act_rows.push_back({traj.actions[t][0], traj.actions[t][1]});
    }
  }

  std::vector<double> epoch_losses;
  std::vector<int> order(obs_rows.size());
  std::iota(order.begin(), order.end(), 0);
  const int B = config_.batch_size;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      const int j = static_cast<int>(bc_rng.uniform_int(0, i));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    double loss_sum = 0.0;
    long long count = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(B)) {
      const int bs = static_cast<int>(std::min<std::size_t>(B, order.size() - start));
      Tensor obs(bs, 4), act(bs, 2);
      for (int i = 0; i < bs; ++i) {
        const int src = order[start + static_cast<std::size_t>(i)];
        for (int j = 0; j < 4; ++j) obs.at(i, j) = obs_rows[static_cast<std::size_t>(src)][j];
        act.at(i, 0) = act_rows[static_cast<std::size_t>(src)][0];
        act.at(i, 1) = act_rows[static_cast<std::size_t>(src)][1];
      }
      const Tensor loss = diff::neg(diff::mean(policy_.log_prob_of(obs, act)));
      pi_opt_.zero_grad();
      loss.backward();
      pi_opt_.step();
      loss_sum += loss.value() * bs;
      count += bs;
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(count));
  }
  return epoch_losses;
}

net::ParamSet Agent::all_params() {
  net::ParamSet p;
  p.append(policy_.params(""), "pi.");
  p.append(q1_.params(""), "q1.");
  p.append(q2_.params(""), "q2.");
  p.append(q1_targ_.params(""), "q1t.");
  p.append(q2_targ_.params(""), "q2t.");
  p.append(mixing_.params(""), "mix.");
  return p;
}

void Agent::save(const std::string& path) const {
  nlohmann::json spec;
  spec["kind"] = "agent";
  spec["mode"] = mode_name(config_.mode);
  spec["layout"] = maze::layout_name(layout_);
  spec["obs_dim"] = 4;
  spec["act_dim"] = 2;
  spec["actor_hidden"] = config_.actor_hidden;
  spec["critic_hidden"] = config_.critic_hidden;
  spec["mixing_hidden"] = config_.mixing_hidden;
  net::save_params(const_cast<Agent*>(this)->all_params(), spec, path);
}

void Agent::load(const std::string& path) {
  const net::LoadedParams loaded = net::load_params(path);
  if (loaded.spec.value("kind", "") != "agent")
    throw net::CheckpointError("Agent::load: not an agent checkpoint");
  if (loaded.spec.value("obs_dim", -1) != 4 || loaded.spec.value("act_dim", -1) != 2)
    throw net::CheckpointError("Agent::load: dimension spec mismatch");
  if (loaded.spec.value("actor_hidden", std::vector<int>{}) != config_.actor_hidden)
    throw net::CheckpointError("Agent::load: actor architecture mismatch");
  net::ParamSet p = all_params();
  net::restore_into(loaded, p);
}

double Agent::q_min_value(const std::array<double, 4>& obs,
                          const std::array<double, 2>& act) const {
  diff::NoGradGuard guard;
  const double norm = obs_norm(env_.spec());
  Tensor o(1, 4);
  for (int j = 0; j < 4; ++j) o.at(0, j) = obs[static_cast<std::size_t>(j)] / norm;
  Tensor a(1, 2);
  a.at(0, 0) = act[0];
  a.at(0, 1) = act[1];
  return std::min(q_forward(q1_, o, a).value(), q_forward(q2_, o, a).value());
}

// ---------------------------------------------------------------------------

double evaluate_actor(maze::Layout layout, std::uint64_t seed, int n_episodes,
                      const std::function<maze::Vec2(const maze::GcObservation&)>& actor,
                      double* mean_return) {
  maze::Env env(layout, seed);
  int successes = 0;
  double return_sum = 0.0;
  for (int ep = 0; ep < n_episodes; ++ep) {
    maze::GcObservation obs = env.reset();
    double ret = 0.0;
    for (;;) {
      const maze::StepResult r = env.step(actor(obs));
      ret += r.reward;
      obs = r.obs;
      if (r.done) break;
    }
    return_sum += ret;
    if (ret > 0.0) ++successes;
  }
  if (mean_return) *mean_return = return_sum / n_episodes;
  return static_cast<double>(successes) / n_episodes;
}

ExploreRollout rollout_sampler(maze::Layout layout, std::uint64_t seed, int n_steps,
                               const flow::FlowPrior* prior) {
  maze::Env env(layout, seed);
  env.set_terminate_on_success(false);
  env.reset();
  RngStream rng(seed, "explore");
  std::deque<std::vector<double>> history;
  const int hist_cap = prior ? std::max(prior->cond_spec().k, 1) : 1;

  ExploreRollout out;
  out.positions.reserve(static_cast<std::size_t>(n_steps));
  out.actions.reserve(static_cast<std::size_t>(n_steps));
  for (int t = 0; t < n_steps; ++t) {
    std::vector<double> a;
    if (prior) {
      const std::vector<double> state{env.position()[0], env.position()[1]};
      const std::vector<double> row = prior->cond_spec().make_row(history, state);
      diff::Tensor cond;
      if (!row.empty()) {
        cond = diff::Tensor(1, static_cast<int>(row.size()));
        for (std::size_t j = 0; j < row.size(); ++j)
          cond.at(0, static_cast<int>(j)) = row[j];
      }
      a = prior->sample(cond, rng);
    } else {
      a = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    }
    env.step({a[0], a[1]});
    out.positions.push_back({env.position()[0], env.position()[1]});
    out.actions.push_back(a);
    history.push_back(a);
    while (static_cast<int>(history.size()) > hist_cap) history.pop_front();
  }
  return out;
}

}  // namespace temporl::agent
