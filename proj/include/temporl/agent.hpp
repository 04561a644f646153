#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "temporl/flow.hpp"
#include "temporl/maze.hpp"
#include "temporl/nets.hpp"
#include "temporl/rng.hpp"
#include "temporl/tensor.hpp"

namespace temporl::agent {

using diff::Tensor;

struct Transition {
  std::array<double, 2> pos{};
  std::array<double, 2> goal{};
  std::array<double, 2> action{};
  double reward = 0.0;
  std::array<double, 2> next_pos{};  // achieved position
  bool terminal = false;             // success termination; horizon truncation stays false
  std::uint64_t episode_id = 0;
  int step_idx = 0;
};

// Ring buffer addressed by absolute insertion index; episodes are contiguous,
// which keeps n-step windows and hindsight future lookups cheap.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(const Transition& t);
  std::size_t size() const;
  std::uint64_t total() const { return total_; }
  std::uint64_t first_valid() const;
  const Transition& at_abs(std::uint64_t abs) const;
  // Last stored absolute index of the episode containing abs.
  std::uint64_t episode_last(std::uint64_t abs) const;

 private:
  std::vector<Transition> slots_;
  std::size_t capacity_;
  std::uint64_t total_ = 0;
  std::unordered_map<std::uint64_t, std::uint64_t> episode_last_abs_;
};

struct BatchRow {
  std::array<double, 4> obs{};       // (pos, goal) after any relabeling
  std::array<double, 2> action{};
  double n_step_return = 0.0;
  double gamma_pow = 1.0;            // gamma^m for the effective window
  bool bootstrap = true;             // false when the window hit a terminal
  std::array<double, 4> next_obs{};  // state after the window
  std::vector<double> cond_cur;      // prior conditioning at obs
  std::vector<double> cond_next;     // prior conditioning at next_obs
  bool relabeled = false;
};

using Batch = std::vector<BatchRow>;

enum class Mode { Sac, SacBc, TempoRL };
Mode mode_from_name(const std::string& name);
std::string mode_name(Mode mode);

struct AgentConfig {
  Mode mode = Mode::Sac;
  double gamma = 0.99;
  double rho = 0.995;
  double alpha = 0.02;                 // 0.01 for TempoRL on point-maze
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int n_step = 10;
  int batch_size = 100;
  int hindsight_ratio = 4;             // relabeled : original in expectation
  double eps_lambda = 1e-9;            // mixing-gradient scale
  double lambda0 = 0.95;               // initial mixing-weight target
  int initial_exploration_steps = 10000;
  int steps_before_training = 1000;
  int env_steps_per_iteration = 50;
  int updates_per_iteration = 50;
  std::size_t replay_capacity = 500000;
  std::vector<int> actor_hidden = {256, 256};
  std::vector<int> critic_hidden = {256, 256};
  std::vector<int> mixing_hidden = {128, 128};
  int epochs = 125;
  int steps_per_epoch = 4000;
  int eval_episodes = 10;
  std::optional<double> force_lambda;  // diagnostic: pins the mixing weight
};

struct CurveRow {
  long long env_step = 0;
  long long episode = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double mean_lambda = 0.0;
  double probe_lambda = 0.0;
  double q_loss = 0.0;
  double pi_loss = 0.0;
  double mix_loss = 0.0;
};

struct TrainResult {
  std::vector<CurveRow> curve;
  long long total_env_steps = 0;
};

// SAC with the mixture integration: twin Q with n-step hindsight targets,
// (1 - lambda)-weighted actor objective and a mixing network trained on
// prior-vs-policy Q differences.
class Agent {
 public:
  Agent(const AgentConfig& config, maze::Layout layout, std::uint64_t seed,
        std::optional<flow::FlowPrior> prior = std::nullopt);

  // --- acting ---
  struct MixtureSample {
    maze::Vec2 action{};
    bool from_prior = false;
    double lambda = 0.0;
  };
  MixtureSample sample_mixture(const maze::GcObservation& obs);
  double mixing_weight(const maze::GcObservation& obs) const;

  // --- batch machinery (exposed for tests) ---
  Batch sample_batch(int batch_size);
  // Per-row targets y = R_n + gamma^m * bootstrap * (min Q_targ - alpha log pi).
  std::vector<double> q_targets(const Batch& batch);
  // Loss graphs, built exactly as the update steps use them.
  Tensor q_loss_graph(const Batch& batch, const std::vector<double>& targets) const;
  Tensor policy_loss_graph(const Batch& batch, const Tensor& noise) const;
  Tensor mixing_loss_graph(const Tensor& obs, const std::vector<double>& qdiff) const;
  double update_q(const Batch& batch, const std::vector<double>& targets);
  double update_policy(const Batch& batch);
  double update_mixing(const Batch& batch);
  // Mixing step from externally supplied detached Q differences.
  double mixing_update_from_qdiff(const Tensor& obs, const std::vector<double>& qdiff);
  void update_targets();
  void update_once();  // one gradient iteration: q, policy, mixing, polyak

  // --- training ---
  TrainResult train(long long total_env_steps,
                    const std::function<void(const CurveRow&)>& on_row = nullptr);

  struct EvalResult {
    double success_rate = 0.0;
    double mean_return = 0.0;
  };
  EvalResult evaluate(int n_episodes, std::uint64_t eval_seed);

  std::vector<double> bc_pretrain(const maze::OfflineDataset& dataset, int epochs);

  // --- accessors ---
  ReplayBuffer& buffer() { return buffer_; }
  const AgentConfig& config() const { return config_; }
  net::SquashedGaussianPolicy& policy() { return policy_; }
  net::Mlp& q1() { return q1_; }
  net::Mlp& q2() { return q2_; }
  net::Mlp& mixing_net() { return mixing_; }
  net::ParamSet all_params();
  double probe_lambda() const;
  const std::vector<std::array<double, 4>>& probe_states() const { return probe_states_; }

  void save(const std::string& path) const;
  void load(const std::string& path);

  double q_min_value(const std::array<double, 4>& obs, const std::array<double, 2>& act) const;
  void push_transition(const Transition& t) { buffer_.push(t); }

 private:
  Tensor obs_tensor(const Batch& batch, bool next) const;
  Tensor q_forward(const net::Mlp& q, const Tensor& obs, const Tensor& act) const;
  std::vector<double> prior_cond_at(std::uint64_t abs, bool after) const;
  maze::Vec2 prior_action_now();
  void reset_episode_state();

  AgentConfig config_;
  maze::Layout layout_;
  std::uint64_t seed_;
  maze::Env env_;
  ReplayBuffer buffer_;

  net::SquashedGaussianPolicy policy_;
  net::Mlp q1_, q2_, q1_targ_, q2_targ_;
  net::Mlp mixing_;
  std::optional<flow::FlowPrior> prior_;

  net::Adam pi_opt_, q_opt_, mix_opt_;

  RngStream batch_rng_, noise_rng_, prior_rng_, act_rng_, uniform_rng_;

  std::deque<std::vector<double>> history_;
  std::uint64_t episode_id_ = 0;
  int episode_step_ = 0;
  long long episodes_done_ = 0;

  std::vector<std::array<double, 4>> probe_states_;
};

// Deterministic mean-action rollouts of an arbitrary actor.
double evaluate_actor(maze::Layout layout, std::uint64_t seed, int n_episodes,
                      const std::function<maze::Vec2(const maze::GcObservation&)>& actor,
                      double* mean_return = nullptr);

// 500-step rollouts driven purely by a sampler (prior or uniform), recording
// positions and executed actions.
struct ExploreRollout {
  std::vector<std::array<double, 2>> positions;  // length n_steps
  std::vector<std::vector<double>> actions;      // length n_steps
};

ExploreRollout rollout_sampler(maze::Layout layout, std::uint64_t seed, int n_steps,
                               const flow::FlowPrior* prior /* nullptr = uniform */);

}  // namespace temporl::agent
