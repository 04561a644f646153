#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "temporl/agent.hpp"
#include "temporl/flow.hpp"
#include "temporl/maze.hpp"

namespace temporl::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flat key = value experiment configuration. Defaults are the paper values
// wherever the paper states one; desk-scale runs override via file or flags.
struct Config {
  std::string mode = "sac";  // sac | sac_bc | temporl
  std::string layout = "room";
  std::string cond = "last_actions";  // none | last_actions | state | state_and_last_action
  int cond_k = 1;
  std::string seeds = "0";  // "0,1,2" or "0..4"
  std::string dataset_path;
  std::string prior_path;
  std::string out_dir = "runs";

  // SAC (Table-2 defaults)
  double gamma = 0.99;
  double rho = 0.995;
  double alpha = 0.02;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  int n_step = 10;
  int batch_size = 100;
  int hindsight_ratio = 4;
  double eps_lambda = 1e-9;
  double lambda0 = 0.95;
  long long initial_exploration_steps = 10000;
  long long steps_before_training = 1000;
  int env_steps_per_iteration = 50;
  int updates_per_iteration = 50;
  long long replay_capacity = 500000;
  int actor_hidden = 256;
  int actor_layers = 2;
  int critic_hidden = 256;
  int critic_layers = 2;
  int mixing_hidden = 128;
  int mixing_layers = 2;
  int epochs = 125;
  int steps_per_epoch = 4000;
  int eval_episodes = 10;
  int bc_epochs = 10;

  // prior training protocol
  int prior_epochs = 100;
  int prior_batch = 400;
  double prior_lr = 1e-4;
  double prior_weight_decay = 1e-6;
  int flow_layers = 6;
  int flow_hidden = 128;

  // data collection
  int n_traj = 4000;
  int traj_len = 500;
  double expert_noise = 0.25;

  // exploration evaluation protocol
  int explore_trajectories = 20;
  int explore_steps = 500;
  int coverage_buckets = 100;
};

// key = value access by name; unknown keys are rejected.
std::vector<std::string> config_keys();
std::string config_get(const Config& config, const std::string& key);
void config_set(Config& config, const std::string& key, const std::string& value);

Config load_config_file(const std::string& path);
void apply_overrides(Config& config, const std::vector<std::pair<std::string, std::string>>& kv);
std::string dump_config(const Config& config);
// Keys whose value differs from the paper defaults, as "key = value (default X)".
std::vector<std::string> config_drift(const Config& config);

std::vector<std::uint64_t> parse_seeds(const std::string& spec);

// Output root: TEMPORL_OUT env var when set, else the config's out_dir.
std::string resolve_out_dir(const Config& config);

agent::AgentConfig make_agent_config(const Config& config);
flow::ConditioningSpec make_cond_spec(const Config& config);

// ---------------------------------------------------------------------------
// pipeline stages

struct RunRecord {
  std::string run_dir;
  std::uint64_t seed = 0;
  std::vector<agent::CurveRow> curve;
};

void write_curve_csv(const std::vector<agent::CurveRow>& curve, const std::string& path);
std::vector<agent::CurveRow> read_curve_csv(const std::string& path);

// collect: dataset CSV at the given path.
void run_collect(const Config& config, std::uint64_t seed, const std::string& out_path);

// train-prior: checkpoint plus NLL curve CSV (epoch,nll).
flow::PriorTrainResult run_train_prior(const Config& config, std::uint64_t seed,
                                       const std::string& ckpt_path,
                                       const std::string& nll_csv_path);

// train-agent for one seed; writes curve.csv, resolved_config.txt, agent.ckpt
// under <out>/<mode>_<layout>/seed<k>/.
RunRecord run_train_agent(const Config& config, std::uint64_t seed, const std::string& out_root);

struct ExploreStats {
  double coverage_mean = 0.0, coverage_stderr = 0.0;
  double gyration_mean = 0.0, gyration_stderr = 0.0;
};

// explore-eval: sampler-driven rollouts -> coverage and gyration CSV rows.
ExploreStats run_explore_eval(const Config& config, const flow::FlowPrior* prior,
                              const std::vector<std::uint64_t>& seeds,
                              const std::string& csv_path,
                              const std::string& traj_dump_path = "");

// psd: per-bin power for dataset actions, prior samples and uniform samples.
void run_psd(const Config& config, const flow::FlowPrior* prior, std::uint64_t seed,
             const std::string& csv_path);

}  // namespace temporl::harness
