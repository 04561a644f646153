#include "temporl/harness.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "temporl/metrics.hpp"

namespace temporl::harness {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: bad numeric value for " + key + ": " + v);
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer value for " + key + ": " + v);
  }
}

#define STR_FIELD(name)                                       \
  Field{#name, [](const Config& c) { return c.name; },        \
        [](Config& c, const std::string& v) { c.name = v; }}
#define DBL_FIELD(name)                                                  \
  Field{#name, [](const Config& c) { return fmt_double(c.name); },      \
        [](Config& c, const std::string& v) { c.name = parse_double(#name, v); }}
#define INT_FIELD(name)                                                       \
  Field{#name, [](const Config& c) { return std::to_string(c.name); },       \
        [](Config& c, const std::string& v) {                                \
          c.name = static_cast<decltype(c.name)>(parse_int(#name, v));       \
        }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      STR_FIELD(mode),
      STR_FIELD(layout),
      STR_FIELD(cond),
      INT_FIELD(cond_k),
      STR_FIELD(seeds),
      STR_FIELD(dataset_path),
      STR_FIELD(prior_path),
      STR_FIELD(out_dir),
      DBL_FIELD(gamma),
      DBL_FIELD(rho),
      DBL_FIELD(alpha),
      DBL_FIELD(lr),
      DBL_FIELD(adam_beta1),
      DBL_FIELD(adam_beta2),
      INT_FIELD(n_step),
      INT_FIELD(batch_size),
      INT_FIELD(hindsight_ratio),
      DBL_FIELD(eps_lambda),
      DBL_FIELD(lambda0),
      INT_FIELD(initial_exploration_steps),
      INT_FIELD(steps_before_training),
      INT_FIELD(env_steps_per_iteration),
      INT_FIELD(updates_per_iteration),
      INT_FIELD(replay_capacity),
      INT_FIELD(actor_hidden),
      INT_FIELD(actor_layers),
      INT_FIELD(critic_hidden),
      INT_FIELD(critic_layers),
      INT_FIELD(mixing_hidden),
      INT_FIELD(mixing_layers),
      INT_FIELD(epochs),
      INT_FIELD(steps_per_epoch),
      INT_FIELD(eval_episodes),
      INT_FIELD(bc_epochs),
      INT_FIELD(prior_epochs),
      INT_FIELD(prior_batch),
      DBL_FIELD(prior_lr),
      DBL_FIELD(prior_weight_decay),
      INT_FIELD(flow_layers),
      INT_FIELD(flow_hidden),
      INT_FIELD(n_traj),
      INT_FIELD(traj_len),
      DBL_FIELD(expert_noise),
      INT_FIELD(explore_trajectories),
      INT_FIELD(explore_steps),
      INT_FIELD(coverage_buckets),
  };
  return table;
}

#undef STR_FIELD
#undef DBL_FIELD
#undef INT_FIELD

const Field& find_field(const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("config: unknown key: " + key);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string config_get(const Config& config, const std::string& key) {
  return find_field(key).get(config);
}

void config_set(Config& config, const std::string& key, const std::string& value) {
  find_field(key).set(config, value);
}

Config load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  Config config;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: expected key = value at line " + std::to_string(line_no));
    config_set(config, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return config;
}

void apply_overrides(Config& config,
                     const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [key, value] : kv) config_set(config, key, value);
}

std::string dump_config(const Config& config) {
  std::ostringstream os;
  for (const Field& f : fields()) os << f.key << " = " << f.get(config) << "\n";
  return os.str();
}

std::vector<std::string> config_drift(const Config& config) {
  const Config defaults;
  std::vector<std::string> drift;
  for (const Field& f : fields()) {
    const std::string cur = f.get(config);
    const std::string def = f.get(defaults);
    if (cur != def) drift.push_back(f.key + " = " + cur + " (default " + def + ")");
  }
  return drift;
}

std::vector<std::uint64_t> parse_seeds(const std::string& spec) {
  std::vector<std::uint64_t> seeds;
  const auto dots = spec.find("..");
  if (dots != std::string::npos) {
    const long long lo = parse_int("seeds", trim(spec.substr(0, dots)));
    const long long hi = parse_int("seeds", trim(spec.substr(dots + 2)));
    if (hi < lo) throw ConfigError("config: empty seed range " + spec);
    for (long long s = lo; s <= hi; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
    return seeds;
  }
  std::istringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const std::string t = trim(part);
    if (!t.empty()) seeds.push_back(static_cast<std::uint64_t>(parse_int("seeds", t)));
  }
  if (seeds.empty()) throw ConfigError("config: no seeds in " + spec);
  return seeds;
}

std::string resolve_out_dir(const Config& config) {
  if (const char* env = std::getenv("TEMPORL_OUT"); env && *env) return env;
  return config.out_dir;
}

agent::AgentConfig make_agent_config(const Config& config) {
  agent::AgentConfig a;
  a.mode = agent::mode_from_name(config.mode);
  a.gamma = config.gamma;
  a.rho = config.rho;
  a.alpha = config.alpha;
  a.lr = config.lr;
  a.adam_beta1 = config.adam_beta1;
  a.adam_beta2 = config.adam_beta2;
  a.n_step = config.n_step;
  a.batch_size = config.batch_size;
  a.hindsight_ratio = config.hindsight_ratio;
  a.eps_lambda = config.eps_lambda;
  a.lambda0 = config.lambda0;
  a.initial_exploration_steps = static_cast<int>(config.initial_exploration_steps);
  a.steps_before_training = static_cast<int>(config.steps_before_training);
  a.env_steps_per_iteration = config.env_steps_per_iteration;
  a.updates_per_iteration = config.updates_per_iteration;
  a.replay_capacity = static_cast<std::size_t>(config.replay_capacity);
  a.actor_hidden.assign(config.actor_layers, config.actor_hidden);
  a.critic_hidden.assign(config.critic_layers, config.critic_hidden);
  a.mixing_hidden.assign(config.mixing_layers, config.mixing_hidden);
  a.epochs = config.epochs;
  a.steps_per_epoch = config.steps_per_epoch;
  a.eval_episodes = config.eval_episodes;
  return a;
}

flow::ConditioningSpec make_cond_spec(const Config& config) {
  flow::ConditioningSpec spec;
  spec.kind = flow::cond_kind_from_name(config.cond);
  spec.k = config.cond_k;
  spec.action_dim = 2;
  spec.state_dim = 2;
  return spec;
}

// ---------------------------------------------------------------------------

void write_curve_csv(const std::vector<agent::CurveRow>& curve, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open for writing: " + path);
  os << "env_step,episode,success_rate,mean_return,mean_lambda,probe_lambda,q_loss,pi_loss,"
        "mix_loss\n";
  char buf[320];
  for (const auto& r : curve) {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  r.env_step, r.episode, r.success_rate, r.mean_return, r.mean_lambda,
                  r.probe_lambda, r.q_loss, r.pi_loss, r.mix_loss);
    os << buf;
  }
}

std::vector<agent::CurveRow> read_curve_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open: " + path);
  std::string line;
  std::getline(is, line);  // header
  std::vector<agent::CurveRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    agent::CurveRow r;
    std::istringstream ss(line);
    std::string f;
    auto next = [&] {
      if (!std::getline(ss, f, ',')) throw ConfigError("curve csv: short row in " + path);
      return f;
    };
    r.env_step = std::stoll(next());
    r.episode = std::stoll(next());
    r.success_rate = std::stod(next());
    r.mean_return = std::stod(next());
    r.mean_lambda = std::stod(next());
    r.probe_lambda = std::stod(next());
    r.q_loss = std::stod(next());
    r.pi_loss = std::stod(next());
    r.mix_loss = std::stod(next());
    rows.push_back(r);
  }
  return rows;
}

void run_collect(const Config& config, std::uint64_t seed, const std::string& out_path) {
  const maze::Layout layout = maze::layout_from_name(config.layout);
  const maze::OfflineDataset dataset =
      maze::collect_dataset(layout, config.n_traj, config.traj_len, config.expert_noise, seed);
  maze::save_dataset(dataset, out_path);
}

flow::PriorTrainResult run_train_prior(const Config& config, std::uint64_t seed,
                                       const std::string& ckpt_path,
                                       const std::string& nll_csv_path) {
  if (config.dataset_path.empty())
    throw ConfigError("train-prior: dataset_path is required");
  const maze::OfflineDataset dataset = maze::load_dataset(config.dataset_path);

  flow::ConditioningSpec cond = make_cond_spec(config);
  flow::FlowConfig fc;
  fc.num_coupling_layers = config.flow_layers;
  fc.hidden = config.flow_hidden;
  fc.lower = {-1.0, -1.0};
  fc.upper = {1.0, 1.0};

  RngStream init_rng(seed, "prior-init");
  flow::FlowPrior prior(cond, fc, init_rng);
  const flow::TrainingPairs pairs = flow::build_training_pairs(dataset, cond);
  flow::PriorTrainConfig tc;
  tc.epochs = config.prior_epochs;
  tc.batch_size = config.prior_batch;
  tc.lr = config.prior_lr;
  tc.weight_decay = config.prior_weight_decay;
  RngStream train_rng(seed, "prior-train");
  const flow::PriorTrainResult result = flow::train_prior(prior, pairs, tc, train_rng);

  flow::save_flow(prior, ckpt_path);
  if (!nll_csv_path.empty()) {
    std::ofstream os(nll_csv_path);
    if (!os) throw ConfigError("cannot open for writing: " + nll_csv_path);
    os << "epoch,nll\n";
    char buf[64];
    for (std::size_t e = 0; e < result.epoch_nll.size(); ++e) {
      std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", e, result.epoch_nll[e]);
      os << buf;
    }
  }
  return result;
}

RunRecord run_train_agent(const Config& config, std::uint64_t seed,
                          const std::string& out_root) {
  const maze::Layout layout = maze::layout_from_name(config.layout);
  const agent::AgentConfig ac = make_agent_config(config);

  std::optional<flow::FlowPrior> prior;
  if (ac.mode == agent::Mode::TempoRL) {
    if (config.prior_path.empty())
      throw ConfigError("train-agent: temporl mode requires prior_path");
    prior = flow::load_flow(config.prior_path);
  }

  const std::string run_dir = out_root + "/" + config.mode + "_" + config.layout + "/seed" +
                              std::to_string(seed);
  std::filesystem::create_directories(run_dir);

  // Run record: resolved config, paper-default drift, version stamp.
  {
    std::ofstream os(run_dir + "/resolved_config.txt");
    os << "# temporl run record v1\n# seed = " << seed << "\n";
    os << dump_config(config);
    for (const std::string& d : config_drift(config)) os << "# drift: " << d << "\n";
  }

  agent::Agent ag(ac, layout, seed, std::move(prior));
  if (ac.mode == agent::Mode::SacBc) {
    if (config.dataset_path.empty())
      throw ConfigError("train-agent: sac_bc mode requires dataset_path");
    const maze::OfflineDataset dataset = maze::load_dataset(config.dataset_path);
    ag.bc_pretrain(dataset, config.bc_epochs);
  }

  const long long total_steps =
      static_cast<long long>(config.epochs) * config.steps_per_epoch;
  const agent::TrainResult tr = ag.train(total_steps);
  write_curve_csv(tr.curve, run_dir + "/curve.csv");
  ag.save(run_dir + "/agent.ckpt");

  RunRecord record;
  record.run_dir = run_dir;
  record.seed = seed;
  record.curve = tr.curve;
  return record;
}

ExploreStats run_explore_eval(const Config& config, const flow::FlowPrior* prior,
                              const std::vector<std::uint64_t>& seeds,
                              const std::string& csv_path,
                              const std::string& traj_dump_path) {
  const maze::Layout layout = maze::layout_from_name(config.layout);
  const maze::MazeSpec spec = maze::MazeSpec::make(layout);

  metrics::CoverageConfig cov;
  cov.buckets = config.coverage_buckets;
  cov.box_min_x = 0.0;
  cov.box_min_y = 0.0;
  cov.box_max_x = spec.width;
  cov.box_max_y = spec.height;
  metrics::GyrationConfig gyr;
  gyr.diagonal = spec.diagonal();

  std::vector<double> covs, gyrs;
  maze::OfflineDataset dump;
  dump.state_dim = 2;
  dump.action_dim = 2;
  for (const std::uint64_t seed : seeds) {
    std::vector<metrics::PositionTrajectory> trajs;
    for (int i = 0; i < config.explore_trajectories; ++i) {
      const agent::ExploreRollout roll = agent::rollout_sampler(
          layout, RngStream::derive(seed, "explore-eval") + static_cast<std::uint64_t>(i),
          config.explore_steps, prior);
      metrics::PositionTrajectory traj;
      for (const auto& p : roll.positions) traj.push_back({p[0], p[1]});
      trajs.push_back(std::move(traj));
      if (!traj_dump_path.empty()) {
        maze::Trajectory t;
        for (std::size_t s = 0; s < roll.positions.size(); ++s) {
          t.states.push_back({roll.positions[s][0], roll.positions[s][1]});
          t.actions.push_back(roll.actions[s]);
        }
        dump.trajectories.push_back(std::move(t));
      }
    }
    covs.push_back(metrics::coverage(trajs, cov));
    gyrs.push_back(metrics::gyration_sq(trajs, gyr));
  }

  auto mean_stderr = [](const std::vector<double>& xs) {
    double m = 0.0;
    for (const double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double var = 0.0;
    for (const double x : xs) var += (x - m) * (x - m);
    const double sd = xs.size() > 1 ? std::sqrt(var / (static_cast<double>(xs.size()) - 1.0))
                                    : 0.0;
    return std::pair<double, double>{m, sd};
  };
  ExploreStats stats;
  std::tie(stats.coverage_mean, stats.coverage_stderr) = mean_stderr(covs);
  std::tie(stats.gyration_mean, stats.gyration_stderr) = mean_stderr(gyrs);

  if (!csv_path.empty()) {
    std::ofstream os(csv_path);
    if (!os) throw ConfigError("cannot open for writing: " + csv_path);
    os << "metric,environment,value,stderr\n";
    char buf[160];
    std::snprintf(buf, sizeof(buf), "coverage,%s,%.17g,%.17g\n", spec.name.c_str(),
                  stats.coverage_mean, stats.coverage_stderr);
    os << buf;
    std::snprintf(buf, sizeof(buf), "gyration_sq,%s,%.17g,%.17g\n", spec.name.c_str(),
                  stats.gyration_mean, stats.gyration_stderr);
    os << buf;
  }
  if (!traj_dump_path.empty()) maze::save_dataset(dump, traj_dump_path);
  return stats;
}

void run_psd(const Config& config, const flow::FlowPrior* prior, std::uint64_t seed,
             const std::string& csv_path) {
  const maze::Layout layout = maze::layout_from_name(config.layout);
  const int n_seq = config.explore_trajectories;
  const int steps = config.explore_steps;

  std::vector<std::vector<std::vector<double>>> dataset_seqs, prior_seqs, uniform_seqs;
  if (!config.dataset_path.empty()) {
    const maze::OfflineDataset ds = maze::load_dataset(config.dataset_path);
    for (int i = 0; i < n_seq && i < static_cast<int>(ds.trajectories.size()); ++i) {
      const auto& acts = ds.trajectories[static_cast<std::size_t>(i)].actions;
      if (static_cast<int>(acts.size()) >= steps)
        dataset_seqs.emplace_back(acts.begin(), acts.begin() + steps);
    }
  }
  for (int i = 0; i < n_seq; ++i) {
    const std::uint64_t s = RngStream::derive(seed, "psd") + static_cast<std::uint64_t>(i);
    if (prior) prior_seqs.push_back(agent::rollout_sampler(layout, s, steps, prior).actions);
    uniform_seqs.push_back(agent::rollout_sampler(layout, s, steps, nullptr).actions);
  }

  const std::vector<double> uniform_psd = metrics::action_psd(uniform_seqs);
  std::vector<double> dataset_psd(uniform_psd.size(), 0.0), prior_psd(uniform_psd.size(), 0.0);
  if (!dataset_seqs.empty()) dataset_psd = metrics::action_psd(dataset_seqs);
  if (!prior_seqs.empty()) prior_psd = metrics::action_psd(prior_seqs);

  std::ofstream os(csv_path);
  if (!os) throw ConfigError("cannot open for writing: " + csv_path);
  os << "bin,dataset,prior,uniform\n";
  char buf[160];
  for (std::size_t k = 0; k < uniform_psd.size(); ++k) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", k, dataset_psd[k], prior_psd[k],
                  uniform_psd[k]);
    os << buf;
  }
}

}  // namespace temporl::harness
