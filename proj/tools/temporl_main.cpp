#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "temporl/checkpoint.hpp"
#include "temporl/harness.hpp"
#include "temporl/metrics.hpp"

namespace maze = temporl::maze;
namespace agent = temporl::agent;

namespace {

using temporl::harness::Config;
using temporl::harness::ConfigError;

// Relative output paths land under TEMPORL_OUT when it is set.
std::string out_path(const std::string& p) {
  const char* root = std::getenv("TEMPORL_OUT");
  if (!root || !*root || p.empty() || std::filesystem::path(p).is_absolute()) return p;
  std::filesystem::create_directories(root);
  return std::string(root) + "/" + p;
}

void apply_cond_flag(Config& config, const std::string& cond) {
  const auto colon = cond.find(':');
  const std::string kind = colon == std::string::npos ? cond : cond.substr(0, colon);
  if (kind == "last-actions" || kind == "last_actions")
    config.cond = "last_actions";
  else if (kind == "state")
    config.cond = "state";
  else if (kind == "state-action" || kind == "state_and_last_action")
    config.cond = "state_and_last_action";
  else if (kind == "none")
    config.cond = "none";
  else
    throw ConfigError("unknown conditioning variant: " + cond);
  if (colon != std::string::npos)
    config.cond_k = static_cast<int>(std::stol(cond.substr(colon + 1)));
}

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "key = value config file");
  cmd->add_option("--set", opts.sets, "override: key=value")->take_all();
}

Config build_config(const CommonOpts& opts) {
  Config config;
  if (!opts.config_file.empty()) config = temporl::harness::load_config_file(opts.config_file);
  for (const std::string& kv : opts.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
    temporl::harness::config_set(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporl: temporal action priors for off-policy exploration"};
  app.require_subcommand(1);

  // --- collect ---
  auto* collect = app.add_subcommand("collect", "collect a scripted-expert dataset");
  CommonOpts collect_common;
  add_common(collect, collect_common);
  std::string collect_layout = "room", collect_out = "dataset.csv";
  int collect_n = -1, collect_len = -1;
  double collect_noise = -1.0;
  std::uint64_t collect_seed = 0;
  collect->add_option("--layout", collect_layout);
  collect->add_option("--n-traj", collect_n);
  collect->add_option("--len", collect_len);
  collect->add_option("--noise", collect_noise);
  collect->add_option("--seed", collect_seed);
  collect->add_option("--out", collect_out);

  // --- train-prior ---
  auto* tp = app.add_subcommand("train-prior", "train a flow action prior");
  CommonOpts tp_common;
  add_common(tp, tp_common);
  std::string tp_dataset, tp_cond, tp_out = "prior.ckpt", tp_nll = "prior_nll.csv";
  std::uint64_t tp_seed = 0;
  int tp_epochs = -1, tp_hidden = -1;
  tp->add_option("--dataset", tp_dataset);
  tp->add_option("--cond", tp_cond, "none | last-actions:k | state | state-action");
  tp->add_option("--out", tp_out);
  tp->add_option("--nll-csv", tp_nll);
  tp->add_option("--seed", tp_seed);
  tp->add_option("--epochs", tp_epochs);
  tp->add_option("--hidden", tp_hidden);

  // --- train-agent ---
  auto* ta = app.add_subcommand("train-agent", "run downstream RL");
  CommonOpts ta_common;
  add_common(ta, ta_common);
  std::string ta_mode, ta_layout, ta_prior, ta_dataset, ta_seeds, ta_out;
  ta->add_option("--mode", ta_mode, "sac | sac_bc | temporl");
  ta->add_option("--layout", ta_layout);
  ta->add_option("--prior", ta_prior);
  ta->add_option("--dataset", ta_dataset);
  ta->add_option("--seeds", ta_seeds, "e.g. 0..4 or 0,1,2");
  ta->add_option("--out", ta_out);

  // --- eval ---
  auto* ev = app.add_subcommand("eval", "evaluate an agent checkpoint");
  std::string ev_ckpt, ev_layout = "room", ev_out;
  int ev_episodes = 10;
  std::uint64_t ev_seed = 0;
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--layout", ev_layout);
  ev->add_option("--episodes", ev_episodes);
  ev->add_option("--seed", ev_seed);
  ev->add_option("--out", ev_out);

  // --- explore-eval ---
  auto* xe = app.add_subcommand("explore-eval", "sampler-driven coverage metrics");
  CommonOpts xe_common;
  add_common(xe, xe_common);
  std::string xe_layout, xe_prior, xe_policy, xe_seeds = "0", xe_out = "explore.csv";
  std::string xe_dump;
  xe->add_option("--layout", xe_layout);
  xe->add_option("--prior", xe_prior, "prior checkpoint driving the sampler");
  xe->add_option("--policy", xe_policy, "'uniform' for the uniform baseline");
  xe->add_option("--seeds", xe_seeds);
  xe->add_option("--out", xe_out);
  xe->add_option("--dump-traj", xe_dump, "also dump rolled trajectories as dataset CSV");

  // --- psd ---
  auto* psd = app.add_subcommand("psd", "action-sequence power spectra");
  CommonOpts psd_common;
  add_common(psd, psd_common);
  std::string psd_layout, psd_dataset, psd_prior, psd_out = "psd.csv";
  int psd_seq = -1, psd_steps = -1;
  std::uint64_t psd_seed = 0;
  psd->add_option("--layout", psd_layout);
  psd->add_option("--dataset", psd_dataset);
  psd->add_option("--prior", psd_prior);
  psd->add_option("--sequences", psd_seq);
  psd->add_option("--steps", psd_steps);
  psd->add_option("--seed", psd_seed);
  psd->add_option("--out", psd_out);

  // --- metrics ---
  auto* me = app.add_subcommand("metrics", "coverage metrics from a trajectory CSV");
  std::string me_traj, me_layout = "room", me_out = "metrics.csv";
  int me_buckets = 100;
  me->add_option("--traj", me_traj)->required();
  me->add_option("--layout", me_layout);
  me->add_option("--buckets", me_buckets);
  me->add_option("--out", me_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (collect->parsed()) {
      Config config = build_config(collect_common);
      config.layout = collect_layout;
      if (collect_n > 0) config.n_traj = collect_n;
      if (collect_len > 0) config.traj_len = collect_len;
      if (collect_noise >= 0.0) config.expert_noise = collect_noise;
      maze::layout_from_name(config.layout);  // validates
      temporl::harness::run_collect(config, collect_seed, out_path(collect_out));
      std::cout << "wrote " << out_path(collect_out) << "\n";
    } else if (tp->parsed()) {
      Config config = build_config(tp_common);
      if (!tp_dataset.empty()) config.dataset_path = tp_dataset;
      if (!tp_cond.empty()) apply_cond_flag(config, tp_cond);
      if (tp_epochs >= 0) config.prior_epochs = tp_epochs;
      if (tp_hidden > 0) config.flow_hidden = tp_hidden;
      const auto result = temporl::harness::run_train_prior(config, tp_seed, out_path(tp_out),
                                                            out_path(tp_nll));
      std::cout << "wrote " << out_path(tp_out) << " ("
                << (result.epoch_nll.empty() ? 0.0 : result.epoch_nll.back())
                << " final nll)\n";
    } else if (ta->parsed()) {
      Config config = build_config(ta_common);
      if (!ta_mode.empty()) config.mode = ta_mode;
      if (!ta_layout.empty()) config.layout = ta_layout;
      if (!ta_prior.empty()) config.prior_path = ta_prior;
      if (!ta_dataset.empty()) config.dataset_path = ta_dataset;
      if (!ta_seeds.empty()) config.seeds = ta_seeds;
      if (!ta_out.empty()) config.out_dir = ta_out;
      agent::mode_from_name(config.mode);  // validates
      maze::layout_from_name(config.layout);
      if (config.mode == "temporl" && config.prior_path.empty())
        throw ConfigError("train-agent: --mode temporl requires --prior");
      const std::string root = temporl::harness::resolve_out_dir(config);
      for (const std::uint64_t seed : temporl::harness::parse_seeds(config.seeds)) {
        const auto record = temporl::harness::run_train_agent(config, seed, root);
        std::cout << "seed " << seed << " -> " << record.run_dir << "\n";
      }
    } else if (ev->parsed()) {
      const auto loaded = temporl::net::load_params(ev_ckpt);
      Config config;
      config.mode = loaded.spec.value("mode", "sac");
      config.actor_hidden = 256;
      temporl::agent::AgentConfig ac = temporl::harness::make_agent_config(config);
      ac.mode = temporl::agent::Mode::Sac;  // evaluation never samples the prior
      const auto hid = loaded.spec.value("actor_hidden", std::vector<int>{256, 256});
      ac.actor_hidden = hid;
      ac.critic_hidden = loaded.spec.value("critic_hidden", std::vector<int>{256, 256});
      ac.mixing_hidden = loaded.spec.value("mixing_hidden", std::vector<int>{128, 128});
      temporl::agent::Agent ag(ac, maze::layout_from_name(ev_layout), ev_seed);
      ag.load(ev_ckpt);
      const auto result = ag.evaluate(ev_episodes, ev_seed);
      std::cout << "success_rate " << result.success_rate << " mean_return "
                << result.mean_return << "\n";
      if (!ev_out.empty()) {
        std::ofstream os(out_path(ev_out));
        os << "success_rate,mean_return\n"
           << result.success_rate << "," << result.mean_return << "\n";
      }
    } else if (xe->parsed()) {
      Config config = build_config(xe_common);
      if (!xe_layout.empty()) config.layout = xe_layout;
      std::optional<temporl::flow::FlowPrior> prior;
      if (!xe_prior.empty()) prior = temporl::flow::load_flow(xe_prior);
      if (xe_prior.empty() && xe_policy != "uniform")
        throw ConfigError("explore-eval: pass --prior CKPT or --policy uniform");
      const auto stats = temporl::harness::run_explore_eval(
          config, prior ? &*prior : nullptr, temporl::harness::parse_seeds(xe_seeds),
          out_path(xe_out), xe_dump.empty() ? "" : out_path(xe_dump));
      std::cout << "coverage " << stats.coverage_mean << " +- " << stats.coverage_stderr
                << ", gyration_sq " << stats.gyration_mean << " +- " << stats.gyration_stderr
                << "\n";
    } else if (psd->parsed()) {
      Config config = build_config(psd_common);
      if (!psd_layout.empty()) config.layout = psd_layout;
      if (!psd_dataset.empty()) config.dataset_path = psd_dataset;
      if (psd_seq > 0) config.explore_trajectories = psd_seq;
      if (psd_steps > 0) config.explore_steps = psd_steps;
      std::optional<temporl::flow::FlowPrior> prior;
      if (!psd_prior.empty()) prior = temporl::flow::load_flow(psd_prior);
      temporl::harness::run_psd(config, prior ? &*prior : nullptr, psd_seed,
                                out_path(psd_out));
      std::cout << "wrote " << out_path(psd_out) << "\n";
    } else if (me->parsed()) {
      const maze::MazeSpec spec = maze::MazeSpec::make(maze::layout_from_name(me_layout));
      const maze::OfflineDataset ds = maze::load_dataset(me_traj);
      std::vector<temporl::metrics::PositionTrajectory> trajs;
      for (const auto& t : ds.trajectories) {
        temporl::metrics::PositionTrajectory traj;
        for (const auto& s : t.states) traj.push_back({s[0], s[1]});
        trajs.push_back(std::move(traj));
      }
      temporl::metrics::CoverageConfig cov;
      cov.buckets = me_buckets;
      cov.box_max_x = spec.width;
      cov.box_max_y = spec.height;
      temporl::metrics::GyrationConfig gyr;
      gyr.diagonal = spec.diagonal();
      const double c = temporl::metrics::coverage(trajs, cov);
      const double g = temporl::metrics::gyration_sq(trajs, gyr);
      std::ofstream os(out_path(me_out));
      os << "metric,environment,value,stderr\n";
      os << "coverage," << spec.name << "," << c << ",0\n";
      os << "gyration_sq," << spec.name << "," << g << ",0\n";
      std::cout << "coverage " << c << " gyration_sq " << g << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const maze::MazeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
