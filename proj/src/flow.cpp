#include "temporl/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "temporl/checkpoint.hpp"
#include "temporl/maze.hpp"

namespace temporl::flow {

namespace {
constexpr double kLogTwoPi = 1.8378770664093454836;
}

std::string cond_kind_name(CondKind kind) {
  switch (kind) {
    case CondKind::None: return "none";
    case CondKind::LastActions: return "last_actions";
    case CondKind::State: return "state";
    case CondKind::StateAndLastAction: return "state_and_last_action";
  }
  return "none";
}

CondKind cond_kind_from_name(const std::string& name) {
  if (name == "none") return CondKind::None;
  if (name == "last_actions") return CondKind::LastActions;
  if (name == "state") return CondKind::State;
  if (name == "state_and_last_action") return CondKind::StateAndLastAction;
  throw diff::TensorError("unknown conditioning kind: " + name);
}

int ConditioningSpec::cond_dim() const {
  switch (kind) {
    case CondKind::None: return 0;
    case CondKind::LastActions: return k * action_dim;
    case CondKind::State: return state_dim;
    case CondKind::StateAndLastAction: return state_dim + action_dim;
  }
  return 0;
}

std::vector<double> ConditioningSpec::make_row(
    const std::deque<std::vector<double>>& recent_actions,
    const std::vector<double>& state) const {
  std::vector<double> row;
  row.reserve(static_cast<std::size_t>(cond_dim()));
  auto push_history = [&](int count) {
    // Oldest first, zero-padded on the left when history is shorter.
    const int have = static_cast<int>(recent_actions.size());
    for (int i = count; i >= 1; --i) {
      if (have >= i) {
        const auto& a = recent_actions[have - i];
        row.insert(row.end(), a.begin(), a.end());
      } else {
        row.insert(row.end(), action_dim, 0.0);
      }
    }
  };
  switch (kind) {
    case CondKind::None:
      break;
    case CondKind::LastActions:
      push_history(k);
      break;
    case CondKind::State:
      row.insert(row.end(), state.begin(), state.end());
      break;
    case CondKind::StateAndLastAction:
      row.insert(row.end(), state.begin(), state.end());
      push_history(1);
      break;
  }
  return row;
}

// ---------------------------------------------------------------------------

FlowPrior::FlowPrior(const ConditioningSpec& cond_spec, const FlowConfig& config, RngStream& rng)
    : cond_spec_(cond_spec), config_(config) {
  const int d = cond_spec.action_dim;
  if (d < 1) throw diff::TensorError("FlowPrior: action_dim must be >= 1");
  if (static_cast<int>(config.lower.size()) != d || static_cast<int>(config.upper.size()) != d)
    throw diff::TensorError("FlowPrior: bounds must match action_dim");
  const int cond_dim = cond_spec.cond_dim();

  for (int l = 0; l < config.num_coupling_layers; ++l) {
    CouplingLayer layer;
    for (int j = 0; j < d; ++j) {
      const bool even_dim = (j % 2 == 0);
      const bool pass = (l % 2 == 0) ? even_dim : !even_dim;
      (pass ? layer.pass_idx : layer.trans_idx).push_back(j);
    }
    layer.has_encoder = cond_dim > 0;
    if (layer.has_encoder) {
      net::MlpSpec enc;
      enc.input_dim = cond_dim;
      enc.hidden_sizes = {config.hidden, config.hidden};
      enc.output_dim = config.hidden;
      enc.activation = net::Activation::Relu;
      layer.cond_encoder = net::Mlp(enc, rng);
    }
    const int n_pass = static_cast<int>(layer.pass_idx.size());
    const int n_trans = static_cast<int>(layer.trans_idx.size());
    if (n_trans > 0) {
      int in = n_pass + (layer.has_encoder ? config.hidden : 0);
      if (in == 0) in = 1;  // degenerate layer fed a constant ones column
      net::MlpSpec st;
      st.input_dim = in;
      st.hidden_sizes = {config.hidden, config.hidden};
      st.output_dim = 2 * n_trans;
      st.activation = net::Activation::Relu;
      layer.st_net = net::Mlp(st, rng);
      // Zero final layer: the flow starts as the identity map.
      std::fill(layer.st_net.final_weight().data().begin(),
                layer.st_net.final_weight().data().end(), 0.0);
      std::fill(layer.st_net.final_bias().data().begin(),
                layer.st_net.final_bias().data().end(), 0.0);
    }
    layer.gain = Tensor(1, 1, 1.0, true);
    layers_.push_back(std::move(layer));

    NormLayer norm;
    norm.running_mean = Tensor(1, d, 0.0);
    // var + eps == 1 at init, so a fresh flow is exactly the identity.
    norm.running_var = Tensor(1, d, 1.0 - config.bn_eps);
    norms_.push_back(std::move(norm));
  }
}

Tensor FlowPrior::st_input(const Tensor& pass_part, const Tensor& cond,
                           const CouplingLayer& layer, int batch) const {
  const bool has_pass = !layer.pass_idx.empty();
  if (layer.has_encoder) {
    if (!cond.defined()) throw diff::TensorError("FlowPrior: conditioning input required");
    const Tensor emb = diff::relu(layer.cond_encoder.forward(cond));
    return has_pass ? diff::concat_cols(pass_part, emb) : emb;
  }
  if (has_pass) return pass_part;
  return Tensor(batch, 1, 1.0);
}

FlowPrior::Result FlowPrior::forward(const Tensor& z, const Tensor& cond) const {
  const int d = cond_spec_.action_dim;
  if (z.cols() != d) throw diff::TensorError("FlowPrior::forward: dimension mismatch");
  const int batch = z.rows();
  Tensor x = z;
  Tensor log_det(batch, 1, 0.0);

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const CouplingLayer& layer = layers_[l];
    if (!layer.trans_idx.empty()) {
      const Tensor pass =
          layer.pass_idx.empty() ? Tensor() : diff::gather_cols(x, layer.pass_idx);
      const Tensor st = layer.st_net.forward(st_input(pass, cond, layer, batch));
      const int n_trans = static_cast<int>(layer.trans_idx.size());
      std::vector<int> s_cols(n_trans), t_cols(n_trans);
      std::iota(s_cols.begin(), s_cols.end(), 0);
      std::iota(t_cols.begin(), t_cols.end(), n_trans);
      const Tensor s =
          diff::mul(diff::tanh(diff::gather_cols(st, s_cols)), layer.gain);
      const Tensor t = diff::gather_cols(st, t_cols);
      const Tensor trans = diff::gather_cols(x, layer.trans_idx);
      const Tensor y_trans = diff::add(diff::mul(trans, diff::exp(s)), t);
      Tensor y = diff::scatter_cols(y_trans, layer.trans_idx, d);
      if (!layer.pass_idx.empty())
        y = diff::add(y, diff::scatter_cols(pass, layer.pass_idx, d));
      x = y;
      log_det = diff::add(log_det, diff::sum(s, diff::Axis::Cols));
    }
    // Normalization, un-normalize direction (frozen statistics only).
    const NormLayer& norm = norms_[l];
    const Tensor denom = diff::sqrt(diff::offset(norm.running_var, config_.bn_eps));
    x = diff::add(diff::mul(x, denom), norm.running_mean);
    const Tensor ld_row =
        diff::scale(diff::sum(diff::log(diff::offset(norm.running_var, config_.bn_eps)),
                              diff::Axis::All),
                    0.5);
    log_det = diff::add(log_det, ld_row);
  }
  return {x, log_det};
}

FlowPrior::Result FlowPrior::inverse(const Tensor& a, const Tensor& cond, StatsMode mode,
                                     std::vector<BatchStats>* captured) const {
  const int d = cond_spec_.action_dim;
  if (a.cols() != d) throw diff::TensorError("FlowPrior::inverse: dimension mismatch");
  const int batch = a.rows();
  if (captured) captured->assign(layers_.size(), BatchStats{});
  Tensor x = a;
  Tensor log_det(batch, 1, 0.0);

  for (int li = static_cast<int>(layers_.size()) - 1; li >= 0; --li) {
    const CouplingLayer& layer = layers_[li];
    const NormLayer& norm = norms_[li];

    Tensor m, v;
    if (mode == StatsMode::Batch) {
      m = diff::mean(x, diff::Axis::Rows);
      const Tensor centered = diff::sub(x, m);
      v = diff::mean(diff::square(centered), diff::Axis::Rows);
      if (captured) {
        (*captured)[li].mean = m.data();
        (*captured)[li].var = v.data();
      }
    } else {
      m = norm.running_mean;
      v = norm.running_var;
    }
    const Tensor veps = diff::offset(v, config_.bn_eps);
    x = diff::div(diff::sub(x, m), diff::sqrt(veps));
    log_det = diff::add(
        log_det, diff::scale(diff::sum(diff::log(veps), diff::Axis::All), -0.5));

    if (!layer.trans_idx.empty()) {
      const Tensor pass =
          layer.pass_idx.empty() ? Tensor() : diff::gather_cols(x, layer.pass_idx);
      const Tensor st = layer.st_net.forward(st_input(pass, cond, layer, batch));
      const int n_trans = static_cast<int>(layer.trans_idx.size());
      std::vector<int> s_cols(n_trans), t_cols(n_trans);
      std::iota(s_cols.begin(), s_cols.end(), 0);
      std::iota(t_cols.begin(), t_cols.end(), n_trans);
      const Tensor s =
          diff::mul(diff::tanh(diff::gather_cols(st, s_cols)), layer.gain);
      const Tensor t = diff::gather_cols(st, t_cols);
      const Tensor y_trans = diff::gather_cols(x, layer.trans_idx);
      const Tensor x_trans = diff::mul(diff::sub(y_trans, t), diff::exp(diff::neg(s)));
      Tensor y = diff::scatter_cols(x_trans, layer.trans_idx, d);
      if (!layer.pass_idx.empty())
        y = diff::add(y, diff::scatter_cols(pass, layer.pass_idx, d));
      x = y;
      log_det = diff::sub(log_det, diff::sum(s, diff::Axis::Cols));
    }
  }
  return {x, log_det};
}

namespace {

Tensor gaussian_log_density(const Tensor& z) {
  const int d = z.cols();
  return diff::offset(diff::scale(diff::sum(diff::square(z), diff::Axis::Cols), -0.5),
                      -0.5 * kLogTwoPi * d);
}

}  // namespace

Tensor FlowPrior::log_density(const Tensor& a, const Tensor& cond) const {
  const Result inv = inverse(a, cond, StatsMode::Frozen);
  return diff::add(gaussian_log_density(inv.value), inv.log_det);
}

Tensor FlowPrior::log_density_training(const Tensor& a, const Tensor& cond,
                                       std::vector<BatchStats>* captured) const {
  const Result inv = inverse(a, cond, StatsMode::Batch, captured);
  return diff::add(gaussian_log_density(inv.value), inv.log_det);
}

void FlowPrior::apply_running_updates(const std::vector<BatchStats>& captured) {
  const double momentum = config_.bn_momentum;
  for (std::size_t l = 0; l < norms_.size(); ++l) {
    if (captured[l].mean.empty()) continue;
    auto& rm = norms_[l].running_mean.data();
    auto& rv = norms_[l].running_var.data();
    for (std::size_t j = 0; j < rm.size(); ++j) {
      rm[j] = momentum * rm[j] + (1.0 - momentum) * captured[l].mean[j];
      rv[j] = momentum * rv[j] + (1.0 - momentum) * captured[l].var[j];
    }
  }
}

std::vector<double> FlowPrior::sample(const Tensor& cond, RngStream& rng) const {
  diff::NoGradGuard guard;
  const int d = cond_spec_.action_dim;
  Tensor z(1, d);
  for (double& v : z.data()) v = rng.normal();
  const Result fwd = forward(z, cond);
  std::vector<double> out(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j)
    out[j] = std::min(std::max(fwd.value.at(0, j), config_.lower[j]), config_.upper[j]);
  return out;
}

Tensor FlowPrior::sample_batch(const Tensor& cond, int n, RngStream& rng) const {
  diff::NoGradGuard guard;
  const int d = cond_spec_.action_dim;
  Tensor z(n, d);
  for (double& v : z.data()) v = rng.normal();
  const Result fwd = forward(z, cond);
  Tensor out = fwd.value.detach();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out.at(i, j) = std::min(std::max(out.at(i, j), config_.lower[j]), config_.upper[j]);
  return out;
}

net::ParamSet FlowPrior::params() const {
  net::ParamSet p;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    if (!layers_[l].trans_idx.empty())
      p.append(layers_[l].st_net.params(prefix + "st."), "");
    if (layers_[l].has_encoder)
      p.append(layers_[l].cond_encoder.params(prefix + "enc."), "");
    p.add(prefix + "gain", layers_[l].gain);
  }
  return p;
}

net::ParamSet FlowPrior::buffers() const {
  net::ParamSet p;
  for (std::size_t l = 0; l < norms_.size(); ++l) {
    const std::string prefix = "norm" + std::to_string(l) + ".";
    p.add(prefix + "mean", norms_[l].running_mean);
    p.add(prefix + "var", norms_[l].running_var);
  }
  return p;
}

// ---------------------------------------------------------------------------

TrainingPairs build_training_pairs(const maze::OfflineDataset& dataset,
                                   const ConditioningSpec& spec) {
  int total = 0;
  for (const auto& traj : dataset.trajectories) total += static_cast<int>(traj.actions.size());
  if (total == 0) throw diff::TensorError("build_training_pairs: empty dataset");

  const int d = spec.action_dim;
  const int cd = spec.cond_dim();
  TrainingPairs out;
  out.count = total;
  out.actions = Tensor(total, d);
  if (cd > 0) out.conds = Tensor(total, cd);

  int row = 0;
  std::deque<std::vector<double>> history;
  for (const auto& traj : dataset.trajectories) {
    history.clear();
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
      for (int j = 0; j < d; ++j) out.actions.at(row, j) = traj.actions[t][j];
      if (cd > 0) {
        const std::vector<double> cond_row = spec.make_row(history, traj.states[t]);
        for (int j = 0; j < cd; ++j) out.conds.at(row, j) = cond_row[j];
      }
      history.push_back(traj.actions[t]);
      if (static_cast<int>(history.size()) > std::max(spec.k, 1)) history.pop_front();
      ++row;
    }
  }
  return out;
}

namespace {

std::vector<std::vector<double>> snapshot_values(const net::ParamSet& params) {
  std::vector<std::vector<double>> snap;
  snap.reserve(params.items.size());
  for (const auto& [name, t] : params.items) snap.push_back(t.data());
  return snap;
}

void restore_values(net::ParamSet& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t k = 0; k < params.items.size(); ++k) params.items[k].second.data() = snap[k];
}

}  // namespace

PriorTrainResult train_prior(FlowPrior& prior, const TrainingPairs& pairs,
                             const PriorTrainConfig& config, RngStream& rng) {
  if (pairs.count == 0) throw diff::TensorError("train_prior: empty dataset");
  PriorTrainResult result;
  net::ParamSet params = prior.params();
  net::ParamSet bufs = prior.buffers();
  net::Adam opt(params.tensors(), config.lr, config.beta1, config.beta2, 1e-8,
                config.weight_decay);

  auto take_snapshot = [&] {
    auto s = snapshot_values(params);
    auto b = snapshot_values(bufs);
    s.insert(s.end(), b.begin(), b.end());
    return s;
  };
  auto restore_snapshot = [&](const std::vector<std::vector<double>>& snap) {
    std::vector<std::vector<double>> s(snap.begin(), snap.begin() + params.items.size());
    std::vector<std::vector<double>> b(snap.begin() + params.items.size(), snap.end());
    restore_values(params, s);
    restore_values(bufs, b);
  };

  std::vector<std::vector<double>> last_good = take_snapshot();
  std::vector<int> order(static_cast<std::size_t>(pairs.count));
  std::iota(order.begin(), order.end(), 0);
  const int cd = prior.cond_spec().cond_dim();
  const int d = prior.action_dim();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with the run's stream.
    for (int i = pairs.count - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(order[i], order[j]);
    }
    double nll_sum = 0.0;
    int nll_count = 0;
    for (int start = 0; start < pairs.count; start += config.batch_size) {
      const int bs = std::min(config.batch_size, pairs.count - start);
      if (bs < 2) continue;  // batch statistics need at least two rows
      Tensor batch_a(bs, d);
      Tensor batch_c = cd > 0 ? Tensor(bs, cd) : Tensor();
      for (int i = 0; i < bs; ++i) {
        const int src = order[start + i];
        for (int j = 0; j < d; ++j) batch_a.at(i, j) = pairs.actions.at(src, j);
        for (int j = 0; j < cd; ++j) batch_c.at(i, j) = pairs.conds.at(src, j);
      }
      std::vector<BatchStats> captured;
      const Tensor logp = prior.log_density_training(batch_a, batch_c, &captured);
      const Tensor loss = diff::neg(diff::mean(logp));
      if (std::isnan(loss.value())) {
        restore_snapshot(last_good);
        result.aborted_on_nan = true;
        return result;
      }
      opt.zero_grad();
      loss.backward();
      opt.step();
      prior.apply_running_updates(captured);
      nll_sum += loss.value() * bs;
      nll_count += bs;
    }
    result.epoch_nll.push_back(nll_count > 0 ? nll_sum / nll_count : 0.0);
    last_good = take_snapshot();
  }
  return result;
}

// ---------------------------------------------------------------------------

void save_flow(const FlowPrior& prior, const std::string& path) {
  nlohmann::json spec;
  spec["kind"] = "flow_prior";
  spec["conditioning"] = {{"kind", cond_kind_name(prior.cond_spec().kind)},
                          {"k", prior.cond_spec().k},
                          {"action_dim", prior.cond_spec().action_dim},
                          {"state_dim", prior.cond_spec().state_dim}};
  spec["flow"] = {{"layers", prior.config().num_coupling_layers},
                  {"hidden", prior.config().hidden},
                  {"bn_momentum", prior.config().bn_momentum},
                  {"bn_eps", prior.config().bn_eps},
                  {"lower", prior.config().lower},
                  {"upper", prior.config().upper}};
  net::ParamSet all = prior.params();
  all.append(prior.buffers(), "buffer.");
  net::save_params(all, spec, path);
}

FlowPrior load_flow(const std::string& path) {
  const net::LoadedParams loaded = net::load_params(path);
  if (loaded.spec.value("kind", "") != "flow_prior")
    throw net::CheckpointError("load_flow: not a flow checkpoint: " + path);
  ConditioningSpec cond;
  cond.kind = cond_kind_from_name(loaded.spec.at("conditioning").at("kind").get<std::string>());
  cond.k = loaded.spec.at("conditioning").at("k").get<int>();
  cond.action_dim = loaded.spec.at("conditioning").at("action_dim").get<int>();
  cond.state_dim = loaded.spec.at("conditioning").at("state_dim").get<int>();
  FlowConfig config;
  config.num_coupling_layers = loaded.spec.at("flow").at("layers").get<int>();
  config.hidden = loaded.spec.at("flow").at("hidden").get<int>();
  config.bn_momentum = loaded.spec.at("flow").at("bn_momentum").get<double>();
  config.bn_eps = loaded.spec.at("flow").at("bn_eps").get<double>();
  config.lower = loaded.spec.at("flow").at("lower").get<std::vector<double>>();
  config.upper = loaded.spec.at("flow").at("upper").get<std::vector<double>>();

  RngStream rng(0);  // values are overwritten immediately below
  FlowPrior prior(cond, config, rng);
  net::ParamSet all = prior.params();
  all.append(prior.buffers(), "buffer.");
  net::restore_into(loaded, all);
  return prior;
}

}  // namespace temporl::flow
