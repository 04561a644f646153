#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "temporl/nets.hpp"
#include "temporl/rng.hpp"
#include "temporl/tensor.hpp"

namespace temporl::maze {
struct OfflineDataset;
}

namespace temporl::flow {

using diff::Tensor;

enum class CondKind { None, LastActions, State, StateAndLastAction };

std::string cond_kind_name(CondKind kind);
CondKind cond_kind_from_name(const std::string& name);

// What the prior is conditioned on; history windows shorter than k are
// zero-padded on the left.
struct ConditioningSpec {
  CondKind kind = CondKind::LastActions;
  int k = 1;  // history length for LastActions
  int action_dim = 0;
  int state_dim = 0;

  int cond_dim() const;
  // Builds one conditioning row from the most recent actions (front = oldest)
  // and the current state (positions only; priors never see goals).
  std::vector<double> make_row(const std::deque<std::vector<double>>& recent_actions,
                               const std::vector<double>& state) const;
};

struct FlowConfig {
  int num_coupling_layers = 6;
  int hidden = 128;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;
  std::vector<double> lower;  // per-dim action bounds, used to clamp samples
  std::vector<double> upper;
};

// One Real NVP block: the pass partition goes through unchanged and, together
// with the encoded conditioning input, parameterizes an affine map of the
// complement. Scales are tanh-bounded then multiplied by a learnable gain.
struct CouplingLayer {
  std::vector<int> pass_idx;
  std::vector<int> trans_idx;
  net::Mlp st_net;         // split output: [scale | shift]
  net::Mlp cond_encoder;   // present iff cond_dim > 0
  Tensor gain;             // 1x1
  bool has_encoder = false;
};

struct NormLayer {
  Tensor running_mean;  // 1 x d
  Tensor running_var;   // 1 x d
};

// Snapshot of one normalization layer's batch statistics, captured during a
// training-mode inverse pass.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

class FlowPrior {
 public:
  FlowPrior() = default;
  FlowPrior(const ConditioningSpec& cond_spec, const FlowConfig& config, RngStream& rng);

  enum class StatsMode { Frozen, Batch };

  struct Result {
    Tensor value;    // batch x d
    Tensor log_det;  // batch x 1
  };

  // z -> a through coupling + normalization layers in order.
  Result forward(const Tensor& z, const Tensor& cond) const;
  // a -> z; log_det is for the a->z direction. In Batch mode normalization
  // uses in-graph batch statistics; captured, when given, receives them for
  // running-average updates.
  Result inverse(const Tensor& a, const Tensor& cond, StatsMode mode = StatsMode::Frozen,
                 std::vector<BatchStats>* captured = nullptr) const;

  // log N(z; 0, I) + log|det dz/da| with frozen statistics. batch x 1.
  Tensor log_density(const Tensor& a, const Tensor& cond) const;
  // Same quantity with batch statistics, used as the training objective.
  Tensor log_density_training(const Tensor& a, const Tensor& cond,
                              std::vector<BatchStats>* captured = nullptr) const;

  void apply_running_updates(const std::vector<BatchStats>& captured);

  // Draw z ~ N(0, I), run forward frozen, clamp componentwise to bounds.
  std::vector<double> sample(const Tensor& cond, RngStream& rng) const;
  Tensor sample_batch(const Tensor& cond, int n, RngStream& rng) const;

  const ConditioningSpec& cond_spec() const { return cond_spec_; }
  const FlowConfig& config() const { return config_; }
  int action_dim() const { return cond_spec_.action_dim; }

  net::ParamSet params() const;   // trainable
  net::ParamSet buffers() const;  // normalization statistics

 private:
  Tensor st_input(const Tensor& pass_part, const Tensor& cond, const CouplingLayer& layer,
                  int batch) const;

  ConditioningSpec cond_spec_;
  FlowConfig config_;
  std::vector<CouplingLayer> layers_;
  std::vector<NormLayer> norms_;
};

// ---------------------------------------------------------------------------
// training

struct TrainingPairs {
  Tensor actions;  // N x d
  Tensor conds;    // N x cond_dim, undefined when cond_dim == 0
  int count = 0;
};

TrainingPairs build_training_pairs(const maze::OfflineDataset& dataset,
                                   const ConditioningSpec& spec);

struct PriorTrainConfig {
  int epochs = 100;
  int batch_size = 400;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-6;
};

struct PriorTrainResult {
  std::vector<double> epoch_nll;  // mean NLL per sample, one entry per epoch
  bool aborted_on_nan = false;
};

// Maximum-likelihood training; on a NaN loss the last epoch checkpoint is
// restored and training stops.
PriorTrainResult train_prior(FlowPrior& prior, const TrainingPairs& pairs,
                             const PriorTrainConfig& config, RngStream& rng);

// Checkpoint I/O (netlib parameter format plus a conditioning header).
void save_flow(const FlowPrior& prior, const std::string& path);
FlowPrior load_flow(const std::string& path);

}  // namespace temporl::flow
