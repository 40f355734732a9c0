#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tslab/model.hpp"
#include "tslab/tasks.hpp"

namespace tslab {

enum class OptKind { sgd, adam };
std::string to_string(OptKind kind);
OptKind opt_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptKind kind = OptKind::sgd;
  double eta0 = 0.1;
  double momentum = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 200;
  // Whether gamma0 multiplies the scaled learning rate (the limiting
  // equations use eta0*gamma0 products; the reference setup does not).
  bool lr_includes_gamma0 = false;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

/// Width/depth learning-rate rule:
///   SGD:  eta0 * N * H * L^(2*alpha_L - 1)
///   Adam: eta0 * N^(-1/2) * H^(-1/2) * L^(alpha_L - 1)
double scaled_lr(OptKind kind, double eta0, int head_dim, int n_heads, int depth,
                 double alpha_depth);

double scaled_lr_for(const OptimizerConfig& optim, const ModelConfig& model);

/// Forward multipliers per parameter group (initial stds are the
/// reciprocals). The depth factor follows the reference convention and
/// does not vary with alpha_depth; bulk is always 1.
std::array<double, 4> group_multipliers(OptKind kind, int depth, double beta0, double alpha_depth,
                                        int adam_scale, int model_dim);
double group_multiplier(const std::array<double, 4>& multipliers, ParamGroupId group);

/// Optimizer state, lazily shaped against the parameter list.
struct OptState {
  std::vector<Tensor> momentum;  // SGD velocity
  std::vector<Tensor> m1, m2;    // Adam moments
  std::int64_t t = 0;            // Adam step counter
};

/// theta <- theta - lr * c_group^2 * g (+ classical momentum). The group
/// multiplier enters squared because it scales both the forward pass and
/// the gradient; with the forward-multiplier convention used here all
/// groups run at c=1.
void sgd_step(std::vector<ParamView>& params, const Grads& grads, double lr, double momentum,
              OptState& state, const std::array<double, 4>& group_lr_multipliers = {1, 1, 1, 1});

void adam_step(std::vector<ParamView>& params, const Grads& grads, double lr,
               const OptimizerConfig& config, OptState& state,
               const std::array<double, 4>& group_lr_multipliers = {1, 1, 1, 1});

struct TrainLogEntry {
  int step;
  double loss;
  bool diverged;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  bool diverged = false;
  int diverged_step = -1;  // first step with a non-finite loss or update
};

/// Hook invoked at requested steps with the current parameters; step 0 is
/// the initial state, step t the state after t updates.
using ProbeHook = std::function<void(int step, const Params& params)>;

struct ProbeSchedule {
  std::vector<int> steps;
  ProbeHook hook;
};

/// Runs exactly optim.steps updates over the dataset's fixed minibatch
/// schedule. Divergence aborts the loop with the step recorded; this is a
/// measured outcome, not a crash.
TrainResult train(Params& params, const ModelConfig& model, const OptimizerConfig& optim,
                  const Dataset& dataset, const std::vector<ProbeSchedule>& probes = {});

}  // namespace tslab
