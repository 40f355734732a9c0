#include "tslab/optim.hpp"

#include <cmath>

namespace tslab {

std::string to_string(OptKind kind) { return kind == OptKind::sgd ? "sgd" : "adam"; }

OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "adam") return OptKind::adam;
  fail("unknown optimizer '" + s + "'");
}

void OptimizerConfig::validate() const {
  check(eta0 > 0.0, "optimizer config: eta0 must be positive");
  check(momentum >= 0.0 && momentum < 1.0, "optimizer config: momentum outside [0,1)");
  check(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "optimizer config: adam_beta1 outside [0,1)");
  check(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "optimizer config: adam_beta2 outside [0,1)");
  check(adam_eps > 0.0, "optimizer config: adam_eps must be positive");
  check(steps >= 0, "optimizer config: steps must be >= 0");
}

double scaled_lr(OptKind kind, double eta0, int head_dim, int n_heads, int depth,
                 double alpha_depth) {
  check(head_dim >= 1 && n_heads >= 1 && depth >= 1, "scaled_lr: sizes must be positive");
  const double n = head_dim, h = n_heads, l = depth;
  if (kind == OptKind::sgd) return eta0 * n * h * std::pow(l, 2.0 * alpha_depth - 1.0);
  return eta0 * std::pow(n, -0.5) * std::pow(h, -0.5) * std::pow(l, alpha_depth - 1.0);
}

double scaled_lr_for(const OptimizerConfig& optim, const ModelConfig& model) {
  double lr = scaled_lr(optim.kind, optim.eta0, model.head_dim, model.n_heads, model.depth,
                        model.alpha_depth);
  if (optim.lr_includes_gamma0) lr *= model.gamma0;
  return lr;
}

std::array<double, 4> group_multipliers(OptKind, int depth, double beta0, double alpha_depth,
                                        int adam_scale, int model_dim) {
  check(depth >= 1, "group_multipliers: depth must be >= 1");
  check(beta0 > 0.0, "group_multipliers: beta0 must be positive");
  (void)alpha_depth;  // reference convention: depth factor fixed at (L/beta0)^(-1/2)
  const double a = static_cast<double>(adam_scale);
  const double c =
      std::pow(depth / beta0, -0.5 * (1.0 - a)) * std::pow(static_cast<double>(model_dim), 0.5 * a);
  std::array<double, 4> out{};
  out[static_cast<size_t>(ParamGroupId::read_in)] = c;
  out[static_cast<size_t>(ParamGroupId::positional)] = c;
  out[static_cast<size_t>(ParamGroupId::bulk)] = 1.0;
  out[static_cast<size_t>(ParamGroupId::read_out)] = c;
  return out;
}

double group_multiplier(const std::array<double, 4>& multipliers, ParamGroupId group) {
  return multipliers[static_cast<size_t>(group)];
}

namespace {

void shape_state(std::vector<Tensor>& state, const std::vector<ParamView>& params) {
  if (state.size() == params.size()) return;
  state.clear();
  for (const ParamView& v : params) state.emplace_back(v.tensor->shape());
}

void check_grads(const std::vector<ParamView>& params, const Grads& grads) {
  check(params.size() == grads.tensors.size(), "step: gradients misaligned with parameters");
  for (size_t i = 0; i < params.size(); ++i) {
    check(params[i].tensor->same_shape(grads.tensors[i]), "step: gradient shape mismatch at " +
                                                              params[i].name);
    if (!grads.tensors[i].all_finite()) fail("step: non-finite gradient at " + params[i].name);
  }
}

}  // namespace

void sgd_step(std::vector<ParamView>& params, const Grads& grads, double lr, double momentum,
              OptState& state, const std::array<double, 4>& group_lr_multipliers) {
  check_grads(params, grads);
  shape_state(state.momentum, params);
  for (size_t i = 0; i < params.size(); ++i) {
    const double c = group_lr_multipliers[static_cast<size_t>(params[i].group)];
    const double step_size = lr * c * c;
    Tensor& theta = *params[i].tensor;
    Tensor& vel = state.momentum[i];
    const Tensor& g = grads.tensors[i];
    for (std::int64_t j = 0; j < theta.size(); ++j) {
      vel[j] = momentum * vel[j] + g[j];
      theta[j] -= step_size * vel[j];
    }
  }
}

void adam_step(std::vector<ParamView>& params, const Grads& grads, double lr,
               const OptimizerConfig& config, OptState& state,
               const std::array<double, 4>& group_lr_multipliers) {
  check_grads(params, grads);
  shape_state(state.m1, params);
  shape_state(state.m2, params);
  state.t += 1;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    const double c = group_lr_multipliers[static_cast<size_t>(params[i].group)];
    const double step_size = lr * c * c;
    Tensor& theta = *params[i].tensor;
    Tensor& m = state.m1[i];
    Tensor& v = state.m2[i];
    const Tensor& g = grads.tensors[i];
    for (std::int64_t j = 0; j < theta.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= step_size * mhat / (std::sqrt(vhat) + config.adam_eps);
    }
  }
}

TrainResult train(Params& params, const ModelConfig& model, const OptimizerConfig& optim,
                  const Dataset& dataset, const std::vector<ProbeSchedule>& probes) {
  model.validate();
  optim.validate();
  check(!dataset.samples.empty(), "train: dataset is empty");

  TrainResult result;
  std::vector<ParamView> views = param_views(params);
  OptState state;
  const double lr = scaled_lr_for(optim, model);

  auto run_probes = [&](int step) {
    for (const ProbeSchedule& p : probes)
      for (int s : p.steps)
        if (s == step) p.hook(step, params);
  };

  run_probes(0);
  for (int step = 0; step < optim.steps; ++step) {
    std::vector<const Sample*> batch = dataset.minibatch(step);
    double loss = 0.0;
    try {
      LossResult lr_result = loss_and_grads(params, model, batch, dataset.loss_kind, step);
      loss = lr_result.loss;
      if (!std::isfinite(loss)) fail("train: non-finite loss");
      if (optim.kind == OptKind::sgd)
        sgd_step(views, lr_result.grads, lr, optim.momentum, state);
      else
        adam_step(views, lr_result.grads, lr, optim, state);
    } catch (const Error&) {
      result.diverged = true;
      result.diverged_step = step;
      result.log.push_back({step, loss, true});
      return result;
    }
    result.log.push_back({step, loss, false});
    run_probes(step + 1);
  }
  return result;
}

}  // namespace tslab
