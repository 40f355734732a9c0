#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tslab/model.hpp"
#include "tslab/optim.hpp"
#include "tslab/tasks.hpp"

namespace tslab {

enum class SweepAxis { head_dim, n_heads, depth };
std::string to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(const std::string& s);

/// Dataset recipe; trials build their own copies deterministically.
struct DatasetSpec {
  std::string task = "regression";  // regression | classification | induction
  int n_samples = 8;
  int batch_size = 0;  // 0: full batch
  int n_classes = 2;
  int vocab = 8;
  double teacher_scale = 1.0;

  Dataset build(std::uint64_t seed, const ModelConfig& model) const;
  bool operator==(const DatasetSpec&) const = default;
};

enum class ProbeKind {
  head_variance,      // mean over layers/pairs/samples of attention variance across heads
  delta_k_rms,        // update meters relative to the step-0 state
  delta_attn_rms,
  delta_wk_frobenius,
  delta_wq_frobenius,
  delta_h_rms,
  backward_signal,    // max |g| over layers after a fresh output backward
  train_loss,
  k_rms,              // RMS over all key entries of a probe forward
};
std::string to_string(ProbeKind kind);

/// One scaling experiment: an axis swept over sizes with several seeds,
/// trained for `steps`, probed at `measure_at`.
struct SweepSpec {
  std::string experiment = "sweep";
  SweepAxis axis = SweepAxis::n_heads;
  std::vector<int> values;
  ModelConfig base;
  OptimizerConfig optim;
  DatasetSpec data;
  std::vector<std::uint64_t> seeds;
  int steps = 0;
  std::vector<int> measure_at;  // defaults to {steps}
  std::vector<ProbeKind> probes;
  int probe_samples = 16;

  ModelConfig config_for(int value) const;
  void validate() const;
};

struct SweepRow {
  std::string experiment;
  std::string axis;
  int value = 0;
  std::uint64_t seed = 0;
  int step = 0;
  std::string metric;
  double metric_value = 0.0;
  bool diverged = false;
};

struct FitResult {
  double exponent = 0.0;
  double log_intercept = 0.0;
  double r_squared = 0.0;
  int points_used = 0;
};

struct NamedFit {
  std::string metric;
  FitResult fit;
};

struct ExperimentResult {
  std::vector<SweepRow> rows;
  std::vector<NamedFit> fits;
  int diverged_trials = 0;
};

/// Ordinary least squares of ln y on ln x; exponent is the slope.
/// Rejects nonpositive y values, listing the offenders.
FitResult fit_power_law(const std::vector<std::pair<double, double>>& points, bool average_seeds);

/// Fit of one metric from sweep rows (diverged rows never contribute).
FitResult fit_rows(const std::vector<SweepRow>& rows, const std::string& metric, int step,
                   bool average_seeds = true);

/// Generic engine: one row per (value, seed, measure step, probe），
/// deterministic per seed, independent trials.
ExperimentResult run_sweep(const SweepSpec& spec);

/// Mean logits over fresh seeds of the largest config, each trained like a
/// sweep trial; the computable stand-in for the infinite-head limit.
Tensor ensemble_proxy(const ModelConfig& config, const OptimizerConfig& optim,
                      const DatasetSpec& data, const std::vector<std::uint64_t>& seeds, int steps,
                      const std::vector<const Sample*>& probe_batch);

// --- named experiments ----------------------------------------------------

/// Head-variance decay across head_dim after training (and at init when
/// spec.steps == 0).
ExperimentResult head_collapse_experiment(const SweepSpec& spec);

/// Init-time squared kernel distance to the seed-averaged largest-head
/// kernel; proxy seeds are disjoint from sweep seeds.
ExperimentResult kernel_convergence_experiment(const SweepSpec& spec, int layer, bool pooled,
                                               int proxy_seed_count);

/// Early-training logit MSE against the ensemble proxy.
ExperimentResult logit_convergence_experiment(const SweepSpec& spec, int early_step,
                                              int proxy_seed_count);

/// Key-weight movement after training plus init-time kernel deviation
/// mean((H^last - H^1)^2), both against depth.
ExperimentResult depth_experiment(const SweepSpec& spec);

/// Key-entry and pre-attention update RMS after t steps of scaled SGD.
ExperimentResult update_scaling_experiment(const SweepSpec& spec, int t_steps);

/// Backward-signal magnitude growth across head_dim after >= 2 steps.
ExperimentResult stability_probe(const SweepSpec& spec);

struct DeepLinearRow {
  int depth = 0;
  double measured_mean = 0.0;
  double measured_se = 0.0;
  double dmft_prediction = 0.0;
  double naive_prediction = 0.0;
  int trials = 0;
};

/// One-step feature-variance check in the deep linear network: measured
/// H^L(1,1) against 1 + (eta*gamma0)^2 * sum k^2 (with response terms) and
/// 1 + (eta*gamma0)^2 * L (without).
std::vector<DeepLinearRow> deep_linear_response_check(int width, const std::vector<int>& depths,
                                                      double eta, double gamma0, int trials,
                                                      std::uint64_t seed);

}  // namespace tslab
