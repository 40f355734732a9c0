#include "tslab/scalinglab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "tslab/probes.hpp"
#include "tslab/rng.hpp"

namespace tslab {

namespace {

// seed streams, kept distinct so trial/data/probe randomness never overlaps
constexpr std::uint64_t kDataStream = 101;
constexpr std::uint64_t kProbeStream = 202;
constexpr std::uint64_t kProxyStream = 303;
constexpr std::uint64_t kParamStream = 404;

int thread_count() {
  const char* env = std::getenv("TSLAB_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n > 1 ? n : 1;
}

template <class Fn>
void for_each_index(int n, Fn&& fn) {
  const int workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (std::thread& t : pool) t.join();
}

}  // namespace

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::head_dim: return "N";
    case SweepAxis::n_heads: return "H";
    case SweepAxis::depth: return "L";
  }
  return "?";
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "N" || s == "head_dim") return SweepAxis::head_dim;
  if (s == "H" || s == "n_heads") return SweepAxis::n_heads;
  if (s == "L" || s == "depth") return SweepAxis::depth;
  fail("unknown sweep axis '" + s + "' (expected N, H or L)");
}

std::string to_string(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::head_variance: return "head_variance";
    case ProbeKind::delta_k_rms: return "delta_k_rms";
    case ProbeKind::delta_attn_rms: return "delta_attn_rms";
    case ProbeKind::delta_wk_frobenius: return "delta_wk_frobenius";
    case ProbeKind::delta_wq_frobenius: return "delta_wq_frobenius";
    case ProbeKind::delta_h_rms: return "delta_h_rms";
    case ProbeKind::backward_signal: return "backward_signal";
    case ProbeKind::train_loss: return "train_loss";
    case ProbeKind::k_rms: return "k_rms";
  }
  return "?";
}

Dataset DatasetSpec::build(std::uint64_t seed, const ModelConfig& model) const {
  Dataset ds;
  if (task == "regression") {
    ds = make_regression(seed, n_samples, model.seq_len, model.input_dim, teacher_scale);
  } else if (task == "classification") {
    ds = make_classification(seed, n_samples, model.seq_len, model.input_dim, n_classes);
  } else if (task == "induction") {
    ds = make_induction(seed, n_samples, model.seq_len, vocab);
  } else {
    fail("unknown task '" + task + "' (expected regression, classification or induction)");
  }
  ds.batch_size = batch_size;
  return ds;
}

ModelConfig SweepSpec::config_for(int value) const {
  ModelConfig cfg = base;
  switch (axis) {
    case SweepAxis::head_dim: cfg.head_dim = value; break;
    case SweepAxis::n_heads: cfg.n_heads = value; break;
    case SweepAxis::depth: cfg.depth = value; break;
  }
  return cfg;
}

void SweepSpec::validate() const {
  check(!values.empty(), "sweep: no axis values");
  for (size_t i = 1; i < values.size(); ++i)
    check(values[i] > values[i - 1], "sweep: axis values must be strictly ascending");
  check(!seeds.empty(), "sweep: empty seeds list");
  check(steps >= 0, "sweep: steps must be >= 0");
  base.validate();
  optim.validate();
}

FitResult fit_power_law(const std::vector<std::pair<double, double>>& points,
                        bool average_seeds) {
  std::vector<std::pair<double, double>> use = points;
  if (average_seeds) {
    std::map<double, std::pair<double, int>> grouped;
    for (const auto& [x, y] : points) {
      grouped[x].first += y;
      grouped[x].second += 1;
    }
    use.clear();
    for (const auto& [x, acc] : grouped) use.emplace_back(x, acc.first / acc.second);
  }
  std::ostringstream offenders;
  int bad = 0;
  for (const auto& [x, y] : use)
    if (!(x > 0.0) || !(y > 0.0)) {
      offenders << " (" << x << ", " << y << ")";
      ++bad;
    }
  if (bad > 0) fail("fit_power_law: nonpositive points:" + offenders.str());
  check(use.size() >= 3, "fit_power_law: need at least 3 distinct x values");

  const int n = static_cast<int>(use.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (const auto& [x, y] : use) {
    const double lx = std::log(x), ly = std::log(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    syy += ly * ly;
  }
  const double denom = n * sxx - sx * sx;
  check(std::abs(denom) > 0.0, "fit_power_law: degenerate x values");
  FitResult fit;
  fit.exponent = (n * sxy - sx * sy) / denom;
  fit.log_intercept = (sy - fit.exponent * sx) / n;
  fit.points_used = n;
  const double sst = syy - sy * sy / n;
  if (sst <= 0.0) {
    fit.r_squared = 1.0;  // constant y: the fit is exact
  } else {
    double sse = 0.0;
    for (const auto& [x, y] : use) {
      const double resid = std::log(y) - (fit.log_intercept + fit.exponent * std::log(x));
      sse += resid * resid;
    }
    fit.r_squared = std::clamp(1.0 - sse / sst, 0.0, 1.0);
  }
  return fit;
}

FitResult fit_rows(const std::vector<SweepRow>& rows, const std::string& metric, int step,
                   bool average_seeds) {
  std::vector<std::pair<double, double>> points;
  for (const SweepRow& r : rows)
    if (!r.diverged && r.metric == metric && (step < 0 || r.step == step))
      points.emplace_back(static_cast<double>(r.value), r.metric_value);
  return fit_power_law(points, average_seeds);
}

namespace {

struct TrialPlan {
  const SweepSpec* spec;
  int value;
  std::uint64_t seed;
};

double evaluate_probe(ProbeKind kind, const Params& params, const Params& init_params_copy,
                      const ActivationTrace& init_trace, const ModelConfig& cfg,
                      const Dataset& train_ds, const std::vector<const Sample*>& probe_batch,
                      int step) {
  switch (kind) {
    case ProbeKind::head_variance: {
      ForwardResult fw = forward(params, cfg, probe_batch, step);
      return mean_attn_head_variance(fw.trace);
    }
    case ProbeKind::delta_k_rms:
    case ProbeKind::delta_attn_rms:
    case ProbeKind::delta_wk_frobenius:
    case ProbeKind::delta_wq_frobenius:
    case ProbeKind::delta_h_rms: {
      ForwardResult fw = forward(params, cfg, probe_batch, step);
      UpdateMeters m = update_meters(init_params_copy, params, init_trace, fw.trace);
      if (kind == ProbeKind::delta_k_rms) return m.k_entry_rms;
      if (kind == ProbeKind::delta_attn_rms) return m.attn_entry_rms;
      if (kind == ProbeKind::delta_wk_frobenius) return m.wk_frobenius;
      if (kind == ProbeKind::delta_wq_frobenius) return m.wq_frobenius;
      return m.h_last_rms;
    }
    case ProbeKind::backward_signal: {
      ForwardResult fw = forward(params, cfg, probe_batch, step);
      fw.trace.run_output_backward(0);
      return max_backward_signal(fw.trace);
    }
    case ProbeKind::train_loss: {
      std::vector<const Sample*> all;
      for (const Sample& s : train_ds.samples) all.push_back(&s);
      LossResult lr = loss_and_grads(params, cfg, all, train_ds.loss_kind, step);
      return lr.loss;
    }
    case ProbeKind::k_rms: {
      ForwardResult fw = forward(params, cfg, probe_batch, step);
      double sq = 0.0;
      std::int64_t n = 0;
      for (const SampleTrace& st : fw.trace.samples)
        for (const auto& layer : st.k)
          for (Var kv : layer) {
            const Tensor& t = fw.trace.tape->value(kv);
            sq += t.squared_norm();
            n += t.size();
          }
      return std::sqrt(sq / static_cast<double>(n));
    }
  }
  fail("evaluate_probe: unhandled probe");
}

std::vector<SweepRow> run_trial(const TrialPlan& plan) {
  const SweepSpec& spec = *plan.spec;
  const ModelConfig cfg = spec.config_for(plan.value);
  cfg.validate();

  const Dataset train_ds = spec.data.build(derive_seed(plan.seed, kDataStream), cfg);
  Dataset probe_ds = spec.data.build(derive_seed(0xabcdULL, kProbeStream), cfg);
  if (spec.probe_samples < static_cast<int>(probe_ds.samples.size()))
    probe_ds.samples.resize(static_cast<size_t>(spec.probe_samples));
  std::vector<const Sample*> probe_batch;
  for (const Sample& s : probe_ds.samples) probe_batch.push_back(&s);

  Params params = init_params(cfg, derive_seed(plan.seed, kParamStream));
  std::vector<int> measure = spec.measure_at.empty() ? std::vector<int>{spec.steps}
                                                     : spec.measure_at;
  std::sort(measure.begin(), measure.end());

  const bool needs_baseline =
      std::any_of(spec.probes.begin(), spec.probes.end(), [](ProbeKind k) {
        return k == ProbeKind::delta_k_rms || k == ProbeKind::delta_attn_rms ||
               k == ProbeKind::delta_wk_frobenius || k == ProbeKind::delta_wq_frobenius ||
               k == ProbeKind::delta_h_rms;
      });
  Params init_copy;
  ActivationTrace init_trace;
  if (needs_baseline) {
    init_copy = params;
    init_trace = forward(params, cfg, probe_batch, 0).trace;
  }

  std::vector<SweepRow> rows;
  auto emit = [&](int step, ProbeKind kind, double value, bool diverged) {
    rows.push_back({spec.experiment, to_string(spec.axis), plan.value, plan.seed, step,
                    to_string(kind), value, diverged});
  };

  OptimizerConfig optim = spec.optim;
  optim.steps = spec.steps;
  std::vector<int> measured;
  ProbeSchedule schedule;
  schedule.steps = measure;
  schedule.hook = [&](int step, const Params& p) {
    for (ProbeKind kind : spec.probes) {
      double value = 0.0;
      bool bad = false;
      try {
        value = evaluate_probe(kind, p, init_copy, init_trace, cfg, train_ds, probe_batch, step);
        if (!std::isfinite(value)) bad = true;
      } catch (const Error&) {
        bad = true;
      }
      emit(step, kind, value, bad);
    }
    measured.push_back(step);
  };

  TrainResult result = train(params, cfg, optim, train_ds, {schedule});
  if (result.diverged) {
    // remaining measurement steps become flagged rows
    for (int step : measure) {
      if (std::find(measured.begin(), measured.end(), step) != measured.end()) continue;
      for (ProbeKind kind : spec.probes)
        emit(step, kind, std::numeric_limits<double>::quiet_NaN(), true);
    }
  }
  return rows;
}

ExperimentResult collect_trials(const SweepSpec& spec) {
  spec.validate();
  check(!spec.probes.empty(), "sweep: no probes requested");
  std::vector<TrialPlan> plans;
  for (int value : spec.values)
    for (std::uint64_t seed : spec.seeds) plans.push_back({&spec, value, seed});

  std::vector<std::vector<SweepRow>> slots(plans.size());
  for_each_index(static_cast<int>(plans.size()),
                 [&](int i) { slots[static_cast<size_t>(i)] = run_trial(plans[static_cast<size_t>(i)]); });

  ExperimentResult out;
  for (const auto& slot : slots)
    for (const SweepRow& row : slot) {
      out.rows.push_back(row);
      if (row.diverged) ++out.diverged_trials;
    }
  return out;
}

}  // namespace

ExperimentResult run_sweep(const SweepSpec& spec) { return collect_trials(spec); }

Tensor ensemble_proxy(const ModelConfig& config, const OptimizerConfig& optim,
                      const DatasetSpec& data, const std::vector<std::uint64_t>& seeds, int steps,
                      const std::vector<const Sample*>& probe_batch) {
  check(seeds.size() >= 2, "ensemble_proxy: need at least two seeds");
  Tensor mean;
  for (size_t i = 0; i < seeds.size(); ++i) {
    const Dataset ds = data.build(derive_seed(seeds[i], kDataStream), config);
    Params params = init_params(config, derive_seed(seeds[i], kParamStream));
    OptimizerConfig oc = optim;
    oc.steps = steps;
    TrainResult tr = train(params, config, oc, ds);
    check(!tr.diverged, "ensemble_proxy: a proxy model diverged");
    ForwardResult fw = forward(params, config, probe_batch, steps);
    if (mean.empty()) {
      mean = Tensor(fw.logits.shape());
    }
    for (std::int64_t j = 0; j < mean.size(); ++j) mean[j] += fw.logits[j];
  }
  for (std::int64_t j = 0; j < mean.size(); ++j) mean[j] /= static_cast<double>(seeds.size());
  return mean;
}

ExperimentResult head_collapse_experiment(const SweepSpec& spec) {
  SweepSpec s = spec;
  s.axis = SweepAxis::head_dim;
  if (s.probes.empty()) s.probes = {ProbeKind::head_variance};
  check(s.base.n_heads >= 2, "head_collapse: need at least two heads");
  ExperimentResult result = collect_trials(s);
  const int final_step = s.measure_at.empty() ? s.steps : s.measure_at.back();
  for (ProbeKind kind : s.probes)
    if (kind != ProbeKind::train_loss)
      result.fits.push_back({to_string(kind), fit_rows(result.rows, to_string(kind), final_step)});
  return result;
}

ExperimentResult kernel_convergence_experiment(const SweepSpec& spec, int layer, bool pooled,
                                               int proxy_seed_count) {
  SweepSpec s = spec;
  s.axis = SweepAxis::n_heads;
  s.validate();
  check(s.values.size() >= 4, "kernel_convergence: need at least 4 head counts");
  check(proxy_seed_count >= 2, "kernel_convergence: need at least 2 proxy seeds");

  const ModelConfig largest = s.config_for(s.values.back());
  if (layer <= 0) layer = largest.depth + 1;

  Dataset probe_ds = s.data.build(derive_seed(0xabcdULL, kProbeStream), largest);
  if (s.probe_samples < static_cast<int>(probe_ds.samples.size()))
    probe_ds.samples.resize(static_cast<size_t>(s.probe_samples));
  std::vector<const Sample*> probe_batch;
  for (const Sample& smp : probe_ds.samples) probe_batch.push_back(&smp);

  // reference: seed-averaged kernel of the largest head count, seeds
  // disjoint from the sweep seeds
  Kernel reference;
  for (int p = 0; p < proxy_seed_count; ++p) {
    Params params = init_params(largest, derive_seed(0xfeedULL, kProxyStream, static_cast<std::uint64_t>(p)));
    ForwardResult fw = forward(params, largest, probe_batch, 0);
    Kernel k = residual_kernel(fw.trace, layer, pooled);
    if (p == 0) {
      reference = k;
    } else {
      for (std::int64_t i = 0; i < reference.values.size(); ++i) reference.values[i] += k.values[i];
    }
  }
  for (std::int64_t i = 0; i < reference.values.size(); ++i)
    reference.values[i] /= proxy_seed_count;

  ExperimentResult result;
  std::vector<TrialPlan> plans;
  for (int value : s.values)
    for (std::uint64_t seed : s.seeds) plans.push_back({&s, value, seed});
  std::vector<SweepRow> slots(plans.size());
  for_each_index(static_cast<int>(plans.size()), [&](int i) {
    const TrialPlan& plan = plans[static_cast<size_t>(i)];
    const ModelConfig cfg = s.config_for(plan.value);
    Params params = init_params(cfg, derive_seed(plan.seed, kParamStream));
    ForwardResult fw = forward(params, cfg, probe_batch, 0);
    Kernel k = residual_kernel(fw.trace, layer, pooled);
    check(k.index == reference.index, "kernel_convergence: probe index sets disagree");
    slots[static_cast<size_t>(i)] = {s.experiment, to_string(s.axis), plan.value, plan.seed, 0,
                                     "kernel_sq_distance", kernel_distance(k, reference), false};
  });
  result.rows.assign(slots.begin(), slots.end());
  result.fits.push_back({"kernel_sq_distance", fit_rows(result.rows, "kernel_sq_distance", 0)});
  return result;
}

ExperimentResult logit_convergence_experiment(const SweepSpec& spec, int early_step,
                                              int proxy_seed_count) {
  SweepSpec s = spec;
  s.axis = SweepAxis::n_heads;
  s.validate();
  check(proxy_seed_count >= 2, "logit_convergence: need at least 2 proxy seeds");
  if (early_step <= 0) early_step = std::max(1, s.steps / 10);

  const ModelConfig largest = s.config_for(s.values.back());
  Dataset probe_ds = s.data.build(derive_seed(0xabcdULL, kProbeStream), largest);
  if (s.probe_samples < static_cast<int>(probe_ds.samples.size()))
    probe_ds.samples.resize(static_cast<size_t>(s.probe_samples));
  std::vector<const Sample*> probe_batch;
  for (const Sample& smp : probe_ds.samples) probe_batch.push_back(&smp);

  std::vector<std::uint64_t> proxy_seeds;
  for (int p = 0; p < proxy_seed_count; ++p)
    proxy_seeds.push_back(derive_seed(0xfeedULL, kProxyStream, static_cast<std::uint64_t>(p)));
  const Tensor proxy = ensemble_proxy(largest, s.optim, s.data, proxy_seeds, early_step, probe_batch);

  ExperimentResult result;
  std::vector<TrialPlan> plans;
  for (int value : s.values)
    for (std::uint64_t seed : s.seeds) plans.push_back({&s, value, seed});
  std::vector<SweepRow> slots(plans.size());
  for_each_index(static_cast<int>(plans.size()), [&](int i) {
    const TrialPlan& plan = plans[static_cast<size_t>(i)];
    const ModelConfig cfg = s.config_for(plan.value);
    const Dataset ds = s.data.build(derive_seed(plan.seed, kDataStream), cfg);
    Params params = init_params(cfg, derive_seed(plan.seed, kParamStream));
    OptimizerConfig oc = s.optim;
    oc.steps = early_step;
    TrainResult tr = train(params, cfg, oc, ds);
    SweepRow row{s.experiment, to_string(s.axis), plan.value, plan.seed, early_step,
                 "logit_mse", std::numeric_limits<double>::quiet_NaN(), true};
    if (!tr.diverged) {
      ForwardResult fw = forward(params, cfg, probe_batch, early_step);
      double mse = 0.0;
      for (std::int64_t j = 0; j < proxy.size(); ++j) {
        const double d = fw.logits[j] - proxy[j];
        mse += d * d;
      }
      row.metric_value = mse / static_cast<double>(proxy.size());
      row.diverged = false;
    }
    slots[static_cast<size_t>(i)] = row;
  });
  result.rows.assign(slots.begin(), slots.end());
  for (const SweepRow& r : result.rows)
    if (r.diverged) ++result.diverged_trials;
  result.fits.push_back({"logit_mse", fit_rows(result.rows, "logit_mse", early_step)});
  return result;
}

ExperimentResult depth_experiment(const SweepSpec& spec) {
  SweepSpec s = spec;
  s.axis = SweepAxis::depth;
  if (s.probes.empty()) s.probes = {ProbeKind::delta_wk_frobenius};
  ExperimentResult result = collect_trials(s);

  // init-time kernel deviation between the last stream state and the
  // read-in state, measured on a fresh probe batch per (depth, seed)
  for (int value : s.values) {
    const ModelConfig cfg = s.config_for(value);
    Dataset probe_ds = s.data.build(derive_seed(0xabcdULL, kProbeStream), cfg);
    if (s.probe_samples < static_cast<int>(probe_ds.samples.size()))
      probe_ds.samples.resize(static_cast<size_t>(s.probe_samples));
    std::vector<const Sample*> probe_batch;
    for (const Sample& smp : probe_ds.samples) probe_batch.push_back(&smp);
    for (std::uint64_t seed : s.seeds) {
      Params params = init_params(cfg, derive_seed(seed, kParamStream));
      ForwardResult fw = forward(params, cfg, probe_batch, 0);
      Kernel first = residual_kernel(fw.trace, 1, false);
      Kernel last = residual_kernel(fw.trace, cfg.depth + 1, false);
      double dev = 0.0;
      for (std::int64_t i = 0; i < first.values.size(); ++i) {
        const double d = last.values[i] - first.values[i];
        dev += d * d;
      }
      dev /= static_cast<double>(first.values.size());
      result.rows.push_back({s.experiment, "L", value, seed, 0, "init_kernel_deviation", dev, false});
    }
  }

  const int final_step = s.measure_at.empty() ? s.steps : s.measure_at.back();
  result.fits.push_back(
      {"delta_wk_frobenius", fit_rows(result.rows, "delta_wk_frobenius", final_step)});
  result.fits.push_back(
      {"init_kernel_deviation", fit_rows(result.rows, "init_kernel_deviation", 0)});
  return result;
}

ExperimentResult update_scaling_experiment(const SweepSpec& spec, int t_steps) {
  check(t_steps >= 2, "update_scaling: need t_steps >= 2 (first-step updates are suppressed)");
  SweepSpec s = spec;
  s.axis = SweepAxis::head_dim;
  s.steps = t_steps;
  s.measure_at = {t_steps};
  s.probes = {ProbeKind::delta_k_rms, ProbeKind::delta_attn_rms};
  ExperimentResult result = collect_trials(s);
  result.fits.push_back({"delta_k_rms", fit_rows(result.rows, "delta_k_rms", t_steps)});
  result.fits.push_back({"delta_attn_rms", fit_rows(result.rows, "delta_attn_rms", t_steps)});
  return result;
}

ExperimentResult stability_probe(const SweepSpec& spec) {
  check(spec.steps >= 2, "stability_probe: divergence appears after two or more steps");
  SweepSpec s = spec;
  s.axis = SweepAxis::head_dim;
  s.probes = {ProbeKind::backward_signal};
  if (s.measure_at.empty()) s.measure_at = {s.steps};
  ExperimentResult result = collect_trials(s);
  result.fits.push_back(
      {"backward_signal", fit_rows(result.rows, "backward_signal", s.measure_at.back())});
  return result;
}

std::vector<DeepLinearRow> deep_linear_response_check(int width, const std::vector<int>& depths,
                                                      double eta, double gamma0, int trials,
                                                      std::uint64_t seed) {
  check(width >= 2, "deep_linear_response_check: width too small");
  check(trials >= 2, "deep_linear_response_check: need at least 2 trials");
  std::vector<DeepLinearRow> table;
  for (int depth : depths) {
    check(depth >= 1, "deep_linear_response_check: depth must be >= 1");
    std::vector<double> measured(static_cast<size_t>(trials));
    for_each_index(trials, [&](int t) {
      Rng rng(derive_seed(seed, 0x5011ULL, static_cast<std::uint64_t>(depth) * 1000 + t));
      DeepLinearParams params = init_deep_linear(width, width, depth, rng.raw());
      Tensor x = rng.normal_tensor({width}, 1.0);
      deep_linear_step(params, depth, gamma0, eta, x, 1.0);
      DeepLinearForward fw = forward_deep_linear(params, depth, gamma0, x);
      measured[static_cast<size_t>(t)] = fw.h.back().squared_norm() / width;
    });
    double mean = 0.0;
    for (double m : measured) mean += m;
    mean /= trials;
    double var = 0.0;
    for (double m : measured) var += (m - mean) * (m - mean);
    var /= (trials - 1);
    double sum_k2 = 0.0;
    for (int k = 1; k <= depth; ++k) sum_k2 += static_cast<double>(k) * k;
    const double eg = eta * gamma0;
    DeepLinearRow row;
    row.depth = depth;
    row.measured_mean = mean;
    row.measured_se = std::sqrt(var / trials);
    row.dmft_prediction = 1.0 + eg * eg * sum_k2;
    row.naive_prediction = 1.0 + eg * eg * depth;
    row.trials = trials;
    table.push_back(row);
  }
  return table;
}

}  // namespace tslab
