#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tslab/probes.hpp"
#include "tslab/scalinglab.hpp"

namespace tslab {

/// Everything a command needs: model + optimizer + dataset + experiment
/// knobs, parsed from a flat key=value file with CLI overrides. Unknown
/// keys are a hard error.
struct RunConfig {
  ModelConfig model;
  OptimizerConfig optim;
  DatasetSpec data;
  std::uint64_t seed = 0;

  std::vector<int> sweep_values;
  std::vector<std::uint64_t> sweep_seeds = {1, 2};
  std::vector<int> measure_at;
  int probe_samples = 16;
  int probe_layer = 0;  // 0: last stream state
  bool probe_pooled = true;
  int early_step = 0;  // 0: 10% of the step budget
  int proxy_seeds = 8;
  int update_steps = 5;

  int dl_width = 1024;
  std::vector<int> dl_depths = {3, 8};
  double dl_eta = 0.1;
  int dl_trials = 8;

  std::vector<int> dump_layers;
  int histogram_bins = 0;

  bool operator==(const RunConfig&) const = default;
};

/// Parse a config file; `overrides` are extra key=value pairs applied on
/// top (CLI --set). Errors name the offending key or line.
RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig parse_config_file(const std::string& path, const std::vector<std::string>& overrides = {});

/// Emit every key in schema order; numeric values carry 17 significant
/// digits so parse(emit(c)) == c.
std::string emit_config(const RunConfig& config);

// --- file formats ---------------------------------------------------------

void write_kernel(std::ostream& os, const Kernel& kernel);
Kernel read_kernel(std::istream& is);

void save_checkpoint(const std::string& path, const RunConfig& config, const Params& params);
Params load_checkpoint(const std::string& path, const RunConfig& expected_config);

/// Sweep CSV columns, in order.
extern const char* kSweepCsvHeader;

std::string format_double(double v);  // %.17g

// --- experiments registry ---------------------------------------------------

std::vector<std::string> registered_experiments();
ExperimentResult run_registered_experiment(const std::string& name, const RunConfig& config);

/// Deep-linear response rows rendered into the common sweep-row format.
ExperimentResult deep_linear_rows(const RunConfig& config);

// --- entry point ------------------------------------------------------------

/// `tslab {train|sweep|probe|report} --config PATH [--set k=v]... [--out DIR]`.
/// Returns the process exit code; diagnostics go to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tslab
