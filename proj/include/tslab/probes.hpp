#pragma once

#include <vector>

#include "tslab/model.hpp"

namespace tslab {

/// Index of one kernel row/column: a (sample, position, time) triple.
/// position = -1 marks position-pooled entries.
struct KernelIndex {
  int sample = 0;
  int position = 0;
  int step = 0;
  bool operator==(const KernelIndex&) const = default;
};

/// Symmetric Gram matrix over an explicit index set at one layer.
struct Kernel {
  int layer = 0;
  std::vector<KernelIndex> index;
  Tensor values;  // m x m

  int size() const { return static_cast<int>(index.size()); }
};

/// (1/(N*H)) h.h Gram of residual-stream states. layer runs from 1
/// (post read-in) to depth+1 (after the last block). The pooled variant
/// averages each sample's state over positions first.
Kernel residual_kernel(const ActivationTrace& trace, int layer, bool pooled);

/// (1/(N*H)) g.g with g = gamma0*N*H * df/dh^layer. Requires
/// run_output_backward() on the trace.
Kernel gradient_kernel(const ActivationTrace& trace, int layer);

/// Per-head kernels at one layer: 1/N Grams of values/queries/keys over
/// (sample, position), plus the raw pre-attention matrices per sample.
struct HeadStats {
  int layer = 0;
  int head = 0;
  Kernel v_kernel, q_kernel, k_kernel;
  std::vector<Tensor> attn;  // per sample, seq x seq, [s,s'] = k_s.q_s'/N^alpha
};
HeadStats head_kernels(const ActivationTrace& trace, int layer, int head);

/// Head-averaged Gram of attended values, (1/(N*H)) sum_h vsig.vsig.
Kernel head_avg_value_kernel(const ActivationTrace& trace, int layer);

/// Unbiased variance over heads of A[layer][s,s'] for one sample.
double attn_head_variance(const ActivationTrace& trace, int layer, int s, int s_prime, int sample);

/// Head variance averaged over all (s,s') pairs, samples and layers of a
/// probe trace (the figure fixes an unspecified slice; this pins one).
double mean_attn_head_variance(const ActivationTrace& trace);

struct Histogram {
  std::vector<double> edges;   // bins+1 edges
  std::vector<double> weight;  // normalized to sum 1
};
Histogram attn_histogram(const ActivationTrace& trace, int layer, int s, int s_prime, int sample,
                         int bins);

struct UpdateMeters {
  double k_entry_rms = 0.0;     // RMS over all layers/heads/positions of delta k entries
  double attn_entry_rms = 0.0;  // same for pre-attention entries
  double wk_frobenius = 0.0;    // mean over (layer, head) blocks of ||delta W_K||_F
  double wq_frobenius = 0.0;
  double h_last_rms = 0.0;      // RMS of the final residual-state change
};

/// Scalar meters between two parameter states, evaluated on traces of the
/// same probe batch taken before/after.
UpdateMeters update_meters(const Params& before, const Params& after,
                           const ActivationTrace& trace_before, const ActivationTrace& trace_after);

/// Mean squared entrywise difference. Index sets must match.
double kernel_distance(const Kernel& a, const Kernel& b);

/// Largest |g| entry over all residual layers of the trace, with
/// g = gamma0*N*H * df/dh. Requires run_output_backward().
double max_backward_signal(const ActivationTrace& trace);

}  // namespace tslab
