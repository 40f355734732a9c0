#include "tslab/probes.hpp"

#include <algorithm>
#include <cmath>

namespace tslab {

namespace {

// Gathers one vector per kernel index from a trace.
struct VectorSet {
  std::vector<KernelIndex> index;
  std::vector<Tensor> vectors;
};

VectorSet collect_layer_states(const ActivationTrace& trace, int layer, bool pooled,
                               bool gradients) {
  const int depth = trace.config.depth;
  check(layer >= 1 && layer <= depth + 1, "kernel probe: layer out of range");
  if (gradients)
    check(trace.has_output_backward, "gradient_kernel: run_output_backward() first");
  VectorSet set;
  const double g_scale = trace.config.gamma0 * trace.config.model_dim();
  for (size_t b = 0; b < trace.samples.size(); ++b) {
    Var node = trace.samples[b].h[static_cast<size_t>(layer - 1)];
    Tensor state = gradients ? trace.tape->grad(node) : trace.tape->value(node);
    if (gradients)
      for (std::int64_t i = 0; i < state.size(); ++i) state[i] *= g_scale;
    if (pooled) {
      Tensor mean({1, state.cols()});
      for (int s = 0; s < state.rows(); ++s)
        for (int j = 0; j < state.cols(); ++j) mean.at(0, j) += state.at(s, j) / state.rows();
      set.index.push_back({static_cast<int>(b), -1, trace.step});
      set.vectors.push_back(std::move(mean));
    } else {
      for (int s = 0; s < state.rows(); ++s) {
        Tensor row({1, state.cols()});
        for (int j = 0; j < state.cols(); ++j) row.at(0, j) = state.at(s, j);
        set.index.push_back({static_cast<int>(b), s, trace.step});
        set.vectors.push_back(std::move(row));
      }
    }
  }
  return set;
}

Kernel gram(const VectorSet& set, int layer, double normalizer) {
  Kernel k;
  k.layer = layer;
  k.index = set.index;
  const int m = static_cast<int>(set.vectors.size());
  k.values = Tensor({m, m});
  for (int i = 0; i < m; ++i) {
    for (int j = i; j < m; ++j) {
      double dot = 0.0;
      const Tensor& a = set.vectors[static_cast<size_t>(i)];
      const Tensor& b = set.vectors[static_cast<size_t>(j)];
      for (std::int64_t t = 0; t < a.size(); ++t) dot += a[t] * b[t];
      k.values.at(i, j) = dot / normalizer;
      k.values.at(j, i) = k.values.at(i, j);
    }
  }
  return k;
}

}  // namespace

Kernel residual_kernel(const ActivationTrace& trace, int layer, bool pooled) {
  VectorSet set = collect_layer_states(trace, layer, pooled, false);
  return gram(set, layer, static_cast<double>(trace.config.model_dim()));
}

Kernel gradient_kernel(const ActivationTrace& trace, int layer) {
  VectorSet set = collect_layer_states(trace, layer, false, true);
  return gram(set, layer, static_cast<double>(trace.config.model_dim()));
}

HeadStats head_kernels(const ActivationTrace& trace, int layer, int head) {
  check(layer >= 1 && layer <= trace.config.depth, "head_kernels: layer out of range");
  check(head >= 0 && head < trace.config.n_heads, "head_kernels: head out of range");
  HeadStats stats;
  stats.layer = layer;
  stats.head = head;
  auto collect_field = [&](auto accessor) {
    VectorSet set;
    for (size_t b = 0; b < trace.samples.size(); ++b) {
      const Tensor& mat = trace.tape->value(accessor(trace.samples[b]));
      for (int s = 0; s < mat.rows(); ++s) {
        Tensor row({1, mat.cols()});
        for (int j = 0; j < mat.cols(); ++j) row.at(0, j) = mat.at(s, j);
        set.index.push_back({static_cast<int>(b), s, trace.step});
        set.vectors.push_back(std::move(row));
      }
    }
    return set;
  };
  const size_t li = static_cast<size_t>(layer - 1);
  const size_t hi = static_cast<size_t>(head);
  stats.v_kernel = gram(collect_field([&](const SampleTrace& s) { return s.v[li][hi]; }), layer,
                        static_cast<double>(trace.config.head_dim));
  stats.q_kernel = gram(collect_field([&](const SampleTrace& s) { return s.q[li][hi]; }), layer,
                        static_cast<double>(trace.config.head_dim));
  stats.k_kernel = gram(collect_field([&](const SampleTrace& s) { return s.k[li][hi]; }), layer,
                        static_cast<double>(trace.config.head_dim));
  for (const SampleTrace& s : trace.samples) stats.attn.push_back(trace.tape->value(s.attn[li][hi]));
  return stats;
}

Kernel head_avg_value_kernel(const ActivationTrace& trace, int layer) {
  check(layer >= 1 && layer <= trace.config.depth, "head_avg_value_kernel: layer out of range");
  const size_t li = static_cast<size_t>(layer - 1);
  const int heads = trace.config.n_heads;
  Kernel out;
  out.layer = layer;
  std::vector<std::vector<const Tensor*>> attended;  // [sample][head]
  for (const SampleTrace& s : trace.samples) {
    std::vector<const Tensor*> per_head;
    for (int h = 0; h < heads; ++h)
      per_head.push_back(&trace.tape->value(s.v_attn[li][static_cast<size_t>(h)]));
    attended.push_back(std::move(per_head));
  }
  const int seq = trace.config.seq_len;
  const int m = static_cast<int>(trace.samples.size()) * seq;
  out.values = Tensor({m, m});
  for (size_t b = 0; b < trace.samples.size(); ++b)
    for (int s = 0; s < seq; ++s) out.index.push_back({static_cast<int>(b), s, trace.step});
  const double norm = static_cast<double>(trace.config.model_dim());
  for (int i = 0; i < m; ++i) {
    const int bi = i / seq, si = i % seq;
    for (int j = i; j < m; ++j) {
      const int bj = j / seq, sj = j % seq;
      double dot = 0.0;
      for (int h = 0; h < heads; ++h) {
        const Tensor& a = *attended[static_cast<size_t>(bi)][static_cast<size_t>(h)];
        const Tensor& c = *attended[static_cast<size_t>(bj)][static_cast<size_t>(h)];
        for (int d = 0; d < trace.config.head_dim; ++d) dot += a.at(si, d) * c.at(sj, d);
      }
      out.values.at(i, j) = dot / norm;
      out.values.at(j, i) = out.values.at(i, j);
    }
  }
  return out;
}

double attn_head_variance(const ActivationTrace& trace, int layer, int s, int s_prime,
                          int sample) {
  const int heads = trace.config.n_heads;
  check(heads >= 2, "attn_head_variance: need at least two heads");
  check(layer >= 1 && layer <= trace.config.depth, "attn_head_variance: layer out of range");
  check(sample >= 0 && sample < static_cast<int>(trace.samples.size()),
        "attn_head_variance: sample out of range");
  const size_t li = static_cast<size_t>(layer - 1);
  std::vector<double> values(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h)
    values[static_cast<size_t>(h)] =
        trace.tape->value(trace.samples[static_cast<size_t>(sample)].attn[li][static_cast<size_t>(h)])
            .at(s, s_prime);
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= heads;
  double var = 0.0;  // two-pass form; stays exactly zero for tied heads
  for (double v : values) var += (v - mean) * (v - mean);
  return var / (heads - 1);
}

double mean_attn_head_variance(const ActivationTrace& trace) {
  const int seq = trace.config.seq_len;
  double total = 0.0;
  std::int64_t count = 0;
  for (int layer = 1; layer <= trace.config.depth; ++layer)
    for (size_t b = 0; b < trace.samples.size(); ++b)
      for (int s = 0; s < seq; ++s)
        for (int sp = 0; sp < seq; ++sp) {
          total += attn_head_variance(trace, layer, s, sp, static_cast<int>(b));
          ++count;
        }
  return total / static_cast<double>(count);
}

Histogram attn_histogram(const ActivationTrace& trace, int layer, int s, int s_prime, int sample,
                         int bins) {
  check(bins >= 1, "attn_histogram: need at least one bin");
  check(trace.config.n_heads >= bins, "attn_histogram: more bins than heads");
  const size_t li = static_cast<size_t>(layer - 1);
  std::vector<double> values;
  for (int h = 0; h < trace.config.n_heads; ++h)
    values.push_back(
        trace.tape->value(trace.samples[static_cast<size_t>(sample)].attn[li][static_cast<size_t>(h)])
            .at(s, s_prime));
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  double lo = *lo_it, hi = *hi_it;
  if (hi <= lo) hi = lo + 1.0;  // all heads identical: single occupied bin
  Histogram hist;
  hist.edges.resize(static_cast<size_t>(bins) + 1);
  hist.weight.assign(static_cast<size_t>(bins), 0.0);
  for (int i = 0; i <= bins; ++i)
    hist.edges[static_cast<size_t>(i)] = lo + (hi - lo) * i / bins;
  for (double v : values) {
    int bin = static_cast<int>((v - lo) / (hi - lo) * bins);
    bin = std::clamp(bin, 0, bins - 1);
    hist.weight[static_cast<size_t>(bin)] += 1.0 / values.size();
  }
  return hist;
}

namespace {

double block_frobenius_mean(const std::vector<LayerParams>& before,
                            const std::vector<LayerParams>& after, bool keys, int head_dim) {
  double total = 0.0;
  int blocks = 0;
  for (size_t l = 0; l < before.size(); ++l) {
    const Tensor& b = keys ? before[l].wk : before[l].wq;
    const Tensor& a = keys ? after[l].wk : after[l].wq;
    const int heads = b.rows() / head_dim;
    for (int h = 0; h < heads; ++h) {
      double sq = 0.0;
      for (int r = h * head_dim; r < (h + 1) * head_dim; ++r)
        for (int c = 0; c < b.cols(); ++c) {
          const double d = a.at(r, c) - b.at(r, c);
          sq += d * d;
        }
      total += std::sqrt(sq);
      ++blocks;
    }
  }
  return total / blocks;
}

}  // namespace

UpdateMeters update_meters(const Params& before, const Params& after,
                           const ActivationTrace& trace_before,
                           const ActivationTrace& trace_after) {
  check(before.layers.size() == after.layers.size(), "update_meters: depth mismatch");
  check(trace_before.samples.size() == trace_after.samples.size(),
        "update_meters: probe batch mismatch");
  const ModelConfig& cfg = trace_before.config;

  UpdateMeters meters;
  double k_sq = 0.0, a_sq = 0.0, h_sq = 0.0;
  std::int64_t k_n = 0, a_n = 0, h_n = 0;
  for (size_t b = 0; b < trace_before.samples.size(); ++b) {
    const SampleTrace& sb = trace_before.samples[b];
    const SampleTrace& sa = trace_after.samples[b];
    for (int l = 0; l < cfg.depth; ++l)
      for (int h = 0; h < cfg.n_heads; ++h) {
        const Tensor& kb = trace_before.tape->value(sb.k[static_cast<size_t>(l)][static_cast<size_t>(h)]);
        const Tensor& ka = trace_after.tape->value(sa.k[static_cast<size_t>(l)][static_cast<size_t>(h)]);
        for (std::int64_t i = 0; i < kb.size(); ++i) {
          const double d = ka[i] - kb[i];
          k_sq += d * d;
          ++k_n;
        }
        const Tensor& ab = trace_before.tape->value(sb.attn[static_cast<size_t>(l)][static_cast<size_t>(h)]);
        const Tensor& aa = trace_after.tape->value(sa.attn[static_cast<size_t>(l)][static_cast<size_t>(h)]);
        for (std::int64_t i = 0; i < ab.size(); ++i) {
          const double d = aa[i] - ab[i];
          a_sq += d * d;
          ++a_n;
        }
      }
    const Tensor& hb = trace_before.tape->value(sb.h.back());
    const Tensor& ha = trace_after.tape->value(sa.h.back());
    for (std::int64_t i = 0; i < hb.size(); ++i) {
      const double d = ha[i] - hb[i];
      h_sq += d * d;
      ++h_n;
    }
  }
  meters.k_entry_rms = std::sqrt(k_sq / k_n);
  meters.attn_entry_rms = std::sqrt(a_sq / a_n);
  meters.h_last_rms = std::sqrt(h_sq / h_n);
  meters.wk_frobenius = block_frobenius_mean(before.layers, after.layers, true, cfg.head_dim);
  meters.wq_frobenius = block_frobenius_mean(before.layers, after.layers, false, cfg.head_dim);
  return meters;
}

double kernel_distance(const Kernel& a, const Kernel& b) {
  check(a.index == b.index && a.layer == b.layer, "kernel_distance: index sets differ");
  double sq = 0.0;
  for (std::int64_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    sq += d * d;
  }
  return sq / static_cast<double>(a.values.size());
}

double max_backward_signal(const ActivationTrace& trace) {
  check(trace.has_output_backward, "max_backward_signal: run_output_backward() first");
  const double g_scale = trace.config.gamma0 * trace.config.model_dim();
  double mx = 0.0;
  for (const SampleTrace& s : trace.samples)
    for (Var h : s.h) {
      const Tensor g = trace.tape->grad(h);
      for (std::int64_t i = 0; i < g.size(); ++i) mx = std::max(mx, std::abs(g_scale * g[i]));
    }
  return mx;
}

}  // namespace tslab
