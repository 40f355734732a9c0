#include "tslab/model.hpp"

#include <cmath>

#include "tslab/rng.hpp"

namespace tslab {

std::string to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::pooled_classifier: return "pooled_classifier";
    case TaskMode::causal_lm: return "causal_lm";
    case TaskMode::deep_linear: return "deep_linear";
  }
  return "?";
}

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "pooled_classifier") return TaskMode::pooled_classifier;
  if (s == "causal_lm") return TaskMode::causal_lm;
  if (s == "deep_linear") return TaskMode::deep_linear;
  fail("unknown task mode '" + s + "'");
}

std::string to_string(LossKind kind) {
  return kind == LossKind::mse ? "mse" : "cross_entropy";
}

void ModelConfig::validate() const {
  check(head_dim >= 1 && n_heads >= 1 && depth >= 1 && seq_len >= 1 && input_dim >= 1 &&
            output_dim >= 1,
        "model config: all sizes must be >= 1");
  check(alpha_attn >= 0.5 && alpha_attn <= 1.0, "model config: alpha_attn outside [1/2, 1]");
  check(alpha_depth >= 0.5 && alpha_depth <= 1.0, "model config: alpha_depth outside [1/2, 1]");
  check(beta0 > 0.0, "model config: beta0 must be positive");
  check(gamma0 > 0.0, "model config: gamma0 must be positive");
  check(eps_ln > 0.0, "model config: eps_ln must be positive");
  check(adam_scale == 0 || adam_scale == 1, "model config: adam_scale must be 0 or 1");
}

RescaleFactors rescale_factors(const ModelConfig& config) {
  const double a = static_cast<double>(config.adam_scale);
  const double depth_part = std::pow(config.depth / config.beta0, -0.5 * (1.0 - a));
  const double width_part = std::pow(static_cast<double>(config.model_dim()), 0.5 * a);
  RescaleFactors r;
  r.read_in = depth_part * width_part;
  r.read_out = depth_part * width_part;
  return r;
}

std::int64_t Params::count() const {
  std::int64_t n = w0.size() + pos.size() + wl.size();
  for (const LayerParams& l : layers)
    n += l.wk.size() + l.wq.size() + l.wv.size() + l.wo.size() + l.w1.size() + l.w2.size();
  return n;
}

Params init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int m = config.model_dim();
  const int hn = config.n_heads * config.head_dim;
  const RescaleFactors rs = rescale_factors(config);
  const double kq_std = std::pow(static_cast<double>(config.head_dim), 1.0 - config.alpha_attn);

  Params p;
  p.w0 = rng.normal_tensor({m, config.input_dim}, 1.0 / rs.read_in);
  p.pos = rng.normal_tensor({config.seq_len, m}, 1.0 / rs.read_in);
  p.layers.resize(static_cast<size_t>(config.depth));
  for (LayerParams& l : p.layers) {
    l.wk = rng.normal_tensor({hn, m}, kq_std);
    l.wq = rng.normal_tensor({hn, m}, kq_std);
    l.wv = rng.normal_tensor({hn, m}, 1.0);
    l.wo = rng.normal_tensor({m, hn}, 1.0);
    l.w1 = rng.normal_tensor({m, m}, 1.0);
    l.w2 = rng.normal_tensor({m, m}, 1.0);
  }
  p.wl = rng.normal_tensor({m, config.output_dim}, 1.0 / rs.read_out);
  return p;
}

std::string to_string(ParamGroupId id) {
  switch (id) {
    case ParamGroupId::read_in: return "read_in";
    case ParamGroupId::positional: return "positional";
    case ParamGroupId::bulk: return "bulk";
    case ParamGroupId::read_out: return "read_out";
  }
  return "?";
}

std::vector<ParamView> param_views(Params& params) {
  std::vector<ParamView> views;
  views.push_back({"w0", &params.w0, ParamGroupId::read_in});
  views.push_back({"pos", &params.pos, ParamGroupId::positional});
  for (size_t l = 0; l < params.layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    LayerParams& lp = params.layers[l];
    views.push_back({prefix + "wk", &lp.wk, ParamGroupId::bulk});
    views.push_back({prefix + "wq", &lp.wq, ParamGroupId::bulk});
    views.push_back({prefix + "wv", &lp.wv, ParamGroupId::bulk});
    views.push_back({prefix + "wo", &lp.wo, ParamGroupId::bulk});
    views.push_back({prefix + "w1", &lp.w1, ParamGroupId::bulk});
    views.push_back({prefix + "w2", &lp.w2, ParamGroupId::bulk});
  }
  views.push_back({"wl", &params.wl, ParamGroupId::read_out});
  return views;
}

std::vector<ParamView> param_views(const Params& params) {
  return param_views(const_cast<Params&>(params));
}

double attention_logits(const Tensor& k, const Tensor& q, int head_dim, double alpha_attn) {
  check(k.size() == q.size(), "attention_logits: dimension mismatch");
  check(k.size() == head_dim, "attention_logits: vectors must have head_dim entries");
  double dot = 0.0;
  for (std::int64_t i = 0; i < k.size(); ++i) dot += k[i] * q[i];
  return dot / std::pow(static_cast<double>(head_dim), alpha_attn);
}

namespace {

struct ParamLeaves {
  Var w0, pos, wl;
  struct Layer {
    Var wk, wq, wv, wo, w1, w2;
  };
  std::vector<Layer> layers;
};

ParamLeaves register_params(Tape& tape, const Params& params) {
  ParamLeaves leaves;
  leaves.w0 = tape.param(params.w0);
  leaves.pos = tape.param(params.pos);
  for (const LayerParams& l : params.layers) {
    ParamLeaves::Layer lay;
    lay.wk = tape.param(l.wk);
    lay.wq = tape.param(l.wq);
    lay.wv = tape.param(l.wv);
    lay.wo = tape.param(l.wo);
    lay.w1 = tape.param(l.w1);
    lay.w2 = tape.param(l.w2);
    leaves.layers.push_back(lay);
  }
  leaves.wl = tape.param(params.wl);
  return leaves;
}

SampleTrace forward_sample(Tape& tape, const ParamLeaves& leaves, const ModelConfig& cfg,
                           const Sample& sample, Var w0_transposed) {
  const int m = cfg.model_dim();
  const int n = cfg.head_dim;
  const int heads = cfg.n_heads;
  const bool causal = cfg.mode == TaskMode::causal_lm;
  const RescaleFactors rs = rescale_factors(cfg);
  const double read_in_scale = rs.read_in / std::sqrt(static_cast<double>(cfg.input_dim));
  const double branch = cfg.beta0 / std::pow(static_cast<double>(cfg.depth), cfg.alpha_depth);
  const double kq_scale =
      1.0 / (std::pow(static_cast<double>(n), 1.5 - cfg.alpha_attn) * std::sqrt(double(heads)));
  const double v_scale = 1.0 / std::sqrt(static_cast<double>(m));
  const double attn_scale = 1.0 / std::pow(static_cast<double>(n), cfg.alpha_attn);

  SampleTrace tr;
  Var h;
  if (causal) {
    check(static_cast<int>(sample.tokens.size()) == cfg.seq_len,
          "forward: token count differs from seq_len");
    h = tape.embed_rows(w0_transposed, sample.tokens, read_in_scale);
  } else {
    check(sample.input.rows() == cfg.seq_len && sample.input.cols() == cfg.input_dim,
          "forward: input shape differs from (seq_len, input_dim)");
    Var x = tape.input(sample.input);
    h = tape.scale(tape.matmul_nt(x, leaves.w0), read_in_scale);
  }
  h = tape.add_scaled(h, leaves.pos, rs.read_in);
  tr.h.push_back(h);

  tr.k.resize(static_cast<size_t>(cfg.depth));
  tr.q.resize(static_cast<size_t>(cfg.depth));
  tr.v.resize(static_cast<size_t>(cfg.depth));
  tr.attn.resize(static_cast<size_t>(cfg.depth));
  tr.attn_w.resize(static_cast<size_t>(cfg.depth));
  tr.v_attn.resize(static_cast<size_t>(cfg.depth));

  for (int l = 0; l < cfg.depth; ++l) {
    const ParamLeaves::Layer& lay = leaves.layers[static_cast<size_t>(l)];
    Var h_ln = tape.layernorm_rows(h, cfg.eps_ln);
    tr.h_ln.push_back(h_ln);
    Var k_all = tape.scale(tape.matmul_nt(h_ln, lay.wk), kq_scale);
    Var q_all = tape.scale(tape.matmul_nt(h_ln, lay.wq), kq_scale);
    Var v_all = tape.scale(tape.matmul_nt(h_ln, lay.wv), v_scale);
    std::vector<Var> attended;
    attended.reserve(static_cast<size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      Var kh = tape.slice_cols(k_all, hd * n, n);
      Var qh = tape.slice_cols(q_all, hd * n, n);
      Var vh = tape.slice_cols(v_all, hd * n, n);
      // A[s,s'] = k_s . q_s' / N^alpha; softmax rows run over key positions,
      // so the weight matrix is built from A^T (rows = query position).
      Var ah = tape.scale(tape.matmul_nt(kh, qh), attn_scale);
      Var sh = tape.softmax_rows(tape.transpose(ah), causal);
      Var vs = tape.matmul(sh, vh);
      tr.k[static_cast<size_t>(l)].push_back(kh);
      tr.q[static_cast<size_t>(l)].push_back(qh);
      tr.v[static_cast<size_t>(l)].push_back(vh);
      tr.attn[static_cast<size_t>(l)].push_back(ah);
      tr.attn_w[static_cast<size_t>(l)].push_back(sh);
      tr.v_attn[static_cast<size_t>(l)].push_back(vs);
      attended.push_back(vs);
    }
    Var mhsa = tape.scale(tape.matmul_nt(tape.concat_cols(attended), lay.wo), v_scale);
    Var h_mid = tape.add_scaled(h, mhsa, branch);
    tr.h_mid.push_back(h_mid);
    Var mid_ln = tape.layernorm_rows(h_mid, cfg.eps_ln);
    tr.h_mid_ln.push_back(mid_ln);
    Var m1 = tape.scale(tape.matmul_nt(mid_ln, lay.w1), v_scale);
    tr.mlp_hidden.push_back(m1);
    Var m2 = tape.scale(tape.matmul_nt(tape.gelu(m1), lay.w2), v_scale);
    h = tape.add_scaled(h_mid, m2, branch);
    if (!tape.value(h).all_finite())
      fail("forward: non-finite activation in residual block " + std::to_string(l + 1));
    tr.h.push_back(h);
  }

  tr.final_ln = tape.layernorm_rows(h, cfg.eps_ln);
  const double out_scale = rs.read_out / (cfg.gamma0 * m);
  if (cfg.mode == TaskMode::pooled_classifier) {
    Var pooled = tape.mean_rows(tr.final_ln);
    tr.logits = tape.scale(tape.matmul(pooled, leaves.wl), out_scale);
  } else {
    tr.logits = tape.scale(tape.matmul(tr.final_ln, leaves.wl), out_scale);
  }
  if (!tape.value(tr.logits).all_finite()) fail("forward: non-finite logits");
  return tr;
}

}  // namespace

void ActivationTrace::run_output_backward(int component) {
  check(tape != nullptr, "run_output_backward: empty trace");
  Var total{};
  for (const SampleTrace& s : samples) {
    Var comp = tape->sum(tape->slice_cols(s.logits, component, 1));
    total = total.valid() ? tape->add(total, comp) : comp;
  }
  tape->backward(total);
  has_output_backward = true;
}

ForwardResult forward(const Params& params, const ModelConfig& config,
                      const std::vector<const Sample*>& batch, int step_tag) {
  config.validate();
  check(!batch.empty(), "forward: empty batch");
  check(config.mode != TaskMode::deep_linear, "forward: use forward_deep_linear for that mode");

  ActivationTrace trace;
  trace.tape = std::make_shared<Tape>();
  trace.config = config;
  trace.step = step_tag;
  Tape& tape = *trace.tape;

  ParamLeaves leaves = register_params(tape, params);
  Var w0t{};
  if (config.mode == TaskMode::causal_lm) w0t = tape.transpose(leaves.w0);

  for (const Sample* s : batch)
    trace.samples.push_back(forward_sample(tape, leaves, config, *s, w0t));

  const int rows_per_sample = config.mode == TaskMode::causal_lm ? config.seq_len : 1;
  Tensor logits({static_cast<int>(batch.size()) * rows_per_sample, config.output_dim});
  int r = 0;
  for (const SampleTrace& s : trace.samples) {
    const Tensor& ls = tape.value(s.logits);
    for (int i = 0; i < ls.rows(); ++i, ++r)
      for (int j = 0; j < ls.cols(); ++j) logits.at(r, j) = ls.at(i, j);
  }
  return ForwardResult{std::move(logits), std::move(trace)};
}

LossResult loss_and_grads(const Params& params, const ModelConfig& config,
                          const std::vector<const Sample*>& batch, LossKind loss_kind,
                          int step_tag) {
  ForwardResult fwd = forward(params, config, batch, step_tag);
  ActivationTrace& trace = fwd.trace;
  Tape& tape = *trace.tape;
  const int b = static_cast<int>(batch.size());

  std::vector<Tensor> deltas;
  Var total{};
  for (int i = 0; i < b; ++i) {
    const SampleTrace& st = trace.samples[static_cast<size_t>(i)];
    Var sample_loss{};
    if (loss_kind == LossKind::mse) {
      check(config.mode == TaskMode::pooled_classifier, "mse loss requires pooled mode");
      Tensor target({1, config.output_dim});
      check(batch[static_cast<size_t>(i)]->target.size() == config.output_dim,
            "loss: target size differs from output_dim");
      for (int j = 0; j < config.output_dim; ++j)
        target.at(0, j) = batch[static_cast<size_t>(i)]->target[j];
      sample_loss = tape.mse_loss(st.logits, target);
      const Tensor& f = tape.value(st.logits);
      Tensor d({1, config.output_dim});
      for (int j = 0; j < config.output_dim; ++j) d.at(0, j) = target.at(0, j) - f.at(0, j);
      deltas.push_back(std::move(d));
    } else if (config.mode == TaskMode::pooled_classifier) {
      const int label = batch[static_cast<size_t>(i)]->label;
      sample_loss = tape.cross_entropy(st.logits, {label});
      const Tensor& f = tape.value(st.logits);
      Tensor d({1, config.output_dim});
      double mx = f.at(0, 0);
      for (int j = 1; j < config.output_dim; ++j) mx = std::max(mx, f.at(0, j));
      double z = 0.0;
      for (int j = 0; j < config.output_dim; ++j) z += std::exp(f.at(0, j) - mx);
      for (int j = 0; j < config.output_dim; ++j)
        d.at(0, j) = (j == label ? 1.0 : 0.0) - std::exp(f.at(0, j) - mx) / z;
      deltas.push_back(std::move(d));
    } else {
      // causal LM: next-token prediction over the first seq_len-1 positions
      const std::vector<int>& targets = batch[static_cast<size_t>(i)]->target_tokens;
      check(static_cast<int>(targets.size()) == config.seq_len - 1,
            "loss: causal mode needs seq_len-1 target tokens");
      Var scored = tape.slice_rows(st.logits, 0, config.seq_len - 1);
      sample_loss = tape.cross_entropy(scored, targets);
      const Tensor& f = tape.value(scored);
      Tensor d({config.seq_len - 1, config.output_dim});
      for (int s = 0; s < config.seq_len - 1; ++s) {
        double mx = f.at(s, 0);
        for (int j = 1; j < config.output_dim; ++j) mx = std::max(mx, f.at(s, j));
        double z = 0.0;
        for (int j = 0; j < config.output_dim; ++j) z += std::exp(f.at(s, j) - mx);
        for (int j = 0; j < config.output_dim; ++j)
          d.at(s, j) = (j == targets[static_cast<size_t>(s)] ? 1.0 : 0.0) -
                       std::exp(f.at(s, j) - mx) / z;
      }
      deltas.push_back(std::move(d));
    }
    total = total.valid() ? tape.add(total, sample_loss) : sample_loss;
  }
  Var mean_loss = tape.scale(total, 1.0 / b);
  tape.backward(mean_loss);

  LossResult out;
  out.loss = tape.value(mean_loss)[0];
  trace.loss = mean_loss;
  int delta_rows = 0;
  for (const Tensor& d : deltas) delta_rows += d.rows();
  trace.delta = Tensor({delta_rows, config.output_dim});
  int r = 0;
  for (const Tensor& d : deltas)
    for (int i = 0; i < d.rows(); ++i, ++r)
      for (int j = 0; j < d.cols(); ++j) trace.delta.at(r, j) = d.at(i, j);

  // Gradients in param_views order; leaves were registered first and in
  // the same order, so their ids are 0..n_tensors-1.
  const size_t n_tensors = param_views(params).size();
  for (size_t i = 0; i < n_tensors; ++i)
    out.grads.tensors.push_back(tape.grad(Var{static_cast<int>(i)}));
  out.trace = std::move(trace);
  return out;
}

DeepLinearParams init_deep_linear(int width, int input_dim, int depth, std::uint64_t seed) {
  check(width >= 1 && input_dim >= 1 && depth >= 0, "deep linear: bad sizes");
  Rng rng(seed);
  DeepLinearParams p;
  p.w_in = rng.normal_tensor({width, input_dim}, 1.0);
  for (int l = 0; l + 1 < depth; ++l) p.ws.push_back(rng.normal_tensor({width, width}, 1.0));
  p.w_out = rng.normal_tensor({1, width}, 1.0);
  return p;
}

namespace {

Tensor normalized_input(const Tensor& x) {
  const double norm = std::sqrt(x.squared_norm());
  check(norm > 0.0, "deep linear: zero input");
  Tensor out({static_cast<int>(x.size()), 1});
  for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] / norm;
  return out;
}

struct DeepLinearGraph {
  Tape tape;
  std::vector<Var> h;
  Var f;
  Var w_in, w_out;
  std::vector<Var> ws;
};

void build_deep_linear(DeepLinearGraph& g, const DeepLinearParams& params, int depth,
                       double gamma0, const Tensor& x_col) {
  const int width = params.w_in.rows();
  g.w_in = g.tape.param(params.w_in);
  for (const Tensor& w : params.ws) g.ws.push_back(g.tape.param(w));
  g.w_out = g.tape.param(params.w_out);
  Var x = g.tape.constant(x_col);
  Var h = g.tape.matmul(g.w_in, x);
  g.h.push_back(h);
  const double inv_sqrt_width = 1.0 / std::sqrt(static_cast<double>(width));
  for (int l = 0; l + 1 < depth; ++l) {
    h = g.tape.scale(g.tape.matmul(g.ws[static_cast<size_t>(l)], h), inv_sqrt_width);
    g.h.push_back(h);
  }
  g.f = g.tape.scale(g.tape.matmul(g.w_out, h), 1.0 / (gamma0 * width));
}

}  // namespace

DeepLinearForward forward_deep_linear(const DeepLinearParams& params, int depth, double gamma0,
                                      const Tensor& x) {
  check(gamma0 > 0.0, "deep linear: gamma0 must be positive");
  DeepLinearGraph g;
  build_deep_linear(g, params, depth, gamma0, normalized_input(x));
  DeepLinearForward out;
  out.output = g.tape.value(g.f)[0];
  for (Var h : g.h) out.h.push_back(g.tape.value(h));
  return out;
}

void deep_linear_step(DeepLinearParams& params, int depth, double gamma0, double eta,
                      const Tensor& x, double y) {
  DeepLinearGraph g;
  build_deep_linear(g, params, depth, gamma0, normalized_input(x));
  Var loss = g.tape.mse_loss(g.f, Tensor::from_values({1, 1}, {y}));
  g.tape.backward(loss);
  const double lr = eta * gamma0 * gamma0 * params.w_in.rows();
  auto apply = [&](Tensor& w, Var leaf) {
    const Tensor grad = g.tape.grad(leaf);
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] -= lr * grad[i];
  };
  apply(params.w_in, g.w_in);
  for (size_t l = 0; l < params.ws.size(); ++l) apply(params.ws[l], g.ws[l]);
  apply(params.w_out, g.w_out);
}

}  // namespace tslab
