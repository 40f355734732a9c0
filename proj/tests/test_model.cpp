#include "doctest.h"

#include <cmath>
#include <vector>

#include "tslab/model.hpp"
#include "tslab/rng.hpp"

using namespace tslab;

namespace {

// Straight-line reference evaluation of the scaled-transformer equations:
// plain nested loops, no tape, no Eigen. Used as the independent oracle
// for forward().
std::vector<double> reference_forward(const Params& p, const ModelConfig& cfg,
                                      const Sample& sample) {
  const int m = cfg.model_dim(), n = cfg.head_dim, heads = cfg.n_heads;
  const int seq = cfg.seq_len, din = cfg.input_dim, dout = cfg.output_dim;
  const bool causal = cfg.mode == TaskMode::causal_lm;
  const double a = cfg.adam_scale;
  const double r_in = std::pow(cfg.depth / cfg.beta0, -0.5 * (1 - a)) * std::pow(m, 0.5 * a);
  const double r_out = r_in;
  const double branch = cfg.beta0 / std::pow(static_cast<double>(cfg.depth), cfg.alpha_depth);
  const double ck = 1.0 / (std::pow(n, 1.5 - cfg.alpha_attn) * std::sqrt(double(heads)));
  const double cv = 1.0 / std::sqrt(double(m));

  auto layernorm = [&](const std::vector<std::vector<double>>& rows) {
    std::vector<std::vector<double>> out(rows.size(), std::vector<double>(m));
    for (size_t s = 0; s < rows.size(); ++s) {
      double mean = 0, var = 0;
      for (double v : rows[s]) mean += v;
      mean /= m;
      for (double v : rows[s]) var += (v - mean) * (v - mean);
      var /= m;
      for (int i = 0; i < m; ++i) out[s][i] = (rows[s][i] - mean) / std::sqrt(var + cfg.eps_ln);
    }
    return out;
  };
  auto gelu = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };

  std::vector<std::vector<double>> h(seq, std::vector<double>(m, 0.0));
  for (int s = 0; s < seq; ++s)
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      if (causal) {
        acc = p.w0.at(i, sample.tokens[static_cast<size_t>(s)]);
      } else {
        for (int d = 0; d < din; ++d) acc += p.w0.at(i, d) * sample.input.at(s, d);
      }
      h[static_cast<size_t>(s)][static_cast<size_t>(i)] =
          r_in / std::sqrt(double(din)) * acc + r_in * p.pos.at(s, i);
    }

  for (int l = 0; l < cfg.depth; ++l) {
    const LayerParams& lp = p.layers[static_cast<size_t>(l)];
    auto hb = layernorm(h);
    // keys/queries/values per head
    std::vector<std::vector<std::vector<double>>> k(heads), q(heads), v(heads);
    for (int hd = 0; hd < heads; ++hd) {
      k[hd].assign(seq, std::vector<double>(n, 0.0));
      q[hd].assign(seq, std::vector<double>(n, 0.0));
      v[hd].assign(seq, std::vector<double>(n, 0.0));
      for (int s = 0; s < seq; ++s)
        for (int d = 0; d < n; ++d) {
          double ak = 0, aq = 0, av = 0;
          for (int i = 0; i < m; ++i) {
            ak += lp.wk.at(hd * n + d, i) * hb[s][i];
            aq += lp.wq.at(hd * n + d, i) * hb[s][i];
            av += lp.wv.at(hd * n + d, i) * hb[s][i];
          }
          k[hd][s][d] = ck * ak;
          q[hd][s][d] = ck * aq;
          v[hd][s][d] = cv * av;
        }
    }
    // attention weights: query row s over key positions s'
    std::vector<std::vector<double>> mhsa(seq, std::vector<double>(m, 0.0));
    for (int hd = 0; hd < heads; ++hd) {
      std::vector<std::vector<double>> w(seq, std::vector<double>(seq, 0.0));
      for (int s = 0; s < seq; ++s) {
        const int support = causal ? s + 1 : seq;
        double mx = -1e300;
        std::vector<double> logits(seq, 0.0);
        for (int sp = 0; sp < support; ++sp) {
          double dot = 0;
          for (int d = 0; d < n; ++d) dot += q[hd][s][d] * k[hd][sp][d];
          logits[sp] = dot / std::pow(double(n), cfg.alpha_attn);
          mx = std::max(mx, logits[sp]);
        }
        double z = 0;
        for (int sp = 0; sp < support; ++sp) z += std::exp(logits[sp] - mx);
        for (int sp = 0; sp < support; ++sp) w[s][sp] = std::exp(logits[sp] - mx) / z;
      }
      for (int s = 0; s < seq; ++s) {
        std::vector<double> attended(n, 0.0);
        for (int d = 0; d < n; ++d)
          for (int sp = 0; sp < seq; ++sp) attended[d] += w[s][sp] * v[hd][sp][d];
        for (int i = 0; i < m; ++i) {
          double acc = 0;
          for (int d = 0; d < n; ++d) acc += lp.wo.at(i, hd * n + d) * attended[d];
          mhsa[s][i] += cv * acc;
        }
      }
    }
    std::vector<std::vector<double>> hmid(seq, std::vector<double>(m));
    for (int s = 0; s < seq; ++s)
      for (int i = 0; i < m; ++i) hmid[s][i] = h[s][i] + branch * mhsa[s][i];
    auto hmb = layernorm(hmid);
    for (int s = 0; s < seq; ++s) {
      std::vector<double> hidden(m, 0.0);
      for (int j = 0; j < m; ++j) {
        double acc = 0;
        for (int i = 0; i < m; ++i) acc += lp.w1.at(j, i) * hmb[s][i];
        hidden[j] = gelu(cv * acc);
      }
      for (int i = 0; i < m; ++i) {
        double acc = 0;
        for (int j = 0; j < m; ++j) acc += lp.w2.at(i, j) * hidden[j];
        h[s][i] = hmid[s][i] + branch * cv * acc;
      }
    }
  }

  auto fb = layernorm(h);
  const double out_scale = r_out / (cfg.gamma0 * m);
  std::vector<double> logits;
  if (cfg.mode == TaskMode::pooled_classifier) {
    std::vector<double> pooled(m, 0.0);
    for (int s = 0; s < seq; ++s)
      for (int i = 0; i < m; ++i) pooled[i] += fb[s][i] / seq;
    for (int o = 0; o < dout; ++o) {
      double acc = 0;
      for (int i = 0; i < m; ++i) acc += pooled[i] * p.wl.at(i, o);
      logits.push_back(out_scale * acc);
    }
  } else {
    for (int s = 0; s < seq; ++s)
      for (int o = 0; o < dout; ++o) {
        double acc = 0;
        for (int i = 0; i < m; ++i) acc += fb[s][i] * p.wl.at(i, o);
        logits.push_back(out_scale * acc);
      }
  }
  return logits;
}

Sample random_pooled_sample(Rng& rng, const ModelConfig& cfg) {
  Sample s;
  s.input = rng.normal_tensor({cfg.seq_len, cfg.input_dim}, 1.0);
  s.target = rng.normal_tensor({cfg.output_dim}, 1.0);
  return s;
}

double sample_std(const Tensor& t) {
  double mean = 0;
  for (std::int64_t i = 0; i < t.size(); ++i) mean += t[i];
  mean /= static_cast<double>(t.size());
  double var = 0;
  for (std::int64_t i = 0; i < t.size(); ++i) var += (t[i] - mean) * (t[i] - mean);
  return std::sqrt(var / static_cast<double>(t.size() - 1));
}

}  // namespace

TEST_CASE("forward matches the straight-line reference evaluation") {
  for (double alpha : {1.0, 0.5}) {
    ModelConfig cfg;
    cfg.head_dim = 2;
    cfg.n_heads = 2;
    cfg.depth = 2;
    cfg.seq_len = 3;
    cfg.input_dim = 3;
    cfg.output_dim = 2;
    cfg.alpha_attn = alpha;
    cfg.alpha_depth = 0.5;
    cfg.beta0 = 2.0;
    cfg.gamma0 = 0.7;
    Params params = init_params(cfg, 99);
    Rng rng(55);
    Sample sample = random_pooled_sample(rng, cfg);
    ForwardResult fw = forward(params, cfg, {&sample});
    std::vector<double> want = reference_forward(params, cfg, sample);
    REQUIRE(fw.logits.size() == static_cast<std::int64_t>(want.size()));
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(fw.logits[static_cast<std::int64_t>(i)] ==
            doctest::Approx(want[i]).epsilon(1e-11));
  }
}

TEST_CASE("causal forward matches the reference evaluation") {
  ModelConfig cfg;
  cfg.mode = TaskMode::causal_lm;
  cfg.head_dim = 2;
  cfg.n_heads = 2;
  cfg.depth = 2;
  cfg.seq_len = 4;
  cfg.input_dim = 5;  // vocabulary
  cfg.output_dim = 5;
  cfg.alpha_attn = 1.0;
  Params params = init_params(cfg, 123);
  Sample sample;
  sample.tokens = {1, 4, 0, 2};
  sample.target_tokens = {4, 0, 2};
  ForwardResult fw = forward(params, cfg, {&sample});
  std::vector<double> want = reference_forward(params, cfg, sample);
  REQUIRE(fw.logits.size() == static_cast<std::int64_t>(want.size()));
  for (size_t i = 0; i < want.size(); ++i)
    CHECK(fw.logits[static_cast<std::int64_t>(i)] == doctest::Approx(want[i]).epsilon(1e-11));
}

TEST_CASE("degenerate single-dim model evaluates to the hand value") {
  // With model_dim = 1 every fixed layernorm output is exactly zero, so
  // the logits are exactly zero; the reference evaluator agrees.
  ModelConfig cfg;
  cfg.head_dim = 1;
  cfg.n_heads = 1;
  cfg.depth = 1;
  cfg.seq_len = 2;
  cfg.input_dim = 1;
  cfg.output_dim = 1;
  Params params = init_params(cfg, 1);
  for (ParamView& v : param_views(params))
    for (std::int64_t i = 0; i < v.tensor->size(); ++i) (*v.tensor)[i] = 1.0;
  Sample sample;
  sample.input = Tensor::full({2, 1}, 1.0);
  sample.target = Tensor::full({1}, 0.0);
  ForwardResult fw = forward(params, cfg, {&sample});
  CHECK(fw.logits[0] == 0.0);
  std::vector<double> want = reference_forward(params, cfg, sample);
  CHECK(want[0] == 0.0);
}

TEST_CASE("init_params is deterministic and uses the documented stds") {
  ModelConfig cfg;
  cfg.head_dim = 8;
  cfg.n_heads = 8;
  cfg.depth = 2;
  cfg.alpha_attn = 1.0;
  Params a = init_params(cfg, 42);
  Params b = init_params(cfg, 42);
  std::vector<ParamView> va = param_views(a), vb = param_views(b);
  for (size_t i = 0; i < va.size(); ++i) {
    REQUIRE(va[i].tensor->size() == vb[i].tensor->size());
    for (std::int64_t j = 0; j < va[i].tensor->size(); ++j)
      CHECK((*va[i].tensor)[j] == (*vb[i].tensor)[j]);
  }

  // alpha_attn = 1: key/query entries have std 1 (within 5% at 4096 draws)
  CHECK(sample_std(a.layers[0].wk) == doctest::Approx(1.0).epsilon(0.05));

  // alpha_attn = 1/2, head_dim 16: std N^(1/2) = 4
  ModelConfig half = cfg;
  half.head_dim = 16;
  half.n_heads = 4;
  half.alpha_attn = 0.5;
  Params c = init_params(half, 7);
  CHECK(sample_std(c.layers[0].wk) == doctest::Approx(4.0).epsilon(0.05));

  // read-in/read-out init std is the reciprocal of the forward multiplier
  ModelConfig deep = cfg;
  deep.depth = 16;
  deep.beta0 = 4.0;
  Params d = init_params(deep, 11);
  const RescaleFactors rs = rescale_factors(deep);
  CHECK(rs.read_in == doctest::Approx(0.5));  // (16/4)^-0.5
  CHECK(sample_std(d.w0) == doctest::Approx(1.0 / rs.read_in).epsilon(0.1));
}

TEST_CASE("zero key weights give uniform attention") {
  ModelConfig cfg;
  cfg.head_dim = 3;
  cfg.n_heads = 2;
  cfg.depth = 1;
  cfg.seq_len = 4;
  cfg.input_dim = 2;
  Params params = init_params(cfg, 3);
  for (LayerParams& l : params.layers)
    for (std::int64_t i = 0; i < l.wk.size(); ++i) l.wk[i] = 0.0;
  Rng rng(9);
  Sample sample = random_pooled_sample(rng, cfg);
  ForwardResult fw = forward(params, cfg, {&sample});
  const Tensor& w = fw.trace.tape->value(fw.trace.samples[0].attn_w[0][0]);
  for (int s = 0; s < 4; ++s)
    for (int sp = 0; sp < 4; ++sp) CHECK(w.at(s, sp) == doctest::Approx(0.25).epsilon(1e-12));

  ModelConfig causal_cfg = cfg;
  causal_cfg.mode = TaskMode::causal_lm;
  causal_cfg.input_dim = 5;
  causal_cfg.output_dim = 5;
  Params cp = init_params(causal_cfg, 3);
  for (LayerParams& l : cp.layers)
    for (std::int64_t i = 0; i < l.wk.size(); ++i) l.wk[i] = 0.0;
  Sample tok;
  tok.tokens = {0, 1, 2, 3};
  ForwardResult cw = forward(cp, causal_cfg, {&tok});
  const Tensor& cwm = cw.trace.tape->value(cw.trace.samples[0].attn_w[0][0]);
  for (int s = 0; s < 4; ++s)
    for (int sp = 0; sp <= s; ++sp)
      CHECK(cwm.at(s, sp) == doctest::Approx(1.0 / (s + 1)).epsilon(1e-12));
}

TEST_CASE("logits scale exactly as 1/gamma0") {
  ModelConfig cfg;
  cfg.head_dim = 3;
  cfg.n_heads = 2;
  cfg.depth = 2;
  cfg.seq_len = 3;
  cfg.input_dim = 4;
  cfg.gamma0 = 1.0;
  Params params = init_params(cfg, 21);
  Rng rng(2);
  Sample sample = random_pooled_sample(rng, cfg);
  ForwardResult base = forward(params, cfg, {&sample});
  ModelConfig doubled = cfg;
  doubled.gamma0 = 2.0;
  ForwardResult half = forward(params, doubled, {&sample});
  for (std::int64_t i = 0; i < base.logits.size(); ++i)
    CHECK(half.logits[i] == base.logits[i] / 2.0);
}

TEST_CASE("attention_logits") {
  Tensor ones16 = Tensor::full({16}, 1.0);
  CHECK(attention_logits(ones16, ones16, 16, 1.0) == doctest::Approx(1.0));
  CHECK(attention_logits(ones16, ones16, 16, 0.5) == doctest::Approx(4.0));
  Tensor e0 = Tensor::from_values({2}, {1, 0});
  Tensor e1 = Tensor::from_values({2}, {0, 1});
  CHECK(attention_logits(e0, e1, 2, 1.0) == 0.0);
}

TEST_CASE("forward is equivariant under head permutation") {
  ModelConfig cfg;
  cfg.head_dim = 2;
  cfg.n_heads = 4;
  cfg.depth = 2;
  cfg.seq_len = 3;
  cfg.input_dim = 4;
  Params params = init_params(cfg, 77);
  Rng rng(6);
  Sample sample = random_pooled_sample(rng, cfg);
  ForwardResult base = forward(params, cfg, {&sample});

  const std::vector<int> perm = {2, 0, 3, 1};
  Params permuted = params;
  const int n = cfg.head_dim, m = cfg.model_dim();
  for (size_t l = 0; l < params.layers.size(); ++l) {
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      for (int d = 0; d < n; ++d) {
        for (int i = 0; i < m; ++i) {
          permuted.layers[l].wk.at(hd * n + d, i) = params.layers[l].wk.at(perm[hd] * n + d, i);
          permuted.layers[l].wq.at(hd * n + d, i) = params.layers[l].wq.at(perm[hd] * n + d, i);
          permuted.layers[l].wv.at(hd * n + d, i) = params.layers[l].wv.at(perm[hd] * n + d, i);
          permuted.layers[l].wo.at(i, hd * n + d) = params.layers[l].wo.at(i, perm[hd] * n + d);
        }
      }
    }
  }
  ForwardResult swapped = forward(permuted, cfg, {&sample});
  for (std::int64_t i = 0; i < base.logits.size(); ++i)
    CHECK(std::abs(swapped.logits[i] - base.logits[i]) < 1e-12);
}

TEST_CASE("causal logits ignore future tokens") {
  ModelConfig cfg;
  cfg.mode = TaskMode::causal_lm;
  cfg.head_dim = 2;
  cfg.n_heads = 2;
  cfg.depth = 2;
  cfg.seq_len = 5;
  cfg.input_dim = 6;
  cfg.output_dim = 6;
  Params params = init_params(cfg, 13);
  Sample a, b;
  a.tokens = {1, 2, 3, 4, 5};
  b.tokens = {1, 2, 3, 0, 1};  // same prefix of length 3
  ForwardResult fa = forward(params, cfg, {&a});
  ForwardResult fb = forward(params, cfg, {&b});
  for (int s = 0; s < 3; ++s)
    for (int o = 0; o < 6; ++o)
      CHECK(fa.logits.at(s, o) == fb.logits.at(s, o));
}

TEST_CASE("loss_and_grads basics") {
  ModelConfig cfg;
  cfg.head_dim = 2;
  cfg.n_heads = 2;
  cfg.depth = 1;
  cfg.seq_len = 2;
  cfg.input_dim = 3;
  cfg.output_dim = 4;
  Params params = init_params(cfg, 31);
  Rng rng(8);
  Sample sample = random_pooled_sample(rng, cfg);

  // mse with target equal to the model output: zero loss, zero grads
  ForwardResult fw = forward(params, cfg, {&sample});
  Sample matched = sample;
  matched.target = Tensor({cfg.output_dim});
  for (int o = 0; o < cfg.output_dim; ++o) matched.target[o] = fw.logits.at(0, o);
  LossResult zero = loss_and_grads(params, cfg, {&matched}, LossKind::mse);
  CHECK(zero.loss == doctest::Approx(0.0).epsilon(1e-15));
  for (const Tensor& g : zero.grads.tensors)
    for (std::int64_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i]) < 1e-14);

  // uniform logits under cross entropy: loss = ln(n_classes)
  Params flat = params;
  for (std::int64_t i = 0; i < flat.wl.size(); ++i) flat.wl[i] = 0.0;
  Sample labeled = sample;
  labeled.label = 2;
  LossResult ce = loss_and_grads(flat, cfg, {&labeled}, LossKind::cross_entropy);
  CHECK(ce.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // error signal for mse is target - logits
  Sample off = sample;
  off.target = Tensor({cfg.output_dim});
  LossResult lr = loss_and_grads(params, cfg, {&off}, LossKind::mse);
  for (int o = 0; o < cfg.output_dim; ++o)
    CHECK(lr.trace.delta.at(0, o) == doctest::Approx(-fw.logits.at(0, o)).epsilon(1e-12));
}

TEST_CASE("transformer gradients pass the finite-difference oracle (quick)") {
  ModelConfig cfg;
  cfg.head_dim = 2;
  cfg.n_heads = 2;
  cfg.depth = 1;
  cfg.seq_len = 2;
  cfg.input_dim = 2;
  cfg.output_dim = 1;
  cfg.alpha_attn = 0.5;
  Params params = init_params(cfg, 17);
  Rng rng(4);
  Sample sample = random_pooled_sample(rng, cfg);

  LossResult lr = loss_and_grads(params, cfg, {&sample}, LossKind::mse);
  std::vector<Tensor> flat_params;
  for (const ParamView& v : param_views(params)) flat_params.push_back(*v.tensor);
  auto eval = [&](const std::vector<Tensor>& ps) {
    Params work = params;
    std::vector<ParamView> views = param_views(work);
    for (size_t i = 0; i < views.size(); ++i) *views[i].tensor = ps[i];
    LossResult r = loss_and_grads(work, cfg, {&sample}, LossKind::mse);
    return r.loss;
  };
  CHECK(finite_diff_check(eval, flat_params, lr.grads.tensors, 1e-5) < 1e-5);
}

TEST_CASE("deep linear forward") {
  // identity-like bulk weights reproduce the explicit matrix chain
  DeepLinearParams p;
  const int width = 4;
  p.w_in = Tensor::identity(width);
  p.ws.push_back(Tensor::zeros({width, width}));
  for (int i = 0; i < width; ++i) p.ws[0].at(i, i) = 2.0;  // scaled identity
  p.w_out = Tensor::full({1, width}, 1.0);
  Tensor x = Tensor::from_values({width}, {1, 0, 0, 0});
  DeepLinearForward fw = forward_deep_linear(p, 2, 1.0, x);
  // h1 = x, h2 = 2/sqrt(4) * x = x
  CHECK(fw.h.size() == 2);
  CHECK(fw.h[1][0] == doctest::Approx(1.0));
  CHECK(fw.output == doctest::Approx(1.0 / width));

  // depth 0 reads h1 directly
  DeepLinearForward f0 = forward_deep_linear(p, 0, 1.0, x);
  CHECK(f0.h.size() == 1);
  CHECK(f0.output == doctest::Approx(1.0 / width));

  // orthogonal readout gives zero output
  DeepLinearParams q = p;
  q.w_out = Tensor::from_values({1, width}, {0, 1, 0, 0});
  CHECK(forward_deep_linear(q, 2, 1.0, x).output == doctest::Approx(0.0));
}

TEST_CASE("non-finite activations raise a numeric error naming the layer") {
  ModelConfig cfg;
  cfg.head_dim = 2;
  cfg.n_heads = 2;
  cfg.depth = 2;
  cfg.seq_len = 2;
  cfg.input_dim = 2;
  Params params = init_params(cfg, 5);
  params.layers[1].w2[0] = std::numeric_limits<double>::infinity();
  Rng rng(12);
  Sample sample = random_pooled_sample(rng, cfg);
  try {
    forward(params, cfg, {&sample});
    FAIL("expected a numeric error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("block 2") != std::string::npos);
  }
}
