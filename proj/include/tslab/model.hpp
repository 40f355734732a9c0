#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tslab/tape.hpp"
#include "tslab/tensor.hpp"

namespace tslab {

enum class TaskMode { pooled_classifier, causal_lm, deep_linear };

std::string to_string(TaskMode mode);
TaskMode task_mode_from_string(const std::string& s);

/// All architectural scalars. Exponent ranges follow the stability window
/// [1/2, 1]; outside it forward/backward variables diverge with size.
struct ModelConfig {
  int head_dim = 4;     // key/query dimension per head (N)
  int n_heads = 4;      // attention heads per layer
  int depth = 2;        // residual blocks, each MHSA + MLP
  int seq_len = 4;      // token positions
  int input_dim = 8;    // input feature dimension; vocabulary size in LM mode
  int output_dim = 1;   // logits per position (LM) or per sample (pooled)
  double alpha_attn = 1.0;   // pre-attention exponent, in [1/2, 1]
  double alpha_depth = 1.0;  // residual branch exponent, in [1/2, 1]
  double beta0 = 4.0;        // branch multiplier (effective depth)
  double gamma0 = 1.0;       // feature-learning rate constant
  double eps_ln = 1e-6;
  TaskMode mode = TaskMode::pooled_classifier;
  int adam_scale = 0;  // 0: SGD-style first/last rescales, 1: Adam-style

  int model_dim() const { return head_dim * n_heads; }
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// First/last-layer forward multipliers. Initial stds are their
/// reciprocals so initial effective weights keep unit-scale entries.
struct RescaleFactors {
  double read_in = 1.0;   // also used for the positional encoding
  double read_out = 1.0;
};
RescaleFactors rescale_factors(const ModelConfig& config);

struct LayerParams {
  Tensor wk, wq, wv;  // (heads*head_dim) x model_dim, row block per head
  Tensor wo;          // model_dim x (heads*head_dim), column block per head
  Tensor w1, w2;      // model_dim x model_dim
};

struct Params {
  Tensor w0;   // model_dim x input_dim
  Tensor pos;  // seq_len x model_dim, trainable
  std::vector<LayerParams> layers;
  Tensor wl;   // model_dim x output_dim

  std::int64_t count() const;
};

Params init_params(const ModelConfig& config, std::uint64_t seed);

enum class ParamGroupId { read_in, positional, bulk, read_out };
std::string to_string(ParamGroupId id);

/// Flat, order-stable view over every parameter tensor. Optimizers and
/// serialization iterate this instead of knowing the Params layout.
struct ParamView {
  std::string name;
  Tensor* tensor;
  ParamGroupId group;
};
std::vector<ParamView> param_views(Params& params);
std::vector<ParamView> param_views(const Params& params);  // tensors are non-const internally

/// One training sample. Pooled/regression tasks fill `input` (seq_len x
/// input_dim) and `target` or `label`; causal LM fills token ids.
struct Sample {
  Tensor input;
  Tensor target;                   // output_dim values (regression)
  int label = -1;                  // class id (classification)
  std::vector<int> tokens;         // LM input ids, length seq_len
  std::vector<int> target_tokens;  // LM next-token ids, length seq_len-1
};

/// Every intermediate of one forward pass, addressable by tape handles so
/// probes can read values and, after a backward sweep, gradients.
struct SampleTrace {
  std::vector<Var> h;       // residual stream states, depth+1 entries, seq x model_dim
  std::vector<Var> h_ln;    // pre-attention layernorm outputs
  std::vector<Var> h_mid;   // post-attention residual (h tilde)
  std::vector<Var> h_mid_ln;
  std::vector<Var> mlp_hidden;
  // per layer, per head
  std::vector<std::vector<Var>> k, q, v;     // seq x head_dim
  std::vector<std::vector<Var>> attn;        // pre-attention A, [s,s'] = k_s.q_s' / N^alpha
  std::vector<std::vector<Var>> attn_w;      // softmax weights, rows = query position
  std::vector<std::vector<Var>> v_attn;      // attended values, seq x head_dim
  Var final_ln;
  Var logits;  // pooled: 1 x output_dim; causal: seq x output_dim
};

struct ActivationTrace {
  std::shared_ptr<Tape> tape;
  std::vector<SampleTrace> samples;
  ModelConfig config;
  int step = 0;       // training time tag used by kernel indices
  Var loss{};         // set by loss_and_grads
  Tensor delta;       // error signal -dL/df, one row per sample (pooled) or per token
  bool has_output_backward = false;

  const Tensor& logits(int sample) const { return tape->value(samples[sample].logits); }

  /// Backward sweep of the summed first logit component across samples;
  /// afterwards gradient_kernel and backward-signal probes are valid.
  void run_output_backward(int component = 0);
};

struct ForwardResult {
  Tensor logits;  // batch x output_dim (pooled) or batch x (seq*output_dim) rows stacked
  ActivationTrace trace;
};

/// Forward pass over a batch, one independent per-sample pass summed in a
/// fixed order. Throws a numeric error naming the layer if a residual
/// state goes non-finite.
ForwardResult forward(const Params& params, const ModelConfig& config,
                      const std::vector<const Sample*>& batch, int step_tag = 0);

/// k.q / N^alpha for a single key/query pair.
double attention_logits(const Tensor& k, const Tensor& q, int head_dim, double alpha_attn);

enum class LossKind { mse, cross_entropy };
std::string to_string(LossKind kind);

struct Grads {
  std::vector<Tensor> tensors;  // aligned with param_views order
};

struct LossResult {
  double loss = 0.0;
  Grads grads;
  ActivationTrace trace;
};

LossResult loss_and_grads(const Params& params, const ModelConfig& config,
                          const std::vector<const Sample*>& batch, LossKind loss_kind,
                          int step_tag = 0);

// --- deep linear mode (response-function check) --------------------------

struct DeepLinearParams {
  Tensor w_in;             // width x input_dim
  std::vector<Tensor> ws;  // depth-1 square matrices
  Tensor w_out;            // width vector (1 x width)
};

DeepLinearParams init_deep_linear(int width, int input_dim, int depth, std::uint64_t seed);

struct DeepLinearForward {
  double output = 0.0;
  std::vector<Tensor> h;  // preactivations h^1 .. h^depth
};

/// h^{l+1} = W^l h^l / sqrt(width), f = w.h^L / (gamma0*width). The input
/// is normalized to unit length. No residual stream, nonlinearity or
/// layernorm.
DeepLinearForward forward_deep_linear(const DeepLinearParams& params, int depth, double gamma0,
                                      const Tensor& x);

/// One SGD step on 0.5*(f-y)^2 with the mean-field learning-rate
/// convention (every matrix gets lr = eta*gamma0^2*width).
void deep_linear_step(DeepLinearParams& params, int depth, double gamma0, double eta,
                      const Tensor& x, double y);

}  // namespace tslab
