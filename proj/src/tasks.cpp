#include "tslab/tasks.hpp"

#include <algorithm>
#include <numeric>

#include "tslab/rng.hpp"

namespace tslab {

int Dataset::effective_batch_size() const {
  const int n = static_cast<int>(samples.size());
  if (batch_size <= 0 || batch_size >= n) return n;
  return batch_size;
}

std::vector<int> Dataset::minibatch_indices(int step) const {
  check(!samples.empty(), "dataset: no samples");
  const int n = static_cast<int>(samples.size());
  const int b = effective_batch_size();
  const int batches_per_epoch = (n + b - 1) / b;
  const int epoch = step / batches_per_epoch;
  const int slot = step % batches_per_epoch;

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // seeded Fisher-Yates so the schedule is a pure function of (seed, step)
  Rng rng(derive_seed(seed, 0x9a7cULL, static_cast<std::uint64_t>(epoch)));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);

  std::vector<int> out;
  for (int i = slot * b; i < std::min((slot + 1) * b, n); ++i)
    out.push_back(order[static_cast<size_t>(i)]);
  return out;
}

std::vector<const Sample*> Dataset::minibatch(int step) const {
  std::vector<const Sample*> out;
  for (int i : minibatch_indices(step)) out.push_back(&samples[static_cast<size_t>(i)]);
  return out;
}

Dataset make_regression(std::uint64_t seed, int n_samples, int seq_len, int input_dim,
                        double teacher_scale) {
  check(n_samples >= 1 && seq_len >= 1 && input_dim >= 1, "make_regression: bad sizes");
  Rng rng(seed);
  Tensor teacher = rng.normal_tensor({input_dim}, 1.0);
  Dataset ds;
  ds.mode = TaskMode::pooled_classifier;
  ds.loss_kind = LossKind::mse;
  ds.seed = seed;
  for (int i = 0; i < n_samples; ++i) {
    Sample s;
    s.input = rng.normal_tensor({seq_len, input_dim}, 1.0);
    Tensor pooled({input_dim});
    for (int t = 0; t < seq_len; ++t)
      for (int d = 0; d < input_dim; ++d) pooled[d] += s.input.at(t, d) / seq_len;
    double y = 0.0;
    for (int d = 0; d < input_dim; ++d) y += teacher[d] * pooled[d];
    s.target = Tensor::from_values({1}, {teacher_scale * y / std::sqrt(double(input_dim))});
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset make_classification(std::uint64_t seed, int n_samples, int seq_len, int input_dim,
                            int n_classes) {
  check(n_samples >= 1 && seq_len >= 1 && input_dim >= 1, "make_classification: bad sizes");
  check(n_classes >= 1 && n_classes <= n_samples, "make_classification: need n_classes <= n_samples");
  Rng rng(seed);
  Dataset ds;
  ds.mode = TaskMode::pooled_classifier;
  ds.loss_kind = LossKind::cross_entropy;
  ds.seed = seed;
  for (int i = 0; i < n_samples; ++i) {
    Sample s;
    s.input = rng.normal_tensor({seq_len, input_dim}, 1.0);
    s.label = rng.uniform_int(0, n_classes - 1);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Dataset make_induction(std::uint64_t seed, int n_samples, int seq_len, int vocab) {
  check(seq_len >= 4, "make_induction: seq_len must be >= 4");
  check(vocab >= 3, "make_induction: vocab must be >= 3");
  check(n_samples >= 1, "make_induction: bad sample count");
  Rng rng(seed);
  Dataset ds;
  ds.mode = TaskMode::causal_lm;
  ds.loss_kind = LossKind::cross_entropy;
  ds.seed = seed;
  for (int i = 0; i < n_samples; ++i) {
    Sample s;
    s.tokens.resize(static_cast<size_t>(seq_len));
    for (int t = 0; t < seq_len; ++t) s.tokens[static_cast<size_t>(t)] = rng.uniform_int(0, vocab - 1);
    // plant A B ... A B so the second A predicts B
    const int a = rng.uniform_int(0, vocab - 1);
    int b = rng.uniform_int(0, vocab - 1);
    if (b == a) b = (b + 1) % vocab;
    const int first = rng.uniform_int(0, seq_len / 2 - 2);
    const int second = rng.uniform_int(seq_len / 2, seq_len - 2);
    s.tokens[static_cast<size_t>(first)] = a;
    s.tokens[static_cast<size_t>(first + 1)] = b;
    s.tokens[static_cast<size_t>(second)] = a;
    s.tokens[static_cast<size_t>(second + 1)] = b;
    s.target_tokens.assign(s.tokens.begin() + 1, s.tokens.end());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace tslab
