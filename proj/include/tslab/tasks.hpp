#pragma once

#include <cstdint>
#include <vector>

#include "tslab/model.hpp"

namespace tslab {

/// Deterministic synthetic dataset with a fixed minibatch schedule. The
/// schedule is a pure function of (seed, step): each epoch is a seeded
/// permutation, so every sample is visited before any repeats.
struct Dataset {
  TaskMode mode = TaskMode::pooled_classifier;
  std::vector<Sample> samples;
  int batch_size = 0;  // 0 or >= n: full batch
  std::uint64_t seed = 0;
  LossKind loss_kind = LossKind::mse;

  int effective_batch_size() const;
  std::vector<const Sample*> minibatch(int step) const;
  std::vector<int> minibatch_indices(int step) const;
};

/// Gaussian token inputs; scalar target is a fixed random linear
/// functional of the position-pooled input.
Dataset make_regression(std::uint64_t seed, int n_samples, int seq_len, int input_dim,
                        double teacher_scale);

/// Gaussian inputs with random fixed labels (a memorization task).
Dataset make_classification(std::uint64_t seed, int n_samples, int seq_len, int input_dim,
                            int n_classes);

/// Token sequences with a planted repeated bigram; next-token targets, so
/// the second occurrence of the bigram head is predictable.
Dataset make_induction(std::uint64_t seed, int n_samples, int seq_len, int vocab);

}  // namespace tslab
