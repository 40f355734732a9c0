#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tslab {

/// Dense row-major tensor of doubles. The only numeric carrier in the
/// library; everything else (params, kernels, traces) is built from it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values);
  static Tensor identity(int n);
  static Tensor scalar(double value);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // 2-d convenience; most of the model works with matrices.
  int rows() const { return shape_.empty() ? 0 : shape_[0]; }
  int cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return data_[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return data_[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  double squared_norm() const;
  double rms() const;  // sqrt(mean of squares)

  std::string shape_string() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

/// Error type used across the library. CLI commands map it to a nonzero
/// exit code with the message on stderr.
class Error : public std::exception {
 public:
  explicit Error(std::string message) : message_(std::move(message)) {}
  const char* what() const noexcept override { return message_.c_str(); }

 private:
  std::string message_;
};

[[noreturn]] void fail(const std::string& message);
void check(bool condition, const std::string& message);

}  // namespace tslab
