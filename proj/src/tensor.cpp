#include "tslab/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tslab {

namespace {
std::int64_t shape_product(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) fail("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  data_.assign(static_cast<size_t>(shape_product(shape_)), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : t.data_) v = value;
  return t;
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (shape_product(t.shape_) != static_cast<std::int64_t>(values.size()))
    fail("from_values: shape does not match value count");
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::identity(int n) {
  Tensor t({n, n});
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

double Tensor::squared_norm() const {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return s;
}

double Tensor::rms() const {
  if (data_.empty()) return 0.0;
  return std::sqrt(squared_norm() / static_cast<double>(data_.size()));
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

void fail(const std::string& message) { throw Error(message); }

void check(bool condition, const std::string& message) {
  if (!condition) fail(message);
}

}  // namespace tslab
