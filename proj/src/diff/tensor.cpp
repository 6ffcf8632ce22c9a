#include "roadforge/diff/tensor.hpp"

#include <algorithm>

#include "roadforge/common/error.hpp"

namespace roadforge::diff {

std::size_t element_count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) fail(ErrorCode::ShapeMismatch, "negative dimension in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void shape_error(const std::string& op, const std::vector<int>& a, const std::vector<int>& b) {
  fail(ErrorCode::ShapeMismatch, op + ": " + shape_string(a) + " vs " + shape_string(b));
}

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)) {
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    fail(ErrorCode::ShapeMismatch,
         "shape " + shape_string(shape_) + " does not hold " + std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::reshaped(std::vector<int> shape) const {
  if (element_count(shape) != data_.size()) shape_error("reshape", shape_, shape);
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::accumulate(const Tensor& other) {
  if (other.shape_ != shape_) shape_error("accumulate", shape_, other.shape_);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

}  // namespace roadforge::diff
