#include "nca/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nca {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

static void validate_shape(const Shape& s) {
  if (s.empty() || s.size() > 4)
    throw std::invalid_argument("tensor rank must be 1..4, got " + shape_str(s));
  for (int d : s)
    if (d < 1) throw std::invalid_argument("tensor dims must be >= 1, got " + shape_str(s));
}

Tensor::Tensor(Shape dims, float fill) : dims_(std::move(dims)) {
  validate_shape(dims_);
  data_.assign(shape_numel(dims_), fill);
}

Tensor::Tensor(Shape dims, std::vector<float> data) : dims_(std::move(dims)), data_(std::move(data)) {
  validate_shape(dims_);
  if (shape_numel(dims_) != data_.size())
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match dims " + shape_str(dims_));
}

float Tensor::item() const {
  if (data_.size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(dims_));
  return data_[0];
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape dims) const {
  if (shape_numel(dims) != data_.size())
    throw std::invalid_argument("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
  return Tensor(std::move(dims), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.dims() != expected)
    throw std::invalid_argument(std::string(what) + ": expected " + shape_str(expected) + ", got " +
                                shape_str(t.dims()));
}

}  // namespace nca
