#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace nca {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

// Dense row-major float tensor of rank 1..4.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape dims, float fill = 0.0f);
  Tensor(Shape dims, std::vector<float> data);

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims)); }
  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

  const Shape& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }
  std::vector<float>& vec() { return data_; }
  const std::vector<float>& vec() const { return data_; }

  float& operator[](size_t i) { return data_[i]; }
  float operator[](size_t i) const { return data_[i]; }

  // [C,H,W] accessors.
  float& at(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
  }
  float at(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * dims_[1] + y) * dims_[2] + x];
  }

  float item() const;
  void fill(float v);
  Tensor reshaped(Shape dims) const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Shape dims_;
  std::vector<float> data_;
};

size_t shape_numel(const Shape& s);

// Throws std::invalid_argument with the given context if shapes differ.
void require_shape(const Tensor& t, const Shape& expected, const char* what);

}  // namespace nca
