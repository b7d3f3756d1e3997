#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace pblab {

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major array of float or double. Data and the optional gradient
// buffer are shared, so copies are views onto the same storage; an optimizer
// updating a parameter tensor is visible through every graph that bound it.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T{0})) {}

  Tensor(std::vector<int> shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != values.size()) {
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    for (auto& x : *t.data_) x = v;
    return t;
  }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return data_ ? data_->size() : 0; }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  std::vector<T>& vec() { return *data_; }
  const std::vector<T>& vec() const { return *data_; }

  T& at(std::size_t i) { return (*data_)[i]; }
  T at(std::size_t i) const { return (*data_)[i]; }

  bool has_grad() const { return static_cast<bool>(grad_); }
  void ensure_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(numel(), T{0});
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T{0});
  }
  T* grad() { return grad_->data(); }
  const T* grad() const { return grad_->data(); }
  std::vector<T>& grad_vec() { return *grad_; }
  const std::vector<T>& grad_vec() const { return *grad_; }

  bool all_finite() const {
    for (const T& x : *data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  // Deep copy with fresh storage (grad not copied).
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<T>>(*data_);
    return t;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
};

}  // namespace pblab
