#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "blacksmith/common.hpp"

namespace blacksmith {

// Dense row-major tensor. All model math in this project runs on either
// float (training) or double (gradient-oracle tests), so everything that
// touches tensor data is templated on the scalar type.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(numel_from(shape_), T(0));
  }

  Tensor(std::initializer_list<std::size_t> shape)
      : Tensor(std::vector<std::size_t>(shape)) {}

  static std::size_t numel_from(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t(1),
                           std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t numel() const { return data_.size(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at2(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Ordered name -> tensor map. Iteration follows insertion order, which is
// the canonical order used by checkpoints and parameter updates.
template <typename T>
class ParamMap {
 public:
  void add(const std::string& name, Tensor<T> tensor) {
    require(index_.find(name) == index_.end(), ErrorCategory::name,
            "duplicate tensor name '" + name + "'");
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(tensor));
  }

  bool contains(const std::string& name) const {
    return index_.find(name) != index_.end();
  }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCategory::name,
            "unknown tensor name '" + name + "'");
    return tensors_[it->second];
  }

  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCategory::name,
            "unknown tensor name '" + name + "'");
    return tensors_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }

  Tensor<T>& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& tensor(std::size_t i) const { return tensors_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      if (!t.all_finite()) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor<T>> tensors_;
};

}  // namespace blacksmith
