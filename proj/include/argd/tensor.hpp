#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "argd/error.hpp"

namespace argd {

/// Dense row-major tensor of rank <= 4. Layout for images is NCHW.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, T fill = T{})
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::initializer_list<int> shape, T fill = T{})
      : Tensor(std::vector<int>(shape), fill) {}
  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw InputError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string());
    }
  }

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return shape.empty() ? 0 : n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Contiguous slice along the leading dimension.
  std::span<T> slice(int i) {
    const std::size_t inner = data_.size() / static_cast<std::size_t>(shape_[0]);
    return {data_.data() + inner * static_cast<std::size_t>(i), inner};
  }
  std::span<const T> slice(int i) const {
    const std::size_t inner = data_.size() / static_cast<std::size_t>(shape_[0]);
    return {data_.data() + inner * static_cast<std::size_t>(i), inner};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) {
      throw InputError("cannot reshape " + shape_string() + " to a different element count");
    }
    shape_ = std::move(shape);
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? ", " : "") << shape_[i];
    os << ')';
    return os.str();
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& shape, const char* what) {
  if (t.shape() != shape) {
    Tensor<T> expected(shape);
    throw InputError(std::string(what) + ": expected shape " + expected.shape_string() +
                     ", got " + t.shape_string());
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw InputError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     t.shape_string());
  }
}

}  // namespace argd
