#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "ctm/error.hpp"

namespace ctm::nn {

/// Up to five axes: batch, channel, x, y, z. Storage is x-fastest, then y, z,
/// channel, batch.
struct Shape {
  int n = 1;
  int c = 1;
  int x = 1;
  int y = 1;
  int z = 1;

  std::size_t spatial() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
           static_cast<std::size_t>(z);
  }
  std::size_t count() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * spatial();
  }
  bool same_spatial(const Shape& o) const { return x == o.x && y == o.y && z == o.z; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(const Shape& shape, T fill = T{0})
      : shape_(shape), data_(shape.count(), fill) {}
  Tensor(const Shape& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count()) {
      throw ShapeError("tensor data length does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape_.x) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(shape_.y) *
                    (static_cast<std::size_t>(z) +
                     static_cast<std::size_t>(shape_.z) *
                         (static_cast<std::size_t>(c) +
                          static_cast<std::size_t>(shape_.c) * static_cast<std::size_t>(n))));
  }
  T& at(int n, int c, int x, int y, int z) { return data_[index(n, c, x, y, z)]; }
  T at(int n, int c, int x, int y, int z) const { return data_[index(n, c, x, y, z)]; }

  /// Start of the spatial block for (n, c).
  T* channel(int n, int c) { return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.spatial(); }
  const T* channel(int n, int c) const {
    return data_.data() + (static_cast<std::size_t>(n) * shape_.c + c) * shape_.spatial();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new shape with equal element count.
  Tensor reshaped(const Shape& s) const {
    if (s.count() != shape_.count()) throw ShapeError("reshape changes element count");
    return Tensor(s, data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_{0, 0, 0, 0, 0};
  std::vector<T> data_;
};

/// Value array paired with a gradient buffer allocated on first use.
template <class T>
class DiffTensor {
 public:
  DiffTensor() = default;
  explicit DiffTensor(const Shape& shape, T fill = T{0}) : value_(shape, fill) {}
  explicit DiffTensor(Tensor<T> value) : value_(std::move(value)) {}

  const Shape& shape() const { return value_.shape(); }
  Tensor<T>& value() { return value_; }
  const Tensor<T>& value() const { return value_; }

  bool has_grad() const { return !grad_.empty() && grad_.shape() == value_.shape(); }
  Tensor<T>& grad() {
    if (grad_.shape() != value_.shape()) grad_ = Tensor<T>(value_.shape());
    return grad_;
  }
  const Tensor<T>& grad_or_empty() const { return grad_; }
  void zero_grad() {
    if (!grad_.empty()) grad_.fill(T{0});
  }

 private:
  Tensor<T> value_;
  Tensor<T> grad_;
};

template <class T>
struct ParamRef {
  std::string name;
  DiffTensor<T>* param;
};

template <class T>
struct BufferRef {
  std::string name;
  Tensor<T>* buffer;
};

/// Trainable parameters and non-trainable buffers in declaration order.
template <class T>
struct ParamSet {
  std::vector<ParamRef<T>> params;
  std::vector<BufferRef<T>> buffers;

  void add(std::string name, DiffTensor<T>& p) { params.push_back({std::move(name), &p}); }
  void add_buffer(std::string name, Tensor<T>& b) { buffers.push_back({std::move(name), &b}); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.param->value().size();
    return n;
  }
  void zero_grad() {
    for (auto& p : params) p.param->zero_grad();
  }
};

enum class Mode { Train, Eval };

}  // namespace ctm::nn
