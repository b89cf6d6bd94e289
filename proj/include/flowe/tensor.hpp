#pragma once

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "flowe/error.hpp"

namespace flowe {

/// Extents of a tensor, rank 1 to 4.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::span<const std::size_t> dims);

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t numel() const noexcept;
  std::span<const std::size_t> dims() const noexcept { return dims_; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<std::size_t> dims_;
};

/// Dense row-major array. Rank-3 tensors are feature maps (C x H x W), rank-4
/// tensors are convolution weights (out x in x kh x kw).
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_.numel(), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_.numel())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t extent(std::size_t i) const { return shape_[i]; }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  // Feature-map accessors; only meaningful for rank 3.
  std::size_t channels() const { return shape_[0]; }
  std::size_t height() const { return shape_[1]; }
  std::size_t width() const { return shape_[2]; }
  std::size_t plane_size() const { return shape_[1] * shape_[2]; }

  T& at(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  T at(std::size_t c, std::size_t y, std::size_t x) const { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  std::span<T> plane(std::size_t c) { return std::span<T>(data_).subspan(c * plane_size(), plane_size()); }
  std::span<const T> plane(std::size_t c) const {
    return std::span<const T>(data_).subspan(c * plane_size(), plane_size());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <std::floating_point U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Rank-3 feature map constructor.
template <std::floating_point T>
Tensor<T> feature_map(std::size_t channels, std::size_t height, std::size_t width, T fill = T{0}) {
  return Tensor<T>(Shape{channels, height, width}, fill);
}

/// Throws DimensionError unless `t` is a rank-3 tensor with non-zero extents.
template <std::floating_point T>
void require_feature_map(const Tensor<T>& t, const char* what) {
  if (t.rank() != 3 || t.numel() == 0)
    throw DimensionError(std::string(what) + ": expected non-empty C x H x W tensor, got " + t.shape().str());
}

template <std::floating_point T>
bool all_finite(const Tensor<T>& t);

/// H x W plane of scalars; used for flow components, masks and label maps.
template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  std::size_t size() const noexcept { return values.size(); }
  bool same_shape(std::size_t h, std::size_t w) const noexcept { return height == h && width == w; }
  template <typename U>
  bool same_shape(const Grid<U>& o) const noexcept {
    return height == o.height && width == o.width;
  }
  T& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  const T& operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Boolean plane; stored as bytes so spans stay contiguous.
using Mask = Grid<std::uint8_t>;
using LabelMap = Grid<std::uint8_t>;

std::size_t count_set(const Mask& m);

}  // namespace flowe
