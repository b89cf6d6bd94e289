#include "flowe/tensor.hpp"

#include <cmath>
#include <numeric>

namespace flowe {

Shape::Shape(std::initializer_list<std::size_t> dims) : dims_(dims) {
  if (dims_.empty() || dims_.size() > 4) throw DimensionError("tensor rank must be 1..4, got " + std::to_string(dims_.size()));
}

Shape::Shape(std::span<const std::size_t> dims) : dims_(dims.begin(), dims.end()) {
  if (dims_.empty() || dims_.size() > 4) throw DimensionError("tensor rank must be 1..4, got " + std::to_string(dims_.size()));
}

std::size_t Shape::numel() const noexcept {
  if (dims_.empty()) return 0;
  return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
}

std::string Shape::str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

template <std::floating_point T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template bool all_finite(const Tensor<float>&);
template bool all_finite(const Tensor<double>&);

std::size_t count_set(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.values.begin(), m.values.end(), [](std::uint8_t b) { return b != 0; }));
}

}  // namespace flowe
