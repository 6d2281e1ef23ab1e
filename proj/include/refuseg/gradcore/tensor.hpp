#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "refuseg/errors.hpp"

namespace refuseg::grad {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape);

// Dense row-major array. `grad` is empty until a backward pass (or zero_grad)
// allocates it; a tensor with requires_grad == false never receives one.
template <class T>
struct BasicTensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;

  BasicTensor() = default;
  BasicTensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    validate();
  }

  static BasicTensor zeros(Shape s) { return full(std::move(s), T{0}); }
  static BasicTensor full(Shape s, T value) {
    const auto n = refuseg::grad::numel(s);
    return BasicTensor(std::move(s), std::vector<T>(static_cast<size_t>(n), value));
  }
  static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t axis) const { return shape.at(axis); }
  size_t rank() const { return shape.size(); }
  bool has_grad() const { return !grad.empty(); }

  std::span<T> values() { return data; }
  std::span<const T> values() const { return data; }

  void validate() const {
    for (auto extent : shape)
      require(extent > 0, ErrorKind::dimension, "non-positive extent in shape " + shape_string(shape));
    require(refuseg::grad::numel(shape) == static_cast<int64_t>(data.size()), ErrorKind::dimension,
            "shape " + shape_string(shape) + " does not match " + std::to_string(data.size()) +
                " values");
  }

  void zero_grad() {
    if (requires_grad) grad.assign(data.size(), T{0});
  }

  template <class U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    return out;
  }
};

using Tensor = BasicTensor<float>;

// Named tensors, ordered by name so iteration (and serialization) is deterministic.
using TensorMap = std::map<std::string, Tensor>;

}  // namespace refuseg::grad
