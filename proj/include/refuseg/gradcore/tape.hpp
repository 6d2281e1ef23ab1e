#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string_view>
#include <vector>

#include "refuseg/gradcore/tensor.hpp"

namespace refuseg::grad {

template <class T>
class Tape;

// Handle to a value recorded on a tape. Cheap to copy; valid until the tape is cleared.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int32_t id) : tape_(tape), id_(id) {}

  const BasicTensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  int64_t dim(size_t axis) const { return shape().at(axis); }
  int64_t numel() const { return value().numel(); }
  int32_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }
  // Scalar value of a one-element variable.
  T item() const { return value().data.at(0); }

 private:
  Tape<T>* tape_ = nullptr;
  int32_t id_ = -1;
};

// Append-only record of operations. Backward walks the nodes in reverse append
// order, which is a valid topological order because inputs are always recorded
// before their consumers.
template <class T>
class Tape {
 public:
  using value_type = T;
  using BackwardFn = std::function<void(Tape&, int32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(BasicTensor<T> value) {
    value.requires_grad = false;
    value.grad.clear();
    return push("constant", std::move(value), {}, false, nullptr, {});
  }

  // Leaf bound to an external tensor; gradients are accumulated into
  // `target.grad` at the end of backward() when target.requires_grad is set.
  Var<T> parameter(BasicTensor<T>& target) {
    BasicTensor<T> copy(target.shape, target.data);
    return push("parameter", std::move(copy), {}, target.requires_grad, &target, {});
  }

  Var<T> record(std::string_view kind, BasicTensor<T> value, std::vector<int32_t> inputs,
                BackwardFn backward) {
    bool needs = false;
    for (auto id : inputs) needs = needs || nodes_.at(static_cast<size_t>(id)).needs_grad;
    if (!needs) backward = nullptr;
    return push(kind, std::move(value), std::move(inputs), needs, nullptr, std::move(backward));
  }

  const BasicTensor<T>& value(int32_t id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  bool needs_grad(int32_t id) const { return nodes_.at(static_cast<size_t>(id)).needs_grad; }
  std::string_view kind(int32_t id) const { return nodes_.at(static_cast<size_t>(id)).kind; }

  // Gradient buffer of a node, allocated (zeroed) on first access.
  std::vector<T>& grad(int32_t id) {
    auto& node = nodes_.at(static_cast<size_t>(id));
    if (node.grad.empty()) node.grad.assign(node.value.data.size(), T{0});
    return node.grad;
  }
  bool has_grad(int32_t id) const { return !nodes_.at(static_cast<size_t>(id)).grad.empty(); }

  void backward(Var<T> loss) {
    require(loss.valid() && &loss.tape() == this, ErrorKind::contract,
            "backward: loss is not recorded on this tape");
    require(loss.numel() == 1, ErrorKind::contract,
            "backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
    for (auto& node : nodes_) node.grad.clear();
    grad(loss.id())[0] = T{1};
    for (int32_t id = loss.id(); id >= 0; --id) {
      auto& node = nodes_[static_cast<size_t>(id)];
      if (node.grad.empty()) continue;
      if (node.backward) node.backward(*this, id);
      if (node.leaf != nullptr && node.leaf->requires_grad) {
        auto& target = *node.leaf;
        if (target.grad.empty()) target.grad.assign(target.data.size(), T{0});
        for (size_t i = 0; i < node.grad.size(); ++i) target.grad[i] += node.grad[i];
      }
    }
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string_view kind;
    std::vector<int32_t> inputs;
    BasicTensor<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    BasicTensor<T>* leaf = nullptr;
    BackwardFn backward;
  };

  Var<T> push(std::string_view kind, BasicTensor<T> value, std::vector<int32_t> inputs, bool needs,
              BasicTensor<T>* leaf, BackwardFn backward) {
    nodes_.push_back(Node{kind, std::move(inputs), std::move(value), {}, needs, leaf,
                          std::move(backward)});
    return Var<T>(this, static_cast<int32_t>(nodes_.size() - 1));
  }

  std::deque<Node> nodes_;
};

}  // namespace refuseg::grad
