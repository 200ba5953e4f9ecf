#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eqnet/common.hpp"

namespace eqnet {

template <class T>
class Tape;

/// Dense row-major tensor. The payload is immutable and shared between
/// copies; "mutating" code builds new tensors. A tensor either floats free
/// or is bound to exactly one tape node (requires_grad).
template <class T>
class Tensor {
 public:
  using Storage = std::shared_ptr<const std::vector<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values)
      : Tensor(std::move(shape), std::make_shared<const std::vector<T>>(std::move(values))) {}

  Tensor(Shape shape, Storage storage) : shape_(std::move(shape)), data_(std::move(storage)) {
    for (int64_t d : shape_) {
      if (d < 1) fail<DimensionError>("tensor dims must be >= 1, got ", shape_str(shape_));
    }
    if (eqnet::numel(shape_) != static_cast<int64_t>(data_->size())) {
      fail<DimensionError>("shape ", shape_str(shape_), " does not match payload of ",
                           data_->size(), " values");
    }
  }

  static Tensor zeros(const Shape& shape) {
    return Tensor(shape, std::vector<T>(static_cast<size_t>(eqnet::numel(shape)), T(0)));
  }

  static Tensor full(const Shape& shape, T v) {
    return Tensor(shape, std::vector<T>(static_cast<size_t>(eqnet::numel(shape)), v));
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  /// Axis length; negative axis counts from the back.
  int64_t dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) fail<DimensionError>("axis ", axis, " out of range for rank ", r);
    return shape_[static_cast<size_t>(axis)];
  }

  std::span<const T> data() const { return {data_->data(), data_->size()}; }
  const Storage& storage() const { return data_; }

  T item() const {
    if (numel() != 1) fail<ContractError>("item() on tensor of ", numel(), " elements");
    return (*data_)[0];
  }

  T at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      fail<DimensionError>("index rank ", idx.size(), " vs tensor rank ", rank());
    const auto st = row_major_strides(shape_);
    int64_t off = 0;
    int k = 0;
    for (int64_t i : idx) {
      if (i < 0 || i >= shape_[static_cast<size_t>(k)])
        fail<DimensionError>("index ", i, " out of bounds on axis ", k);
      off += i * st[static_cast<size_t>(k)];
      ++k;
    }
    return (*data_)[static_cast<size_t>(off)];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same payload, no tape participation.
  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

 private:
  friend class Tape<T>;
  Shape shape_;
  Storage data_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

/// Records one training step's operations for reverse-mode differentiation.
/// Nodes are appended in execution order (so inputs always precede their
/// consumers) and backward() visits them exactly once in reverse. The tape
/// must outlive every tensor bound to it and is confined to one thread.
template <class T>
class Tape {
 public:
  /// pull(out_grad, parent_grads): accumulate (+=) into each parent grad.
  /// parent_grads[k] is empty when parent k is untracked or unneeded.
  using PullFn =
      std::function<void(std::span<const T> out_grad, std::span<std::span<T>> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Bind `value` to this tape as a leaf. A non-empty name makes the leaf
  /// addressable by grad_named(); re-registering a name returns the
  /// original leaf.
  Tensor<T> leaf(const Tensor<T>& value, const std::string& name = "") {
    if (value.tape_ != nullptr) {
      fail<ContractError>("tensor already participates in a tape; a tensor joins exactly one");
    }
    if (!name.empty()) {
      auto it = named_.find(name);
      if (it != named_.end()) return it->second;
    }
    Tensor<T> out = value;
    out.tape_ = this;
    out.node_ = add_node(value.shape(), {}, nullptr);
    if (!name.empty()) named_.emplace(name, out);
    return out;
  }

  /// Record an op result. `inputs` lists every operand (tracked or not) in
  /// the order the pull function expects its parent_grads.
  Tensor<T> record(Shape out_shape, typename Tensor<T>::Storage out_data,
                   std::span<const Tensor<T>* const> inputs, PullFn pull) {
    std::vector<int> parents;
    parents.reserve(inputs.size());
    for (const Tensor<T>* in : inputs) {
      if (in->tape_ != nullptr && in->tape_ != this)
        fail<ContractError>("operands come from different tapes");
      parents.push_back(in->tape_ == this ? in->node_ : -1);
    }
    Tensor<T> out(std::move(out_shape), std::move(out_data));
    out.tape_ = this;
    out.node_ = add_node(out.shape(), std::move(parents), std::move(pull));
    return out;
  }

  /// Reverse sweep from a scalar loss recorded on this tape. Each node is
  /// visited once; saved activations are released as the sweep passes them,
  /// so a tape cannot be swept twice.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) fail<ContractError>("backward() needs a scalar loss, got ",
                                               shape_str(loss.shape()));
    if (loss.tape_ != this) fail<ContractError>("loss was not recorded on this tape");
    if (swept_) fail<ContractError>("tape already swept; record a fresh tape per step");
    swept_ = true;
    nodes_[static_cast<size_t>(loss.node_)].grad.assign(1, T(1));

    std::vector<std::span<T>> parent_spans;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (!n.pull) continue;  // leaf: keep grad for retrieval
      if (n.grad.empty()) {
        n.pull = nullptr;  // off the loss path
        continue;
      }
      parent_spans.clear();
      for (int p : n.parents) {
        if (p < 0) {
          parent_spans.emplace_back();
          continue;
        }
        Node& pn = nodes_[static_cast<size_t>(p)];
        if (pn.grad.empty()) pn.grad.assign(static_cast<size_t>(eqnet::numel(pn.shape)), T(0));
        parent_spans.emplace_back(pn.grad.data(), pn.grad.size());
      }
      n.pull(std::span<const T>(n.grad.data(), n.grad.size()),
             std::span<std::span<T>>(parent_spans.data(), parent_spans.size()));
      n.pull = nullptr;  // release saved activations early
      if (i != loss.node_) n.grad = {};
    }
  }

  /// Gradient of a tracked tensor after backward(); zeros if it never
  /// influenced the loss.
  Tensor<T> grad(const Tensor<T>& t) const {
    if (t.tape_ != this) fail<ContractError>("tensor is not tracked on this tape");
    const Node& n = nodes_[static_cast<size_t>(t.node_)];
    if (n.grad.empty()) return Tensor<T>::zeros(t.shape());
    return Tensor<T>(t.shape(), n.grad);
  }

  /// Gradient of the named leaf; zeros of `shape` when absent or untouched.
  Tensor<T> grad_named(const std::string& name, const Shape& shape) const {
    auto it = named_.find(name);
    if (it == named_.end()) return Tensor<T>::zeros(shape);
    return grad(it->second);
  }

  bool has_leaf(const std::string& name) const { return named_.count(name) != 0; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    PullFn pull;
    std::vector<T> grad;
  };

  int add_node(Shape shape, std::vector<int> parents, PullFn pull) {
    nodes_.push_back(Node{std::move(shape), std::move(parents), std::move(pull), {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, Tensor<T>> named_;
  bool swept_ = false;
};

namespace detail {

/// Wrap an op result: records on the inputs' tape when any input is
/// tracked, otherwise returns a free tensor. `pull` may be empty for ops
/// that are never differentiated.
template <class T>
Tensor<T> make_op_result(Shape out_shape, typename Tensor<T>::Storage out_data,
                         std::initializer_list<const Tensor<T>*> inputs,
                         typename Tape<T>::PullFn pull) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* in : inputs) {
    if (in->tape() != nullptr) {
      if (tape != nullptr && tape != in->tape())
        fail<ContractError>("operands come from different tapes");
      tape = in->tape();
    }
  }
  if (tape == nullptr) return Tensor<T>(std::move(out_shape), std::move(out_data));
  std::vector<const Tensor<T>*> ins(inputs);
  return tape->record(std::move(out_shape), std::move(out_data),
                      std::span<const Tensor<T>* const>(ins.data(), ins.size()),
                      std::move(pull));
}

template <class T>
Tensor<T> make_op_result(Shape out_shape, std::vector<T> out_data,
                         std::initializer_list<const Tensor<T>*> inputs,
                         typename Tape<T>::PullFn pull) {
  return make_op_result<T>(std::move(out_shape),
                           std::make_shared<const std::vector<T>>(std::move(out_data)), inputs,
                           std::move(pull));
}

}  // namespace detail

}  // namespace eqnet
