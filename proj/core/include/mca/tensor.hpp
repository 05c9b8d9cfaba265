#pragma once

// Dense rank-1..4 tensor with eager reverse-mode differentiation.
//
// A BasicTensor is a cheap handle: copies share the same storage, so a
// parameter handed to an optimizer and the same parameter held by a layer
// see the same values and gradient. Use copy() for an independent buffer.
//
// Every op that has at least one requires_grad input (and runs while grad
// mode is enabled) attaches a Node to its output. backward() walks those
// nodes in reverse topological order; see Tape.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mca/errors.hpp"

namespace mca {

using Shape = std::vector<std::size_t>;

std::size_t num_elements(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

template <typename Real>
struct Storage;

template <typename Real>
using StoragePtr = std::shared_ptr<Storage<Real>>;

template <typename Real>
using BackwardFn =
    std::function<void(const Storage<Real>& out, const std::vector<StoragePtr<Real>>& inputs)>;

template <typename Real>
struct Node {
  std::string op;
  std::vector<StoragePtr<Real>> inputs;
  BackwardFn<Real> backward;
};

template <typename Real>
struct Storage {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<Real>> node;  // null for leaves

  Real* grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real{0});
    return grad.data();
  }
};

}  // namespace detail

/// Thread-local switch; ops record nothing while disabled.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Real fill = Real{0});
  BasicTensor(Shape shape, std::vector<Real> values);

  static BasicTensor scalar(Real value) { return BasicTensor(Shape{1}, std::vector<Real>{value}); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const Real> values() const;
  /// Writable view. Only leaves may be written; tensors produced by a
  /// recorded op are frozen so saved backward state stays consistent.
  std::span<Real> mutable_values();
  Real item() const;

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool flag = true);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Gradients of leaves accumulate
  /// across calls; intermediate gradients are recomputed each call.
  void backward() const;

  /// Fresh leaf holding a copy of the values.
  BasicTensor copy() const;

  template <typename To>
  BasicTensor<To> cast() const {
    std::vector<To> out(size());
    auto src = values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(src[i]);
    return BasicTensor<To>(shape(), std::move(out));
  }

  const detail::StoragePtr<Real>& storage() const { return storage_; }
  static BasicTensor from_storage(detail::StoragePtr<Real> storage);

 private:
  const detail::Storage<Real>& checked() const;

  detail::StoragePtr<Real> storage_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Ordered record of the ops reachable from a root tensor.
template <typename Real>
class Tape {
 public:
  explicit Tape(const BasicTensor<Real>& root);

  std::size_t size() const { return order_.size(); }
  std::vector<std::string> ops() const;

  /// Seeds d(root)/d(root) = 1 and replays every node once, last first.
  void run_backward();

 private:
  detail::StoragePtr<Real> root_;
  std::vector<detail::StoragePtr<Real>> order_;  // non-leaf storages, inputs before outputs
};

template <typename Real>
struct NamedTensor {
  std::string name;
  BasicTensor<Real> tensor;
};

namespace detail {

/// Builds an op result and, when differentiation is active for any input,
/// records the backward rule.
template <typename Real>
BasicTensor<Real> make_result(Shape shape, std::vector<Real> data, std::string op,
                              std::initializer_list<const BasicTensor<Real>*> inputs,
                              BackwardFn<Real> backward);

template <typename Real>
BasicTensor<Real> make_result(Shape shape, std::vector<Real> data, std::string op,
                              const std::vector<const BasicTensor<Real>*>& inputs,
                              BackwardFn<Real> backward);

}  // namespace detail

}  // namespace mca
