#include "mca/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace mca {

std::size_t num_elements(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got shape " + to_string(shape));
  }
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, Real fill)
    : storage_(std::make_shared<detail::Storage<Real>>()) {
  check_shape(shape);
  storage_->data.assign(num_elements(shape), fill);
  storage_->shape = std::move(shape);
}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, std::vector<Real> values)
    : storage_(std::make_shared<detail::Storage<Real>>()) {
  check_shape(shape);
  if (num_elements(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " needs " + std::to_string(num_elements(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::from_storage(detail::StoragePtr<Real> storage) {
  BasicTensor t;
  t.storage_ = std::move(storage);
  return t;
}

template <typename Real>
const detail::Storage<Real>& BasicTensor<Real>::checked() const {
  if (!storage_) throw std::logic_error("use of an undefined tensor");
  return *storage_;
}

template <typename Real>
const Shape& BasicTensor<Real>::shape() const {
  return checked().shape;
}

template <typename Real>
std::size_t BasicTensor<Real>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

template <typename Real>
std::size_t BasicTensor<Real>::size() const {
  return checked().data.size();
}

template <typename Real>
std::span<const Real> BasicTensor<Real>::values() const {
  return checked().data;
}

template <typename Real>
std::span<Real> BasicTensor<Real>::mutable_values() {
  checked();
  if (storage_->node) {
    throw std::logic_error("in-place write to a tensor recorded on the tape (op '" +
                           storage_->node->op + "')");
  }
  return storage_->data;
}

template <typename Real>
Real BasicTensor<Real>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return storage_->data[0];
}

template <typename Real>
bool BasicTensor<Real>::requires_grad() const {
  return checked().requires_grad;
}

template <typename Real>
BasicTensor<Real>& BasicTensor<Real>::set_requires_grad(bool flag) {
  checked();
  if (storage_->node && !flag) {
    throw std::logic_error("cannot clear requires_grad on a non-leaf tensor");
  }
  storage_->requires_grad = flag;
  return *this;
}

template <typename Real>
bool BasicTensor<Real>::is_leaf() const {
  return checked().node == nullptr;
}

template <typename Real>
bool BasicTensor<Real>::has_grad() const {
  const auto& s = checked();
  return s.grad.size() == s.data.size();
}

template <typename Real>
std::span<const Real> BasicTensor<Real>::grad() const {
  const auto& s = checked();
  if (s.grad.size() != s.data.size()) return {};
  return s.grad;
}

template <typename Real>
std::span<Real> BasicTensor<Real>::mutable_grad() {
  checked();
  return {storage_->grad_buffer(), storage_->data.size()};
}

template <typename Real>
void BasicTensor<Real>::zero_grad() {
  checked();
  storage_->grad.clear();
}

template <typename Real>
void BasicTensor<Real>::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(shape()));
  }
  Tape<Real>(*this).run_backward();
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::copy() const {
  return BasicTensor(shape(), std::vector<Real>(values().begin(), values().end()));
}

template <typename Real>
Tape<Real>::Tape(const BasicTensor<Real>& root) : root_(root.storage()) {
  if (!root_) throw std::logic_error("tape of an undefined tensor");
  // Iterative post-order DFS so inputs precede the ops that consume them.
  std::unordered_set<const detail::Storage<Real>*> visited;
  std::vector<std::pair<detail::StoragePtr<Real>, std::size_t>> stack;
  if (root_->node) {
    stack.emplace_back(root_, 0);
    visited.insert(root_.get());
  }
  while (!stack.empty()) {
    auto& [storage, next] = stack.back();
    const auto& inputs = storage->node->inputs;
    if (next < inputs.size()) {
      const auto& child = inputs[next++];
      if (child && child->node && visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    order_.push_back(storage);
    stack.pop_back();
  }
}

template <typename Real>
std::vector<std::string> Tape<Real>::ops() const {
  std::vector<std::string> names;
  names.reserve(order_.size());
  for (const auto& s : order_) names.push_back(s->node->op);
  return names;
}

template <typename Real>
void Tape<Real>::run_backward() {
  for (auto& s : order_) s->grad.assign(s->data.size(), Real{0});
  if (root_->requires_grad) {
    Real* g = root_->grad_buffer();
    for (std::size_t i = 0; i < root_->data.size(); ++i) g[i] += Real{1};
  }
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    const auto& storage = **it;
    storage.node->backward(storage, storage.node->inputs);
  }
}

namespace detail {

template <typename Real>
BasicTensor<Real> make_result(Shape shape, std::vector<Real> data, std::string op,
                              const std::vector<const BasicTensor<Real>*>& inputs,
                              BackwardFn<Real> backward) {
  auto out = BasicTensor<Real>(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto* in : inputs) any = any || (in->defined() && in->requires_grad());
  if (!any) return out;
  auto node = std::make_shared<Node<Real>>();
  node->op = std::move(op);
  for (const auto* in : inputs) node->inputs.push_back(in->defined() ? in->storage() : nullptr);
  node->backward = std::move(backward);
  auto storage = out.storage();
  storage->requires_grad = true;
  storage->node = std::move(node);
  return out;
}

template <typename Real>
BasicTensor<Real> make_result(Shape shape, std::vector<Real> data, std::string op,
                              std::initializer_list<const BasicTensor<Real>*> inputs,
                              BackwardFn<Real> backward) {
  return make_result(std::move(shape), std::move(data), std::move(op),
                     std::vector<const BasicTensor<Real>*>(inputs), std::move(backward));
}

template BasicTensor<float> make_result(Shape, std::vector<float>, std::string,
                                        std::initializer_list<const BasicTensor<float>*>,
                                        BackwardFn<float>);
template BasicTensor<double> make_result(Shape, std::vector<double>, std::string,
                                         std::initializer_list<const BasicTensor<double>*>,
                                         BackwardFn<double>);
template BasicTensor<float> make_result(Shape, std::vector<float>, std::string,
                                        const std::vector<const BasicTensor<float>*>&,
                                        BackwardFn<float>);
template BasicTensor<double> make_result(Shape, std::vector<double>, std::string,
                                         const std::vector<const BasicTensor<double>*>&,
                                         BackwardFn<double>);

}  // namespace detail

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace mca
