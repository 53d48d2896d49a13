#include "mcm/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

MCM_BEGIN_NAMESPACE

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::span<Scalar> grad_sink(TensorImpl& impl) {
  if (!impl.requires_grad) return {};
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), Scalar{0});
  return impl.grad;
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;
thread_local MacCounter* g_mac_counter = nullptr;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<Scalar> data,
                                              bool requires_grad) {
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Scalar{0}, requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  std::vector<Scalar> data(shape_numel(shape), value);
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> data, bool requires_grad) {
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return wrap(make_impl(Shape{1}, {value}, requires_grad));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::size_t Tensor::size(int axis) const {
  const auto& s = shape();
  const int rank = static_cast<int>(s.size());
  const int a = axis < 0 ? rank + axis : axis;
  if (a < 0 || a >= rank) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(a)];
}

std::span<const Scalar> Tensor::data() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

std::span<Scalar> Tensor::mutable_data() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item() needs a one-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

Scalar Tensor::value(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw IndexError("index rank does not match " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw IndexError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ContractError("use of an undefined tensor");
  if (impl_->node) throw ContractError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

std::span<const Scalar> Tensor::grad() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

std::span<Scalar> Tensor::mutable_grad() {
  if (!has_grad()) return {};
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_ || !impl_->requires_grad) return;
  impl_->grad.assign(impl_->data.size(), Scalar{0});
}

void Tensor::clear_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return wrap(make_impl(impl_->shape, impl_->data, false));
}

void Tensor::backward() const {
  if (!impl_) throw ContractError("backward on an undefined tensor");
  if (impl_->data.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(impl_->shape));
  }
  if (!impl_->requires_grad) {
    throw ContractError("loss is not connected to any differentiable tensor");
  }

  // Post-order DFS gives a topological order (inputs before consumers).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node_impl, next] = stack.back();
    const auto* node = node_impl->node.get();
    if (node && next < node->inputs.size()) {
      detail::TensorImpl* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node_impl);
    stack.pop_back();
  }

  for (auto* t : order) {
    if (t->node) t->grad.assign(t->data.size(), Scalar{0});
  }
  auto root = detail::grad_sink(*impl_);
  root[0] += Scalar{1};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = *it;
    if (!t->node) continue;
    t->node->backward(t->grad);
    std::vector<Scalar>().swap(t->grad);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

MacCounter::MacCounter() : previous_(g_mac_counter) { g_mac_counter = this; }
MacCounter::~MacCounter() { g_mac_counter = previous_; }

MacCounter* MacCounter::active() { return g_mac_counter; }

std::uint64_t MacCounter::total() const {
  std::uint64_t t = 0;
  for (const auto& [tag, n] : counts_) t += n;
  return t;
}

std::uint64_t MacCounter::total_with_suffix(const std::string& suffix) const {
  std::uint64_t t = 0;
  for (const auto& [tag, n] : counts_) {
    if (tag.size() >= suffix.size() &&
        tag.compare(tag.size() - suffix.size(), suffix.size(), suffix) == 0) {
      t += n;
    }
  }
  return t;
}

void MacCounter::add(std::uint64_t macs) {
  counts_[tags_.empty() ? std::string("untagged") : tags_.back()] += macs;
}

void MacCounter::push_tag(std::string tag) { tags_.push_back(std::move(tag)); }

void MacCounter::pop_tag() {
  if (!tags_.empty()) tags_.pop_back();
}

MacTag::MacTag(std::string tag) {
  if (auto* c = MacCounter::active()) c->push_tag(std::move(tag));
}

MacTag::~MacTag() {
  if (auto* c = MacCounter::active()) c->pop_tag();
}

MCM_END_NAMESPACE
