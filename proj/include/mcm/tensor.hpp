#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mcm/config.hpp"
#include "mcm/errors.hpp"

MCM_BEGIN_NAMESPACE

using Shape = std::vector<std::size_t>;
using IndexList = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl;

// One recorded primitive application. `backward` reads the output gradient
// and accumulates into the gradients of the captured inputs.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const Scalar> grad_out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

// Gradient buffer of `impl`, allocated on first use. Empty when the tensor
// does not take gradients.
std::span<Scalar> grad_sink(TensorImpl& impl);

}  // namespace detail

// Dense row-major tensor with shared-handle semantics: copies alias the same
// storage and differentiation node, like a framework tensor handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> data, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  // Extent of `axis`; negative values count from the back.
  std::size_t size(int axis) const;

  std::span<const Scalar> data() const;
  // Direct write access, meant for leaves (initialisation, optimiser, loading).
  std::span<Scalar> mutable_data();
  Scalar item() const;
  Scalar value(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const Scalar> grad() const;
  std::span<Scalar> mutable_grad();
  // Sets the gradient to zeros, allocating it if needed.
  void zero_grad();
  void clear_grad();

  // New leaf holding a copy of the values and no history.
  Tensor detach() const;

  // Reverse-mode pass from a scalar loss. Leaf gradients accumulate.
  void backward() const;

  const detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Multiply-accumulate accounting for forward matmuls. When enabled, every
// forward matmul adds m*k*n*batch to the counter of the innermost active tag.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  const std::map<std::string, std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total() const;
  // Sum over tags that end with `suffix`.
  std::uint64_t total_with_suffix(const std::string& suffix) const;

  void add(std::uint64_t macs);
  void push_tag(std::string tag);
  void pop_tag();

  static MacCounter* active();

 private:
  std::map<std::string, std::uint64_t> counts_;
  std::vector<std::string> tags_;
  MacCounter* previous_;
};

class MacTag {
 public:
  explicit MacTag(std::string tag);
  ~MacTag();
  MacTag(const MacTag&) = delete;
  MacTag& operator=(const MacTag&) = delete;
};

MCM_END_NAMESPACE
