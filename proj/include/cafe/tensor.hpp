#pragma once

// Dense row-major tensors with a small reverse-mode autograd tape.
//
// A Tensor is a shared handle to a TensorImpl. Ops in ops.hpp create new
// tensors and, when any input requires a gradient (and grad mode is on),
// record a backward closure on the output. `backward()` walks the graph in
// reverse topological order.
//
// Meta tensors carry a shape and no storage. Every op propagates meta-ness,
// which lets paper-scale models be built and shape-checked without
// allocating their weights.

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cafe {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thrown for tensor shapes that violate an op contract.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown for invalid configuration values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

[[noreturn]] void throw_shape(const std::string& what);

/// 64-byte aligned storage. Vectorized kernels take different code paths
/// for differently aligned data, so fixed alignment keeps results
/// reproducible from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool meta = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward;

  /// Gradient buffer, zero-filled on first use.
  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Scoped switch for autograd recording (thread local).
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor from(const Shape& shape, std::vector<T> values);
  static Tensor meta(const Shape& shape);
  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(int i) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return cafe::numel(impl_->shape); }
  bool is_meta() const { return impl_->meta; }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  /// Marks a leaf as requiring gradients.
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient values; empty span until backward reached this tensor.
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Backpropagates from a single-element tensor. Intermediate graph nodes
  /// are released afterwards; leaf gradients accumulate.
  void backward();

  /// Copy of the values with no autograd history.
  Tensor detach() const;

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

/// Converts between scalar types (values only).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

}  // namespace cafe
