#include "cafe/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace cafe {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void throw_shape(const std::string& what) { throw ShapeError(what); }

namespace {
thread_local bool grad_enabled = true;
}

bool GradMode::enabled() { return grad_enabled; }
void GradMode::set_enabled(bool on) { grad_enabled = on; }

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return full(shape, T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  for (auto d : shape)
    if (d < 0) throw_shape("negative dimension in " + cafe::to_string(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = shape;
  impl->data.assign(static_cast<std::size_t>(cafe::numel(shape)), value);
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values) {
  if (static_cast<std::int64_t>(values.size()) != cafe::numel(shape))
    throw_shape("value count " + std::to_string(values.size()) + " does not match shape " +
                cafe::to_string(shape));
  auto impl = std::make_shared<Impl>();
  impl->shape = shape;
  impl->data.assign(values.begin(), values.end());
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::meta(const Shape& shape) {
  auto impl = std::make_shared<Impl>();
  impl->shape = shape;
  impl->meta = true;
  return Tensor(std::move(impl));
}

template <typename T>
std::int64_t Tensor<T>::dim(int i) const {
  const int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r) throw_shape("dim index out of range for " + cafe::to_string(shape()));
  return impl_->shape[static_cast<std::size_t>(i)];
}

template <typename T>
T Tensor<T>::item() const {
  if (is_meta() || impl_->data.size() != 1) throw_shape("item() needs a one-element tensor");
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
void Tensor<T>::backward() {
  if (is_meta()) throw_shape("backward() on a meta tensor");
  if (impl_->data.size() != 1) throw_shape("backward() needs a one-element tensor");
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> seen;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (Impl* node : order) {
    if (node->backward) {
      node->backward = nullptr;
      node->parents.clear();
      if (node != impl_.get()) node->grad.clear();
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  if (is_meta()) return meta(shape());
  auto impl = std::make_shared<Impl>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  if (x.is_meta()) return Tensor<To>::meta(x.shape());
  std::vector<To> v(x.data().begin(), x.data().end());
  return Tensor<To>::from(x.shape(), std::move(v));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace cafe
