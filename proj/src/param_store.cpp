#include "cafe/param_store.hpp"

#include <cmath>

namespace cafe {

template <typename T>
typename ParameterStore<T>::Entry& ParameterStore<T>::insert(Entry e) {
  if (contains(e.name)) throw ConfigError("duplicate parameter name: " + e.name);
  index_.emplace(e.name, entries_.size());
  entries_.push_back(std::move(e));
  return entries_.back();
}

template <typename T>
Tensor<T> ParameterStore<T>::add_parameter(const std::string& name, Tensor<T> value, bool trainable) {
  value.set_requires_grad(trainable);
  return insert({name, value, trainable, EntryKind::parameter}).value;
}

template <typename T>
Tensor<T> ParameterStore<T>::add_buffer(const std::string& name, Tensor<T> value) {
  value.set_requires_grad(false);
  return insert({name, value, false, EntryKind::buffer}).value;
}

template <typename T>
const typename ParameterStore<T>::Entry& ParameterStore<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
typename ParameterStore<T>::Entry& ParameterStore<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second];
}

template <typename T>
std::vector<Tensor<T>> ParameterStore<T>::trainable_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& e : entries_)
    if (e.kind == EntryKind::parameter && e.trainable) out.push_back(e.value);
  return out;
}

template <typename T>
void ParameterStore<T>::set_trainable(const std::string& name, bool trainable) {
  if (locked()) throw std::logic_error("trainable flags are locked while an optimizer is active");
  auto& e = at(name);
  if (e.kind != EntryKind::parameter) throw ConfigError("buffers cannot be trainable: " + name);
  e.trainable = trainable;
  e.value.set_requires_grad(trainable);
}

template <typename T>
std::int64_t ParameterStore<T>::parameter_count(const std::string& prefix, bool trainable_only) const {
  std::int64_t n = 0;
  for (const auto& e : entries_) {
    if (e.kind != EntryKind::parameter) continue;
    if (trainable_only && !e.trainable) continue;
    if (e.name.compare(0, prefix.size(), prefix) != 0) continue;
    n += e.value.numel();
  }
  return n;
}

template <typename T>
typename ParameterStore<T>::Snapshot ParameterStore<T>::snapshot() const {
  Snapshot s;
  s.reserve(entries_.size());
  for (const auto& e : entries_) s.emplace_back(e.value.data().begin(), e.value.data().end());
  return s;
}

template <typename T>
void ParameterStore<T>::restore(const Snapshot& snap) {
  if (snap.size() != entries_.size()) throw ConfigError("snapshot does not match parameter store");
  for (std::size_t i = 0; i < snap.size(); ++i) {
    auto d = entries_[i].value.data();
    if (snap[i].size() != d.size()) throw ConfigError("snapshot size mismatch for " + entries_[i].name);
    std::copy(snap[i].begin(), snap[i].end(), d.begin());
  }
}

template <typename T>
ParamBuilder<T> ParamBuilder<T>::scope(const std::string& name) const {
  ParamBuilder b = *this;
  b.prefix_ = full(name);
  return b;
}

template <typename T>
ParamBuilder<T> ParamBuilder<T>::frozen() const {
  ParamBuilder b = *this;
  b.trainable_ = false;
  return b;
}

template <typename T>
Tensor<T> ParamBuilder<T>::param(const std::string& name, const Shape& shape, Init init) const {
  if (meta_) return store_->add_parameter(full(name), Tensor<T>::meta(shape), trainable_);
  auto t = Tensor<T>::zeros(shape);
  auto d = t.data();
  switch (init.kind) {
    case Init::Kind::constant:
      std::fill(d.begin(), d.end(), static_cast<T>(init.value));
      break;
    case Init::Kind::normal: {
      std::normal_distribution<double> n(0.0, init.value);
      for (auto& v : d) v = static_cast<T>(n(*rng_));
      break;
    }
    case Init::Kind::trunc_normal: {
      std::normal_distribution<double> n(0.0, init.value);
      for (auto& v : d) {
        double s = n(*rng_);
        while (std::abs(s) > 2.0 * init.value) s = n(*rng_);
        v = static_cast<T>(s);
      }
      break;
    }
    case Init::Kind::uniform: {
      std::uniform_real_distribution<double> u(-init.value, init.value);
      for (auto& v : d) v = static_cast<T>(u(*rng_));
      break;
    }
  }
  return store_->add_parameter(full(name), t, trainable_);
}

template <typename T>
Tensor<T> ParamBuilder<T>::buffer(const std::string& name, const Shape& shape, T fill) const {
  if (meta_) return store_->add_buffer(full(name), Tensor<T>::meta(shape));
  return store_->add_buffer(full(name), Tensor<T>::full(shape, fill));
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class ParamBuilder<float>;
template class ParamBuilder<double>;

}  // namespace cafe
