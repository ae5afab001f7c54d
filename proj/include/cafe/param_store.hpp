#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "cafe/tensor.hpp"

namespace cafe {

enum class EntryKind { parameter, buffer };

template <typename T>
struct StoreEntry {
  std::string name;
  Tensor<T> value;
  bool trainable = false;
  EntryKind kind = EntryKind::parameter;
};

/// Named weights of one model. Parameters carry a trainable flag that drives
/// requires_grad; buffers (batch-norm statistics) are never optimized.
///
/// While a TrainableLock is alive the flags cannot change, which keeps the
/// optimizer's view of the trainable set fixed for a whole run.
template <typename T>
class ParameterStore {
 public:
  using Entry = StoreEntry<T>;
  using Snapshot = std::vector<std::vector<T>>;

  Tensor<T> add_parameter(const std::string& name, Tensor<T> value, bool trainable);
  Tensor<T> add_buffer(const std::string& name, Tensor<T> value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Entry& at(const std::string& name) const;
  Entry& at(const std::string& name);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<Tensor<T>> trainable_parameters() const;
  void set_trainable(const std::string& name, bool trainable);

  /// Number of parameter scalars whose name starts with `prefix`.
  std::int64_t parameter_count(const std::string& prefix = "", bool trainable_only = false) const;

  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

  bool locked() const { return locks_ > 0; }

  class TrainableLock {
   public:
    explicit TrainableLock(const ParameterStore& store) : store_(&store) { ++store_->locks_; }
    ~TrainableLock() {
      if (store_) --store_->locks_;
    }
    TrainableLock(TrainableLock&& o) noexcept : store_(o.store_) { o.store_ = nullptr; }
    TrainableLock(const TrainableLock&) = delete;
    TrainableLock& operator=(const TrainableLock&) = delete;
    TrainableLock& operator=(TrainableLock&&) = delete;

   private:
    const ParameterStore* store_;
  };

 private:
  Entry& insert(Entry e);

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  mutable int locks_ = 0;
};

/// Weight initialization recipe.
struct Init {
  enum class Kind { constant, normal, trunc_normal, uniform } kind = Kind::constant;
  double value = 0.0;

  static Init zeros() { return {Kind::constant, 0.0}; }
  static Init ones() { return {Kind::constant, 1.0}; }
  static Init normal(double std) { return {Kind::normal, std}; }
  /// Normal clipped to two standard deviations.
  static Init trunc_normal(double std) { return {Kind::trunc_normal, std}; }
  static Init uniform(double bound) { return {Kind::uniform, bound}; }
};

/// Creates named entries under a dotted prefix. Scopes share the store and
/// the RNG, so construction order fully determines initial values.
template <typename T>
class ParamBuilder {
 public:
  ParamBuilder(ParameterStore<T>& store, std::mt19937_64& rng, bool meta = false)
      : store_(&store), rng_(&rng), meta_(meta) {}

  ParamBuilder scope(const std::string& name) const;
  ParamBuilder frozen() const;
  bool trainable() const { return trainable_; }
  bool meta() const { return meta_; }
  const std::string& prefix() const { return prefix_; }

  Tensor<T> param(const std::string& name, const Shape& shape, Init init) const;
  Tensor<T> buffer(const std::string& name, const Shape& shape, T fill) const;

 private:
  std::string full(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }

  ParameterStore<T>* store_;
  std::mt19937_64* rng_;
  bool meta_ = false;
  bool trainable_ = true;
  std::string prefix_;
};

}  // namespace cafe
