#pragma once

#include <map>
#include <string>
#include <vector>

#include "moss/tensor.hpp"

namespace moss {

template <class T>
struct ParamEntry {
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Name -> gradient accumulator, used for per-worker buffers that are merged
/// into a ParamStore in a fixed order.
template <class T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Named learnable parameters and their gradients. Iteration order is the
/// lexicographic name order, which makes every traversal deterministic.
template <class T>
class ParamStore {
 public:
  ParamEntry<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    Tensor<T> grad(value.shape());
    auto [it, inserted] = entries_.insert_or_assign(name, ParamEntry<T>{std::move(value), std::move(grad), trainable});
    (void)inserted;
    return it->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  ParamEntry<T>& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  const ParamEntry<T>& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
  Tensor<T>& grad(const std::string& name) { return entry(name).grad; }
  const Tensor<T>& grad(const std::string& name) const { return entry(name).grad; }

  void zero_grads() {
    for (auto& [_, e] : entries_) e.grad.fill(T{0});
  }

  /// grad += g for every named entry in g.
  void accumulate(const Gradients<T>& g, T scale = T{1}) {
    for (const auto& [name, t] : g) {
      auto& dst = grad(name);
      if (dst.shape() != t.shape()) {
        throw DimensionError("gradient for '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                             to_string(dst.shape()));
      }
      for (std::size_t i = 0; i < t.size(); ++i) dst[i] += scale * t[i];
    }
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : entries_) out.push_back(n);
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) {
      if (e.trainable) n += e.value.size();
    }
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  bool operator==(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (const auto& [n, e] : entries_) {
      auto it = other.entries_.find(n);
      if (it == other.entries_.end() || !(it->second.value == e.value) || it->second.trainable != e.trainable) {
        return false;
      }
    }
    return true;
  }

 private:
  std::map<std::string, ParamEntry<T>> entries_;
};

}  // namespace moss
