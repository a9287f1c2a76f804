#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tssam/autograd.hpp"

namespace tssam {

/// Learnable arrays are `parameter`s; batch-norm running statistics are `buffer`s
/// (stored and checkpointed, never counted, never touched by the optimizer).
enum class EntryKind { parameter, buffer };

template <class T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  bool frozen = false;
  EntryKind kind = EntryKind::parameter;

  bool trainable() const noexcept { return kind == EntryKind::parameter && !frozen; }
};

/// Insertion-ordered, name-unique collection of model arrays.
template <class T>
class ParamStore {
 public:
  ParamEntry<T>& add(std::string name, Tensor<T> value, bool frozen, EntryKind kind = EntryKind::parameter) {
    if (name.empty() || name.find_first_of(" \t\r\n=") != std::string::npos)
      throw ConfigError("invalid parameter name '" + name + "'");
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.push_back(ParamEntry<T>{std::move(name), std::move(value), frozen, kind});
    return entries_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamEntry<T>& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second];
  }
  const ParamEntry<T>& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return entries_[it->second];
  }

  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }

  std::vector<ParamEntry<T>>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.frozen, e.kind);
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto &x = a.entries_[i], &y = b.entries_[i];
      if (x.name != y.name || x.frozen != y.frozen || x.kind != y.kind || !bit_identical(x.value, y.value))
        return false;
    }
    return true;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class CountFilter { all, trainable, frozen };

/// Element count over `parameter` entries matching the filter.
template <class T>
std::size_t count_parameters(const ParamStore<T>& store, CountFilter filter = CountFilter::all) {
  std::size_t n = 0;
  for (const auto& e : store.entries()) {
    if (e.kind != EntryKind::parameter) continue;
    if (filter == CountFilter::trainable && e.frozen) continue;
    if (filter == CountFilter::frozen && !e.frozen) continue;
    n += e.value.numel();
  }
  return n;
}

/// Parameter counts grouped by the first dotted component of each name.
template <class T>
std::map<std::string, std::size_t> count_by_module(const ParamStore<T>& store) {
  std::map<std::string, std::size_t> out;
  for (const auto& e : store.entries()) {
    if (e.kind != EntryKind::parameter) continue;
    out[e.name.substr(0, e.name.find('.'))] += e.value.numel();
  }
  return out;
}

enum class Mode { train, eval };

/// Binds store entries onto a tape for one forward pass. Trainable parameters
/// become gradient-carrying leaves; frozen ones enter as constants.
template <class T>
class Context {
 public:
  Context(Tape<T>& tape, ParamStore<T>& store, Mode mode) : tape_(tape), store_(store), mode_(mode) {}

  Var<T> param(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto& e = store_.entry(name);
    if (e.kind != EntryKind::parameter) throw ConfigError("'" + name + "' is a buffer, not a parameter");
    auto v = tape_.leaf(e.value, e.trainable());
    bound_.emplace(name, v);
    order_.push_back(name);
    return v;
  }

  Tensor<T>& buffer(const std::string& name) {
    auto& e = store_.entry(name);
    if (e.kind != EntryKind::buffer) throw ConfigError("'" + name + "' is a parameter, not a buffer");
    return e.value;
  }

  bool training() const noexcept { return mode_ == Mode::train; }
  Mode mode() const noexcept { return mode_; }
  Tape<T>& tape() noexcept { return tape_; }
  ParamStore<T>& store() noexcept { return store_; }

  /// Gradients of every trainable parameter bound so far, after tape.backward().
  std::vector<std::pair<std::string, Tensor<T>>> gradients() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& name : order_) {
      const auto v = bound_.at(name);
      if (!tape_.requires_grad(v)) continue;
      out.emplace_back(name, tape_.grad(v));
    }
    return out;
  }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  Mode mode_;
  std::unordered_map<std::string, Var<T>> bound_;
  std::vector<std::string> order_;
};

}  // namespace tssam
