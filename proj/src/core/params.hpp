#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"

namespace ts {

// Ordered, named parameter registry. Registration order is the canonical
// order for gradient accumulation, optimizer sweeps, and checkpoint layout.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Array value;
    Array adam_m;
    Array adam_v;
  };

  // Init rule for linear maps: zero-mean uniform scaled by 1/sqrt(fan_in).
  // fan_in = 0 registers a zero-initialized array (biases, gains use
  // add_constant for ones).
  void add(const std::string& name, std::vector<int> shape, int fan_in, uint64_t master_seed) {
    Array a(shape);
    if (fan_in > 0) {
      Rng rng = Rng::derive(master_seed, name);
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : a.data) v = rng.uniform(-bound, bound);
    }
    add_array(name, std::move(a));
  }

  void add_constant(const std::string& name, std::vector<int> shape, double fill) {
    add_array(name, Array::full(std::move(shape), fill));
  }

  void add_array(const std::string& name, Array a) {
    if (index_.count(name)) throw ContractError("ParamStore: duplicate parameter " + name);
    Entry e;
    e.name = name;
    e.adam_m = Array::zeros(a.shape);
    e.adam_v = Array::zeros(a.shape);
    e.value = std::move(a);
    index_[name] = static_cast<int>(entries_.size());
    entries_.push_back(std::move(e));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: unknown parameter " + name);
    return entries_[it->second];
  }
  const Entry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("ParamStore: unknown parameter " + name);
    return entries_[it->second];
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  int size() const { return static_cast<int>(entries_.size()); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const Entry& e : entries_) n += e.value.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

// One tape's leaf bindings for every parameter in a store.
struct BoundParams {
  std::unordered_map<std::string, Var> vars;

  Var operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError("BoundParams: parameter " + name + " not bound");
    return it->second;
  }
};

inline BoundParams bind_params(Tape& tape, const ParamStore& store, bool requires_grad = true) {
  BoundParams bound;
  for (const ParamStore::Entry& e : store.entries()) {
    bound.vars[e.name] = tape.leaf(e.value, requires_grad);
  }
  return bound;
}

}  // namespace ts
