#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "seammil/core/error.hpp"
#include "seammil/core/grid.hpp"
#include "seammil/core/random.hpp"

namespace seammil {

// Optimizer groups. Backbone weights train at the base rate, everything
// added on top of it at a multiple of that rate.
enum class ParamGroup { backbone, head };

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  Buffer<T> value;
  ParamGroup group = ParamGroup::head;
  bool decay = true;  // weights decay, biases and attention vectors do not

  std::size_t numel() const { return value.size(); }
};

// Handle into a ParameterSet.
struct ParamId {
  std::size_t index = static_cast<std::size_t>(-1);
  bool valid() const { return index != static_cast<std::size_t>(-1); }
};

template <typename T>
class ParameterSet {
 public:
  ParamId add(std::string name, std::vector<int> shape, ParamGroup group, bool decay) {
    if (by_name_.contains(name)) throw ConfigError("duplicate parameter " + name);
    const auto n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                   [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    Parameter<T> p{std::move(name), std::move(shape), Buffer<T>(n, T(0)), group, decay};
    by_name_.emplace(p.name, params_.size());
    params_.push_back(std::move(p));
    return ParamId{params_.size() - 1};
  }

  Parameter<T>& operator[](ParamId id) { return params_.at(id.index); }
  const Parameter<T>& operator[](ParamId id) const { return params_.at(id.index); }

  std::span<const T> value(ParamId id) const { return params_.at(id.index).value; }
  std::span<T> value(ParamId id) { return params_.at(id.index).value; }

  ParamId find(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw ConfigError("unknown parameter " + name);
    return ParamId{it->second};
  }

  std::size_t size() const { return params_.size(); }
  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  // Zero-valued gradient buffers shaped like the parameters.
  std::vector<Buffer<T>> zeros_like() const {
    std::vector<Buffer<T>> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.numel(), T(0));
    return g;
  }

  void init_normal(ParamId id, Rng& rng, double stddev) {
    for (auto& v : params_.at(id.index).value) v = static_cast<T>(rng.normal(0.0, stddev));
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

template <typename T>
using Gradients = std::vector<Buffer<T>>;

}  // namespace seammil
