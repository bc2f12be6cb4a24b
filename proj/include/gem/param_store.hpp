#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gem/rng.hpp"
#include "gem/tensor.hpp"

namespace gem {

// Ordered, insertion-stable collection of named trainable tensors.
class ParamStore {
 public:
  Tensor add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name))
      throw std::invalid_argument("ParamStore: duplicate parameter \"" + name + "\"");
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  // Uniform in [-gain/sqrt(fan_in), +gain/sqrt(fan_in)]. Weight matrices use
  // gain sqrt(6) (variance-preserving under relu, Kaiming-style); biases use
  // gain 1.
  Tensor add_uniform(const std::string& name, Shape shape, int fan_in, Rng& rng,
                     double gain = 1.0) {
    const double bound = gain / std::sqrt(double(fan_in));
    std::vector<double> v(std::size_t(numel(shape)));
    for (double& x : v) x = rng.uniform(-bound, bound);
    return add(name, std::move(shape), std::move(v));
  }

  Tensor add_constant(const std::string& name, Shape shape, double value) {
    std::vector<double> v(std::size_t(numel(shape)), value);
    return add(name, std::move(shape), std::move(v));
  }

  Tensor add_identity(const std::string& name, int n) {
    std::vector<double> v(std::size_t(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[std::size_t(i) * n + i] = 1.0;
    return add(name, {n, n}, std::move(v));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("ParamStore: unknown parameter \"" + name + "\"");
    return entries_[it->second].second;
  }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("ParamStore: unknown parameter \"" + name + "\"");
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace gem
