#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

/// Named learnable arrays, kept in insertion order.
template <typename T>
class ModelParams {
 public:
  void add(const std::string& name, Array<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Array<T>& at(const std::string& name) const { return entries_[lookup(name)].second; }
  Array<T>& at(const std::string& name) { return entries_[lookup(name)].second; }

  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += e.second.size();
    return total;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  friend bool operator==(const ModelParams& a, const ModelParams& b) { return a.entries_ == b.entries_; }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Array<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Turns stored parameters into graph leaves. Asking twice for one name
/// returns the same leaf, which is how weight sharing is expressed.
template <typename T>
class ParamBinder {
 public:
  using value_type = T;

  explicit ParamBinder(const ModelParams<T>& params, bool trainable = true)
      : params_(&params), trainable_(trainable) {}

  /// Binder over already-built tensors; unknown names are an error.
  explicit ParamBinder(std::map<std::string, Tensor<T>> preset) : bound_(std::move(preset)) {}

  Tensor<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    if (!params_) throw ContractError("unknown parameter: " + name);
    const Array<T>& value = params_->at(name);
    auto t = trainable_ ? Tensor<T>::leaf(value) : Tensor<T>::constant(value);
    bound_.emplace(name, t);
    return t;
  }

  const std::map<std::string, Tensor<T>>& bound() const noexcept { return bound_; }

 private:
  const ModelParams<T>* params_ = nullptr;
  bool trainable_ = false;
  std::map<std::string, Tensor<T>> bound_;
};

/// Deterministic parameter initializer.
template <typename T>
class ParamInit {
 public:
  ParamInit(ModelParams<T>& params, std::uint64_t seed) : params_(&params), rng_(seed) {}

  /// Convolution kernel [out×in×kh×kw] with He-normal weights and a zero bias.
  void conv(const std::string& prefix, std::size_t out, std::size_t in, std::size_t kh, std::size_t kw,
            bool bias = true) {
    params_->add(prefix + ".w", normal(Shape{out, in, kh, kw}, std::sqrt(2.0 / static_cast<double>(in * kh * kw))));
    if (bias) params_->add(prefix + ".b", Array<T>(Shape{out}));
  }

  /// Dense [in×out] matrix with Xavier-normal weights, optionally with a bias.
  void linear(const std::string& prefix, std::size_t in, std::size_t out, bool bias) {
    const std::string wname = bias ? prefix + ".w" : prefix;
    params_->add(wname, normal(Shape{in, out}, std::sqrt(2.0 / static_cast<double>(in + out))));
    if (bias) params_->add(prefix + ".b", Array<T>(Shape{out}));
  }

  void norm(const std::string& prefix, std::size_t channels) {
    params_->add(prefix + ".gamma", Array<T>(Shape{channels}, T{1}));
    params_->add(prefix + ".beta", Array<T>(Shape{channels}));
  }

  Array<T> normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Array<T> a(std::move(shape));
    for (auto& v : a.data) v = static_cast<T>(dist(rng_));
    return a;
  }

  std::mt19937_64& rng() noexcept { return rng_; }

 private:
  ModelParams<T>* params_;
  std::mt19937_64 rng_;
};

}  // namespace lpat
