#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "showcase/error.hpp"

namespace showcase::diff {

/// Dense row-major matrix of doubles. Vectors are 1 x n; scalars are 1 x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) throw NumericalError("tensor value count does not match shape");
  }

  template <typename T>
  static Tensor row_vector(std::span<const T> v) {
    Tensor t(1, v.size());
    for (std::size_t i = 0; i < v.size(); ++i) t.values_[i] = static_cast<double>(v[i]);
    return t;
  }
  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::span<const double> row(std::size_t r) const { return std::span<const double>(values_).subspan(r * cols_, cols_); }
  std::span<double> row(std::size_t r) { return std::span<double>(values_).subspan(r * cols_, cols_); }

  double item() const {
    if (values_.size() != 1) throw NumericalError("item() on non-scalar tensor");
    return values_[0];
  }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.values_ == b.values_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

struct Parameter {
  Tensor value;
  Tensor grad;
};

/// Named parameters in deterministic (lexicographic) order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Tensor init) {
    Tensor grad(init.rows(), init.cols());
    auto [it, inserted] = params_.emplace(name, Parameter{std::move(init), std::move(grad)});
    if (!inserted) throw NumericalError("duplicate parameter name: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw NumericalError("unknown parameter: " + name);
    return it->second;
  }
  const Parameter& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw NumericalError("unknown parameter: " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.grad.fill(0.0);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.size();
    return n;
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.params_.size() != b.params_.size()) return false;
    auto ib = b.params_.begin();
    for (const auto& [name, p] : a.params_) {
      if (name != ib->first || !(p.value == ib->second.value)) return false;
      ++ib;
    }
    return true;
  }

 private:
  std::map<std::string, Parameter> params_;
};

}  // namespace showcase::diff
