#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metaforge/autograd.hpp"

namespace metaforge {

// Ordered, uniquely named collection of tensors (network parameters,
// gradients, per-parameter learning rates).
class ParamSet {
 public:
  void add(std::string name, ag::Tensor value);

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  const ag::Tensor& operator[](std::size_t i) const { return values_[i]; }
  ag::Tensor& operator[](std::size_t i) { return values_[i]; }
  std::span<const ag::Tensor> tensors() const { return values_; }

  std::optional<std::size_t> find(std::string_view name) const;
  const ag::Tensor& at(std::string_view name) const;

  // Total scalar count.
  std::size_t numel() const;
  // Same names and shapes, in the same order.
  bool same_layout(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<ag::Tensor> values_;
};

// Bitwise equality of names, shapes and values.
bool bitwise_equal(const ParamSet& a, const ParamSet& b);

std::vector<double> flatten(const ParamSet& params);
ParamSet unflatten(const ParamSet& layout, std::span<const double> values);

ParamSet detach_all(const ParamSet& params);
ParamSet track_all(const ag::Tape& tape, const ParamSet& params);
ParamSet zeros_like(const ParamSet& params);
ParamSet full_like(const ParamSet& params, double value);

// Elementwise helpers on constant parameter sets.
ParamSet axpy(double a, const ParamSet& x, const ParamSet& y);  // a*x + y
ParamSet scaled(const ParamSet& x, double a);
double max_abs_diff(const ParamSet& a, const ParamSet& b);

}  // namespace metaforge
