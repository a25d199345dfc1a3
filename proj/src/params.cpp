#include "metaforge/params.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace metaforge {

void ParamSet::add(std::string name, ag::Tensor value) {
  if (find(name)) throw Error("parameter '" + name + "' already present");
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::optional<std::size_t> ParamSet::find(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return std::nullopt;
}

const ag::Tensor& ParamSet::at(std::string_view name) const {
  const auto i = find(name);
  if (!i) throw Error("unknown parameter '" + std::string(name) + "'");
  return values_[*i];
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& t : values_) n += t.numel();
  return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i)
    if (names_[i] != other.names_[i] || values_[i].shape() != other.values_[i].shape())
      return false;
  return true;
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a[i].data();
    const auto y = b[i].data();
    if (std::memcmp(x.data(), y.data(), x.size_bytes()) != 0) return false;
  }
  return true;
}

std::vector<double> flatten(const ParamSet& params) {
  std::vector<double> out;
  out.reserve(params.numel());
  for (const auto& t : params.tensors()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

ParamSet unflatten(const ParamSet& layout, std::span<const double> values) {
  if (values.size() != layout.numel()) {
    throw Error("unflatten: expected " + std::to_string(layout.numel()) + " values, got " +
                std::to_string(values.size()));
  }
  ParamSet out;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::size_t n = layout[i].numel();
    out.add(layout.name(i), ag::Tensor(layout[i].shape(),
                                       std::vector<double>(values.begin() + offset,
                                                           values.begin() + offset + n)));
    offset += n;
  }
  return out;
}

ParamSet detach_all(const ParamSet& params) {
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) out.add(params.name(i), params[i].detach());
  return out;
}

ParamSet track_all(const ag::Tape& tape, const ParamSet& params) {
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) out.add(params.name(i), tape.leaf(params[i]));
  return out;
}

ParamSet zeros_like(const ParamSet& params) { return full_like(params, 0.0); }

ParamSet full_like(const ParamSet& params, double value) {
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i)
    out.add(params.name(i), ag::Tensor::full(params[i].shape(), value));
  return out;
}

ParamSet axpy(double a, const ParamSet& x, const ParamSet& y) {
  if (!x.same_layout(y)) throw Error("axpy: parameter layouts differ");
  ParamSet out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto xs = x[i].data();
    const auto ys = y[i].data();
    std::vector<double> v(xs.size());
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = a * xs[j] + ys[j];
    out.add(x.name(i), ag::Tensor(x[i].shape(), std::move(v)));
  }
  return out;
}

ParamSet scaled(const ParamSet& x, double a) {
  ParamSet out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> v(x[i].data().begin(), x[i].data().end());
    for (double& e : v) e *= a;
    out.add(x.name(i), ag::Tensor(x[i].shape(), std::move(v)));
  }
  return out;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  if (!a.same_layout(b)) throw Error("max_abs_diff: parameter layouts differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].numel(); ++j)
      m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

}  // namespace metaforge
