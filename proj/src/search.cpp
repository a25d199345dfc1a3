#include "metaforge/search.hpp"

#include <algorithm>
#include <cmath>

#include "metaforge/random.hpp"

namespace metaforge::search {

using nlohmann::json;

void SearchSpace::validate() const {
  if (axes.empty()) throw SearchError("search space: no axes");
  for (const auto& a : axes) {
    if (a.name.empty()) throw SearchError("search space: unnamed axis");
    const bool range = a.lo && a.hi;
    if (a.values.empty() && !range)
      throw SearchError("search space: axis '" + a.name + "' has no values");
    if (range && !(*a.lo <= *a.hi))
      throw SearchError("search space: axis '" + a.name + "' has lo > hi");
    if (range && a.log && !(*a.lo > 0.0))
      throw SearchError("search space: log axis '" + a.name + "' needs lo > 0");
    if (mode == Mode::grid && a.values.empty())
      throw SearchError("search space: grid axis '" + a.name + "' needs a value list");
  }
  if (mode == Mode::random && n < 1) throw SearchError("search space: random mode needs n >= 1");
}

SearchSpace parse_space(const json& doc) {
  if (!doc.is_object()) throw SearchError("search space: expected an object");
  SearchSpace s;
  const std::string mode = doc.value("mode", "grid");
  if (mode == "grid") {
    s.mode = SearchSpace::Mode::grid;
  } else if (mode == "random") {
    s.mode = SearchSpace::Mode::random;
  } else {
    throw SearchError("search space: unknown mode '" + mode + "'");
  }
  if (doc.contains("n")) {
    if (!doc.at("n").is_number_integer() || doc.at("n").get<std::int64_t>() < 1)
      throw SearchError("search space: n must be a positive integer");
    s.n = doc.at("n").get<std::size_t>();
  }
  if (doc.contains("seed")) {
    if (!doc.at("seed").is_number_integer() || doc.at("seed").get<std::int64_t>() < 0)
      throw SearchError("search space: seed must be a non-negative integer");
    s.seed = doc.at("seed").get<std::uint64_t>();
  }
  if (!doc.contains("axes") || !doc.at("axes").is_object())
    throw SearchError("search space: 'axes' must be an object");
  for (const auto& [name, spec] : doc.at("axes").items()) {
    Axis a;
    a.name = name;
    if (spec.is_array()) {
      a.values.assign(spec.begin(), spec.end());
    } else if (spec.is_object() && spec.contains("lo") && spec.contains("hi") &&
               spec.at("lo").is_number() && spec.at("hi").is_number()) {
      a.lo = spec.at("lo").get<double>();
      a.hi = spec.at("hi").get<double>();
      a.log = spec.value("log", false);
      a.integer = spec.value("integer", false);
    } else {
      throw SearchError("search space: axis '" + name + "' must be a list or {lo, hi}");
    }
    s.axes.push_back(std::move(a));
  }
  s.validate();
  return s;
}

std::vector<json> enumerate(const SearchSpace& space) {
  space.validate();
  std::vector<json> out;
  if (space.mode == SearchSpace::Mode::grid) {
    std::vector<std::size_t> idx(space.axes.size(), 0);
    while (true) {
      json p = json::object();
      for (std::size_t i = 0; i < space.axes.size(); ++i)
        p[space.axes[i].name] = space.axes[i].values[idx[i]];
      out.push_back(std::move(p));
      std::size_t k = space.axes.size();
      while (k > 0) {
        --k;
        if (++idx[k] < space.axes[k].values.size()) break;
        idx[k] = 0;
        if (k == 0) return out;
      }
      if (space.axes.empty()) return out;
    }
  }
  Rng rng(space.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t draw = 0; draw < space.n; ++draw) {
    json p = json::object();
    for (const auto& a : space.axes) {
      if (!a.values.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, a.values.size() - 1);
        p[a.name] = a.values[pick(rng)];
        continue;
      }
      const double u = unit(rng);
      double v = a.log ? std::exp(std::log(*a.lo) + u * (std::log(*a.hi) - std::log(*a.lo)))
                       : *a.lo + u * (*a.hi - *a.lo);
      if (a.integer) {
        p[a.name] = static_cast<std::int64_t>(std::llround(v));
      } else {
        p[a.name] = v;
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<Result> param_search(const SearchSpace& space,
                                 const std::function<Outcome(const json&)>& runner) {
  std::vector<Result> results;
  for (const auto& point : enumerate(space)) {
    Result r;
    r.point = point;
    try {
      Outcome o = runner(point);
      if (!std::isfinite(o.score)) throw SearchError("non-finite score");
      r.score = o.score;
      r.report = std::move(o.report);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    results.push_back(std::move(r));
  }
  std::stable_sort(results.begin(), results.end(), [](const Result& a, const Result& b) {
    if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
    return a.score && *a.score < *b.score;
  });
  return results;
}

}  // namespace metaforge::search
