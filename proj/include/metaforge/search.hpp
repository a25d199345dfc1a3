#pragma once

// Hyperparameter search over grid or random draws.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaforge/error.hpp"

namespace metaforge::search {

class SearchError : public Error {
 public:
  using Error::Error;
};

// Either an explicit value list or a numeric range. Grid mode needs lists;
// random mode draws uniformly from a list or from [lo, hi] (log-uniform
// when log is set, rounded when integer is set).
struct Axis {
  std::string name;
  std::vector<nlohmann::json> values;
  std::optional<double> lo, hi;
  bool log = false;
  bool integer = false;
};

struct SearchSpace {
  enum class Mode { grid, random };
  std::vector<Axis> axes;
  Mode mode = Mode::grid;
  std::size_t n = 1;        // random draws
  std::uint64_t seed = 0;   // random mode

  void validate() const;
};

// {"mode": "grid"|"random", "n": 10, "seed": 1, "axes": {"lr_alpha": [..] |
//  {"lo": .., "hi": .., "log": bool, "integer": bool}}}
SearchSpace parse_space(const nlohmann::json& doc);

// Every point as an object {axis name: value}. Grid order: last axis fastest.
std::vector<nlohmann::json> enumerate(const SearchSpace& space);

struct Outcome {
  double score = 0.0;  // lower is better
  nlohmann::json report;
};

struct Result {
  nlohmann::json point;
  std::optional<double> score;  // empty when the run failed
  std::string error;
  nlohmann::json report;
};

// Evaluates every point; runner failures are recorded and the search goes
// on. Results sort by ascending score with failures last; ties keep
// evaluation order.
std::vector<Result> param_search(const SearchSpace& space,
                                 const std::function<Outcome(const nlohmann::json&)>& runner);

}  // namespace metaforge::search
