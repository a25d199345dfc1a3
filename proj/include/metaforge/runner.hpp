#pragma once

// Run orchestration: builds tasks, backbone and meta-learner from a
// PipelineConfig, meta-trains, evaluates on held-out tasks and produces a
// RunReport.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaforge/config.hpp"
#include "metaforge/meta.hpp"

namespace metaforge::runner {

class RunError : public Error {
 public:
  using Error::Error;
};

// Non-finite outer loss; no report is produced.
class RunAborted : public RunError {
 public:
  explicit RunAborted(std::size_t iteration);
  std::size_t iteration() const { return iteration_; }

 private:
  std::size_t iteration_;
};

class RunCancelled : public RunError {
 public:
  using RunError::RunError;
};

struct DeviceReport {
  std::size_t logical_cores = 1;
  std::vector<std::string> modes;  // "serial", plus "parallel" with > 1 core
  std::size_t max_threads = 1;
  bool accelerator = false;
};

// cores = 0 probes the machine.
DeviceReport device_check(std::size_t cores = 0);
nlohmann::json to_json(const DeviceReport& d);

struct EvalBlock {
  std::string metric;  // "mse", "accuracy" or "contrastive"
  double pre = 0.0;    // before adaptation
  double post = 0.0;   // after eval_steps adaptation steps
  std::vector<double> curve;  // steps 0..eval_steps
};

struct RunReport {
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<double> losses;  // one per meta-iteration
  EvalBlock eval;
  double wall_seconds = 0.0;
  std::size_t parallel = 1;
  std::size_t episodes_consumed = 0;
};

nlohmann::json to_json(const RunReport& r);
RunReport report_from_json(const nlohmann::json& doc);
// Equal in everything except wall_seconds, compared bitwise.
bool same_metrics(const RunReport& a, const RunReport& b);

struct RunOptions {
  std::optional<std::uint64_t> seed;   // overrides cfg.seed
  std::optional<std::size_t> threads;  // overrides the config's thread count
  // Called after every meta-iteration with its index and outer loss.
  std::function<void(std::size_t, double)> on_iteration;
  const std::atomic<bool>* cancel = nullptr;
};

// Splits [0, n) into contiguous chunks over `threads` workers.
meta::ParallelFor parallel_for(std::size_t threads);

// Throws CompatError for configs with violations, RunAborted on divergence.
RunReport run(const PipelineConfig& cfg, const RunOptions& options = {});

// Writes through a temporary file and rename, so the target either holds
// the whole report or does not exist.
void write_report(const std::filesystem::path& path, const RunReport& report);
RunReport read_report(const std::filesystem::path& path);

// Aligned plain-text rendering of a stored report.
std::string render_report(const RunReport& report);

}  // namespace metaforge::runner
