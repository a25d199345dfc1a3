#pragma once

// Pipeline configuration document: one module id per slot, modifiers,
// hyperparameters, seed and thread count, stored as JSON.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaforge/error.hpp"
#include "metaforge/registry.hpp"

namespace metaforge {

// Carries either a JSON pointer ("/hyper/n_way") or a byte offset into the
// document, whichever locates the problem.
class ConfigError : public Error {
 public:
  ConfigError(std::string message, std::string pointer);
  ConfigError(std::string message, std::size_t byte_offset);

  const std::string& pointer() const { return pointer_; }
  std::optional<std::size_t> byte_offset() const { return offset_; }

 private:
  std::string pointer_;
  std::optional<std::size_t> offset_;
};

struct Hyper {
  std::string algorithm;  // empty: family default
  std::size_t n_way = 5;
  std::size_t k_shot = 5;
  std::size_t query_shots = 0;  // 0: same as k_shot
  std::size_t split_t = 0;      // DataSplit(t, v); t = 0 disables it
  std::size_t split_v = 0;
  double lr_alpha = 0.01;
  double lr_beta = 0.001;
  std::size_t inner_steps = 1;
  bool first_order = false;
  double lambda = 1.0;
  std::size_t cg_iters = 100;
  double cg_tol = 1e-10;
  double sigma = 0.1;
  std::size_t es_samples = 64;
  bool antithetic = true;
  std::size_t meta_batch = 4;
  std::size_t iterations = 100;
  std::size_t eval_tasks = 100;
  std::size_t eval_steps = 10;
  std::vector<std::size_t> hidden = {40, 40};
  std::string activation = "tanh";
  std::size_t conv_blocks = 4;
  std::size_t conv_channels = 8;
  std::size_t embed_dim = 16;
  std::string optimizer = "adam";
  std::size_t num_classes = 30;
  std::size_t per_class = 20;
  std::size_t feature_dim = 16;
  double blob_spread = 10.0;
  double blob_noise = 1.0;
  std::int64_t num_tasks = -1;
  std::string sampler = "uniform";
  std::string data_path;

  bool operator==(const Hyper&) const = default;
};

struct PipelineConfig {
  // Canonical module id per slot, indexed by Slot.
  std::array<std::string, 6> slots;
  bool label_free = false;  // the additive LabelFree modifier
  Hyper hyper;
  std::uint64_t seed = 0;
  std::size_t parallel = 1;  // worker threads; > 1 needs the parallel method

  const std::string& slot(Slot s) const { return slots[static_cast<std::size_t>(s)]; }
  std::string& slot(Slot s) { return slots[static_cast<std::size_t>(s)]; }
  bool operator==(const PipelineConfig&) const = default;
};

// Names of all hyperparameters in document order.
std::vector<std::string> hyper_names();

PipelineConfig config_from_json(const nlohmann::json& doc);
PipelineConfig parse_config(std::string_view text);
// Canonical form: every key present, slots as canonical ids, keys sorted.
nlohmann::json config_to_json(const PipelineConfig& cfg);
std::string serialize_config(const PipelineConfig& cfg);

// Sets one hyperparameter from a JSON value with the same checks as parsing.
void set_hyper(Hyper& hyper, const std::string& name, const nlohmann::json& value);

PipelineConfig load_config_file(const std::string& path);

}  // namespace metaforge
