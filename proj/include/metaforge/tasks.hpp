#pragma once

// Episodic task construction: labeled-dataset index, task transforms, lazily
// sampled and cached N-way K-shot episodes, task samplers and synthetic task
// families.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "metaforge/autograd.hpp"
#include "metaforge/random.hpp"

namespace metaforge::tasks {

class TaskError : public Error {
 public:
  using Error::Error;
};

struct LabeledDataset {
  std::size_t dim = 0;
  std::vector<double> features;  // row-major, size() x dim
  std::vector<std::int64_t> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
};

// Class index over a labeled dataset. Iteration order is item order; class
// order is ascending label.
class MetaDatasetIndex {
 public:
  explicit MetaDatasetIndex(LabeledDataset data);

  std::size_t size() const { return data_.size(); }
  std::size_t dim() const { return data_.dim; }
  const LabeledDataset& data() const { return data_; }
  std::int64_t label(std::size_t item) const { return data_.labels[item]; }
  std::span<const double> features(std::size_t item) const { return data_.row(item); }

  const std::vector<std::int64_t>& classes() const { return classes_; }
  const std::vector<std::size_t>& items_of(std::int64_t cls) const;
  const std::map<std::int64_t, std::vector<std::size_t>>& by_class() const { return by_class_; }

 private:
  LabeledDataset data_;
  std::map<std::int64_t, std::vector<std::size_t>> by_class_;
  std::vector<std::int64_t> classes_;
};

MetaDatasetIndex meta_dataset_wrap(LabeledDataset data);

struct NWays { std::size_t n; };
struct KShots { std::size_t k; };
struct LoadData {};
struct DataSplit { std::size_t t; std::size_t v; };
struct LabelFree {};
using TaskTransform = std::variant<NWays, KShots, LoadData, DataSplit, LabelFree>;

// Per-class split implied by KShots(k) and an optional DataSplit(t, v).
// Without a DataSplit, support and query both get k items. With one, k is
// the per-class pool: support gets max(1, round(k*t/(t+v))) and query the
// remainder, at least 1 when v > 0 and none when v == 0.
struct ShotSplit {
  std::size_t support;
  std::size_t query;
};
ShotSplit split_shots(std::size_t k, std::optional<DataSplit> split);

struct TaskDescription {
  std::vector<std::int64_t> classes;              // position == episode label
  std::vector<std::vector<std::size_t>> support;  // per class position
  std::vector<std::vector<std::size_t>> query;
  std::uint64_t signature = 0;
};

// Hash of the sorted (class id, item index, split flag) triples.
std::uint64_t task_signature(const TaskDescription& desc);

struct Episode {
  ag::Tensor support_x, support_y, query_x, query_y;
  std::size_t n_way = 0;
  std::size_t k_shot = 0;
  std::uint64_t signature = 0;
  bool label_free = false;
};

// Mean pairwise Euclidean distance between the class centroids of the items
// a description selects.
double diversity_score(const TaskDescription& desc, const MetaDatasetIndex& source);

enum class SamplerKind { uniform, low_diversity, high_diversity, adaptive };

std::string_view to_string(SamplerKind kind);
SamplerKind parse_sampler(std::string_view name);

// Exponential moving average of observed losses per task signature.
class LossTracker {
 public:
  static constexpr double kDecay = 0.9;

  void observe(std::uint64_t signature, double loss);
  std::optional<double> ema(std::uint64_t signature) const;
  bool empty() const { return ema_.empty(); }
  double max_ema() const;

 private:
  std::unordered_map<std::uint64_t, double> ema_;
};

// Chooses task indices. Diversity samplers rank a candidate pool (every index
// when the dataset is small, otherwise kCandidatePool uniform draws) by
// diversity score and draw uniformly from the bottom or top quartile.
// Adaptive draws a candidate with probability softmax(EMA loss / kTemperature);
// candidates without feedback use the largest EMA seen so far, and with no
// feedback at all it behaves as uniform.
class TaskSampler {
 public:
  static constexpr std::size_t kCandidatePool = 16;
  static constexpr double kTemperature = 1.0;

  using Score = std::function<double(std::size_t)>;
  using Feedback = std::function<std::optional<double>(std::size_t)>;

  TaskSampler(SamplerKind kind, std::uint64_t seed);

  SamplerKind kind() const { return kind_; }
  std::size_t next(std::size_t length, const Score& diversity, const Feedback& loss);

 private:
  std::vector<std::size_t> candidates(std::size_t length);

  SamplerKind kind_;
  Rng rng_;
};

TaskSampler sampler_select(SamplerKind kind, std::uint64_t seed);

// Lazily sampled episodes over a MetaDatasetIndex. With num_tasks >= 1 the
// dataset has num_tasks entries whose descriptions are cached on first
// access; entry i is always drawn from a generator seeded by (seed, i).
// With num_tasks == -1 the length is 1, nothing is cached and every sample()
// draws a fresh description.
class TaskDataset {
 public:
  TaskDataset(std::shared_ptr<const MetaDatasetIndex> source,
              std::vector<TaskTransform> transforms, std::int64_t num_tasks,
              std::uint64_t seed, SamplerKind sampler = SamplerKind::uniform);

  std::size_t length() const { return num_tasks_ < 0 ? 1 : static_cast<std::size_t>(num_tasks_); }
  std::int64_t num_tasks() const { return num_tasks_; }
  std::size_t cache_size() const { return cache_.size(); }
  std::size_t n_way() const { return n_way_; }
  std::size_t k_shot() const { return k_shot_; }
  std::size_t query_shots() const { return query_shots_; }
  bool label_free() const { return label_free_; }
  const MetaDatasetIndex& source() const { return *source_; }

  Episode index(std::size_t i);
  Episode sample();
  // Index chosen by the most recent sample() (0 when num_tasks == -1).
  std::size_t last_index() const { return last_index_; }

  // Description of entry i, sampled and cached if needed.
  const TaskDescription& description(std::size_t i);
  Episode materialize(const TaskDescription& desc) const;

  // Feedback for the adaptive sampler.
  void report_loss(std::uint64_t signature, double loss) { losses_.observe(signature, loss); }

 private:
  TaskDescription draw(Rng& rng) const;

  std::shared_ptr<const MetaDatasetIndex> source_;
  std::int64_t num_tasks_;
  std::uint64_t seed_;
  std::size_t n_way_ = 0;
  std::size_t k_shot_ = 0;
  std::size_t query_shots_ = 0;
  bool label_free_ = false;
  std::unordered_map<std::size_t, TaskDescription> cache_;
  Rng fresh_rng_;
  TaskSampler sampler_;
  LossTracker losses_;
  std::size_t last_index_ = 0;
};

// Drops labels: every support item becomes its own pseudo-class and the
// query set consists of the generating instances, labelled by instance.
// Idempotent.
Episode label_free(const Episode& episode);

// ---------------------------------------------------------------------------
// Synthetic task families

struct BlobsSpec {
  std::size_t classes = 20;
  std::size_t dim = 8;
  std::size_t per_class = 20;
  double centroid_spread = 10.0;  // centroid ~ N(0, spread^2 I)
  double noise = 1.0;             // item ~ N(centroid, noise^2 I)
};

struct Blobs {
  LabeledDataset data;
  std::vector<double> centroids;  // classes x dim
};

Blobs make_blobs(const BlobsSpec& spec, std::uint64_t seed);

struct SinusoidSpec {
  double amp_lo = 0.1, amp_hi = 5.0;
  double phase_lo = 0.0, phase_hi = 3.14159265358979323846;
  double x_lo = -5.0, x_hi = 5.0;
};

// Regression tasks y = A sin(x + phase).
class SinusoidFamily {
 public:
  struct Task {
    double amplitude;
    double phase;
  };

  explicit SinusoidFamily(SinusoidSpec spec = {});

  const SinusoidSpec& spec() const { return spec_; }
  Task draw(Rng& rng) const;
  static double eval(const Task& task, double x);

  // Support and query inputs drawn uniformly from the input range. With
  // forecast, support comes from the lower half and query from the upper.
  Episode episode(const Task& task, std::size_t support, std::size_t query, Rng& rng,
                  bool forecast = false) const;

 private:
  SinusoidSpec spec_;
};

}  // namespace metaforge::tasks
