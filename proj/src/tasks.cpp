#include "metaforge/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <tuple>

namespace metaforge::tasks {

namespace {

constexpr std::uint64_t kLabelFreeTag = 0x6c6162656c667265ULL;

std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// First m entries of a partial Fisher-Yates shuffle.
std::vector<std::size_t> choose(Rng& rng, std::vector<std::size_t> pool, std::size_t m) {
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  return pool;
}

ag::Tensor gather_rows(const MetaDatasetIndex& src, const std::vector<std::size_t>& items) {
  std::vector<double> data;
  data.reserve(items.size() * src.dim());
  for (std::size_t item : items) {
    const auto row = src.features(item);
    data.insert(data.end(), row.begin(), row.end());
  }
  return ag::Tensor({items.size(), src.dim()}, std::move(data));
}

}  // namespace

MetaDatasetIndex::MetaDatasetIndex(LabeledDataset data) : data_(std::move(data)) {
  if (data_.size() == 0) throw TaskError("meta dataset: empty dataset");
  if (data_.dim == 0) throw TaskError("meta dataset: feature dimension is 0");
  if (data_.features.size() != data_.size() * data_.dim)
    throw TaskError("meta dataset: feature buffer holds " + std::to_string(data_.features.size()) +
                    " values, expected " + std::to_string(data_.size() * data_.dim));
  for (std::size_t i = 0; i < data_.size(); ++i) by_class_[data_.labels[i]].push_back(i);
  for (const auto& [cls, items] : by_class_) classes_.push_back(cls);
}

const std::vector<std::size_t>& MetaDatasetIndex::items_of(std::int64_t cls) const {
  const auto it = by_class_.find(cls);
  if (it == by_class_.end()) throw TaskError("meta dataset: unknown class " + std::to_string(cls));
  return it->second;
}

MetaDatasetIndex meta_dataset_wrap(LabeledDataset data) { return MetaDatasetIndex(std::move(data)); }

ShotSplit split_shots(std::size_t k, std::optional<DataSplit> split) {
  if (!split) return {k, k};
  const double t = static_cast<double>(split->t), v = static_cast<double>(split->v);
  const auto support = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(static_cast<double>(k) * t / (t + v))));
  if (split->v == 0) return {support, 0};
  return {support, std::max<std::size_t>(1, k > support ? k - support : 0)};
}

std::uint64_t task_signature(const TaskDescription& desc) {
  std::vector<std::tuple<std::int64_t, std::size_t, int>> triples;
  for (std::size_t c = 0; c < desc.classes.size(); ++c) {
    for (std::size_t item : desc.support[c]) triples.emplace_back(desc.classes[c], item, 0);
    for (std::size_t item : desc.query[c]) triples.emplace_back(desc.classes[c], item, 1);
  }
  std::sort(triples.begin(), triples.end());
  StableHash h;
  for (const auto& [cls, item, flag] : triples)
    h.add(static_cast<std::uint64_t>(cls)).add(static_cast<std::uint64_t>(item)).add(
        static_cast<std::uint64_t>(flag));
  return h.value();
}

double diversity_score(const TaskDescription& desc, const MetaDatasetIndex& source) {
  const std::size_t n = desc.classes.size();
  if (n < 2) throw TaskError("diversity_score: need at least 2 classes, got " + std::to_string(n));
  const std::size_t d = source.dim();
  std::vector<std::vector<double>> centroids(n, std::vector<double>(d, 0.0));
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t count = 0;
    for (const auto* items : {&desc.support[c], &desc.query[c]}) {
      for (std::size_t item : *items) {
        const auto row = source.features(item);
        for (std::size_t j = 0; j < d; ++j) centroids[c][j] += row[j];
        ++count;
      }
    }
    if (count == 0) throw TaskError("diversity_score: class without items");
    for (double& x : centroids[c]) x /= static_cast<double>(count);
  }
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = centroids[a][j] - centroids[b][j];
        sq += diff * diff;
      }
      total += std::sqrt(sq);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

std::string_view to_string(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::uniform: return "uniform";
    case SamplerKind::low_diversity: return "low_diversity";
    case SamplerKind::high_diversity: return "high_diversity";
    case SamplerKind::adaptive: return "adaptive";
  }
  return "?";
}

SamplerKind parse_sampler(std::string_view name) {
  for (auto k : {SamplerKind::uniform, SamplerKind::low_diversity, SamplerKind::high_diversity,
                 SamplerKind::adaptive})
    if (to_string(k) == name) return k;
  throw TaskError("unknown sampler '" + std::string(name) + "'");
}

void LossTracker::observe(std::uint64_t signature, double loss) {
  const auto [it, inserted] = ema_.try_emplace(signature, loss);
  if (!inserted) it->second = kDecay * it->second + (1.0 - kDecay) * loss;
}

std::optional<double> LossTracker::ema(std::uint64_t signature) const {
  const auto it = ema_.find(signature);
  if (it == ema_.end()) return std::nullopt;
  return it->second;
}

double LossTracker::max_ema() const {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& [sig, v] : ema_) best = std::max(best, v);
  return best;
}

TaskSampler::TaskSampler(SamplerKind kind, std::uint64_t seed) : kind_(kind), rng_(seed) {}

TaskSampler sampler_select(SamplerKind kind, std::uint64_t seed) { return TaskSampler(kind, seed); }

std::vector<std::size_t> TaskSampler::candidates(std::size_t length) {
  std::vector<std::size_t> out;
  if (length <= kCandidatePool) {
    out.resize(length);
    std::iota(out.begin(), out.end(), std::size_t{0});
  } else {
    for (std::size_t i = 0; i < kCandidatePool; ++i) out.push_back(uniform_index(rng_, length));
  }
  return out;
}

std::size_t TaskSampler::next(std::size_t length, const Score& diversity, const Feedback& loss) {
  if (length == 0) throw TaskError("sampler: empty dataset");
  switch (kind_) {
    case SamplerKind::uniform:
      return uniform_index(rng_, length);

    case SamplerKind::low_diversity:
    case SamplerKind::high_diversity: {
      if (!diversity) throw TaskError("sampler: diversity sampler needs a scoring callback");
      const auto cand = candidates(length);
      std::vector<std::pair<double, std::size_t>> scored;
      for (std::size_t i : cand) scored.emplace_back(diversity(i), i);
      std::stable_sort(scored.begin(), scored.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      const std::size_t q = (scored.size() + 3) / 4;
      const std::size_t pick = uniform_index(rng_, q);
      return kind_ == SamplerKind::low_diversity ? scored[pick].second
                                                 : scored[scored.size() - 1 - pick].second;
    }

    case SamplerKind::adaptive: {
      if (!loss) throw TaskError("sampler: adaptive sampler needs a feedback callback");
      const auto cand = candidates(length);
      std::vector<std::optional<double>> seen;
      double fallback = -std::numeric_limits<double>::infinity();
      for (std::size_t i : cand) {
        seen.push_back(loss(i));
        if (seen.back()) fallback = std::max(fallback, *seen.back());
      }
      if (!std::isfinite(fallback)) return cand[uniform_index(rng_, cand.size())];
      std::vector<double> weights;
      for (const auto& s : seen) weights.push_back(s.value_or(fallback) / kTemperature);
      const double top = *std::max_element(weights.begin(), weights.end());
      for (double& w : weights) w = std::exp(w - top);
      std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
      return cand[dist(rng_)];
    }
  }
  return 0;
}

TaskDataset::TaskDataset(std::shared_ptr<const MetaDatasetIndex> source,
                         std::vector<TaskTransform> transforms, std::int64_t num_tasks,
                         std::uint64_t seed, SamplerKind sampler)
    : source_(std::move(source)),
      num_tasks_(num_tasks),
      seed_(seed),
      fresh_rng_(mix_seed(seed, 0x66726573)),
      sampler_(sampler, mix_seed(seed, 0x73616d70)) {
  if (!source_) throw TaskError("task dataset: no source");
  if (num_tasks == 0 || num_tasks < -1)
    throw TaskError("task dataset: num_tasks must be >= 1 or -1, got " + std::to_string(num_tasks));

  // NWays, KShots and LoadData are required, in that relative order.
  int stage = 0;
  std::optional<DataSplit> split;
  for (const auto& t : transforms) {
    if (const auto* nw = std::get_if<NWays>(&t)) {
      if (stage != 0) throw TaskError("task dataset: NWays must come first");
      if (nw->n < 2) throw TaskError("task dataset: NWays needs n >= 2");
      n_way_ = nw->n;
      stage = 1;
    } else if (const auto* ks = std::get_if<KShots>(&t)) {
      if (stage != 1) throw TaskError("task dataset: KShots must follow NWays");
      if (ks->k < 1) throw TaskError("task dataset: KShots needs k >= 1");
      k_shot_ = ks->k;
      stage = 2;
    } else if (std::holds_alternative<LoadData>(t)) {
      if (stage != 2) throw TaskError("task dataset: LoadData must follow NWays and KShots");
      stage = 3;
    } else if (const auto* ds = std::get_if<DataSplit>(&t)) {
      if (ds->t == 0) throw TaskError("task dataset: DataSplit needs t > 0");
      split = *ds;
    } else {
      label_free_ = true;
    }
  }
  if (stage != 3) throw TaskError("task dataset: transforms must include NWays, KShots, LoadData");
  const ShotSplit shots = split_shots(k_shot_, split);
  k_shot_ = shots.support;
  query_shots_ = shots.query;
}

TaskDescription TaskDataset::draw(Rng& rng) const {
  const std::size_t per_class = k_shot_ + query_shots_;
  std::vector<std::size_t> eligible;
  const auto& classes = source_->classes();
  for (std::size_t c = 0; c < classes.size(); ++c)
    if (source_->items_of(classes[c]).size() >= per_class) eligible.push_back(c);
  if (n_way_ > classes.size())
    throw TaskError("task dataset: " + std::to_string(n_way_) + "-way tasks need " +
                    std::to_string(n_way_) + " classes, source has " +
                    std::to_string(classes.size()));
  if (n_way_ > eligible.size())
    throw TaskError("task dataset: only " + std::to_string(eligible.size()) + " classes have " +
                    std::to_string(per_class) + " items, need " + std::to_string(n_way_));

  TaskDescription desc;
  for (std::size_t c : choose(rng, eligible, n_way_)) {
    const std::int64_t cls = classes[c];
    const auto& items = source_->items_of(cls);
    std::vector<std::size_t> pos(items.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::vector<std::size_t> picked;
    for (std::size_t p : choose(rng, std::move(pos), per_class)) picked.push_back(items[p]);
    desc.classes.push_back(cls);
    desc.support.emplace_back(picked.begin(), picked.begin() + k_shot_);
    desc.query.emplace_back(picked.begin() + k_shot_, picked.end());
  }
  desc.signature = task_signature(desc);
  return desc;
}

const TaskDescription& TaskDataset::description(std::size_t i) {
  if (i >= length())
    throw TaskError("task dataset: index " + std::to_string(i) + " out of range [0, " +
                    std::to_string(length()) + ")");
  if (num_tasks_ < 0) throw TaskError("task dataset: descriptions are not cached when num_tasks is -1");
  const auto it = cache_.find(i);
  if (it != cache_.end()) return it->second;
  Rng rng(mix_seed(seed_, 0x696e6478, i));
  return cache_.emplace(i, draw(rng)).first->second;
}

Episode TaskDataset::materialize(const TaskDescription& desc) const {
  std::vector<std::size_t> s_items, q_items;
  std::vector<double> s_labels, q_labels;
  for (std::size_t c = 0; c < desc.classes.size(); ++c) {
    for (std::size_t item : desc.support[c]) {
      s_items.push_back(item);
      s_labels.push_back(static_cast<double>(c));
    }
    for (std::size_t item : desc.query[c]) {
      q_items.push_back(item);
      q_labels.push_back(static_cast<double>(c));
    }
  }
  Episode ep;
  ep.support_x = gather_rows(*source_, s_items);
  ep.support_y = ag::Tensor({s_items.size()}, std::move(s_labels));
  ep.query_x = gather_rows(*source_, q_items);
  ep.query_y = ag::Tensor({q_items.size()}, std::move(q_labels));
  ep.n_way = desc.classes.size();
  ep.k_shot = desc.support.empty() ? 0 : desc.support[0].size();
  ep.signature = desc.signature;
  return label_free_ ? tasks::label_free(ep) : ep;
}

Episode TaskDataset::index(std::size_t i) {
  if (num_tasks_ < 0) {
    if (i != 0) throw TaskError("task dataset: index " + std::to_string(i) + " out of range [0, 1)");
    return sample();
  }
  return materialize(description(i));
}

Episode TaskDataset::sample() {
  if (num_tasks_ < 0) {
    last_index_ = 0;
    return materialize(draw(fresh_rng_));
  }
  auto score = [this](std::size_t i) { return diversity_score(description(i), *source_); };
  auto feedback = [this](std::size_t i) -> std::optional<double> {
    const auto it = cache_.find(i);
    if (it == cache_.end()) return std::nullopt;
    return losses_.ema(label_free_ ? mix_seed(it->second.signature, kLabelFreeTag)
                                   : it->second.signature);
  };
  last_index_ = sampler_.next(length(), score, feedback);
  return index(last_index_);
}

Episode label_free(const Episode& episode) {
  if (episode.label_free) return episode;
  const std::size_t s = episode.support_x.dim(0);
  std::vector<double> ids(s);
  std::iota(ids.begin(), ids.end(), 0.0);
  Episode out;
  out.support_x = episode.support_x;
  out.support_y = ag::Tensor({s}, ids);
  out.query_x = episode.support_x;
  out.query_y = ag::Tensor({s}, std::move(ids));
  out.n_way = s;
  out.k_shot = 1;
  out.signature = mix_seed(episode.signature, kLabelFreeTag);
  out.label_free = true;
  return out;
}

Blobs make_blobs(const BlobsSpec& spec, std::uint64_t seed) {
  if (spec.classes == 0 || spec.dim == 0 || spec.per_class == 0)
    throw TaskError("blobs: classes, dim and per_class must be positive");
  if (!(spec.centroid_spread > 0.0) || spec.noise < 0.0)
    throw TaskError("blobs: centroid spread must be positive and noise nonnegative");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Blobs out;
  out.data.dim = spec.dim;
  for (std::size_t i = 0; i < spec.classes * spec.dim; ++i)
    out.centroids.push_back(spec.centroid_spread * normal(rng));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t r = 0; r < spec.per_class; ++r) {
      for (std::size_t j = 0; j < spec.dim; ++j)
        out.data.features.push_back(out.centroids[c * spec.dim + j] + spec.noise * normal(rng));
      out.data.labels.push_back(static_cast<std::int64_t>(c));
    }
  }
  return out;
}

SinusoidFamily::SinusoidFamily(SinusoidSpec spec) : spec_(spec) {
  if (!(spec_.amp_hi > spec_.amp_lo) || !(spec_.phase_hi > spec_.phase_lo) ||
      !(spec_.x_hi > spec_.x_lo))
    throw TaskError("sinusoid: amplitude, phase and input ranges must have positive width");
}

SinusoidFamily::Task SinusoidFamily::draw(Rng& rng) const {
  const double a = std::uniform_real_distribution<double>(spec_.amp_lo, spec_.amp_hi)(rng);
  const double p = std::uniform_real_distribution<double>(spec_.phase_lo, spec_.phase_hi)(rng);
  return {a, p};
}

double SinusoidFamily::eval(const Task& task, double x) {
  return task.amplitude * std::sin(x + task.phase);
}

Episode SinusoidFamily::episode(const Task& task, std::size_t support, std::size_t query, Rng& rng,
                                bool forecast) const {
  const double mid = 0.5 * (spec_.x_lo + spec_.x_hi);
  std::uniform_real_distribution<double> s_dist(spec_.x_lo, forecast ? mid : spec_.x_hi);
  std::uniform_real_distribution<double> q_dist(forecast ? mid : spec_.x_lo, spec_.x_hi);
  StableHash h;
  h.add(std::bit_cast<std::uint64_t>(task.amplitude)).add(std::bit_cast<std::uint64_t>(task.phase));
  auto make = [&](std::size_t n, auto& dist, ag::Tensor& xs, ag::Tensor& ys) {
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = dist(rng);
      y[i] = eval(task, x[i]);
      h.add(std::bit_cast<std::uint64_t>(x[i]));
    }
    xs = ag::Tensor({n, 1}, std::move(x));
    ys = ag::Tensor({n, 1}, std::move(y));
  };
  Episode ep;
  make(support, s_dist, ep.support_x, ep.support_y);
  make(query, q_dist, ep.query_x, ep.query_y);
  ep.n_way = 1;
  ep.k_shot = support;
  ep.signature = h.value();
  return ep;
}

}  // namespace metaforge::tasks
