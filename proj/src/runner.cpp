#include "metaforge/runner.hpp"

#include <chrono>
#include <cstring>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "metaforge/dataset_io.hpp"
#include "metaforge/learners.hpp"
#include "metaforge/random.hpp"

namespace metaforge::runner {

using nlohmann::json;
using tasks::Episode;

RunAborted::RunAborted(std::size_t iteration)
    : RunError("run aborted: non-finite outer loss at iteration " + std::to_string(iteration)),
      iteration_(iteration) {}

DeviceReport device_check(std::size_t cores) {
  DeviceReport d;
  if (cores == 0) cores = std::thread::hardware_concurrency();
  d.logical_cores = cores == 0 ? 1 : cores;
  d.modes = {"serial"};
  if (d.logical_cores > 1) d.modes.push_back("parallel");
  d.max_threads = d.logical_cores;
  return d;
}

json to_json(const DeviceReport& d) {
  return {{"logical_cores", d.logical_cores},
          {"modes", d.modes},
          {"max_threads", d.max_threads},
          {"accelerator", d.accelerator}};
}

json to_json(const RunReport& r) {
  return {{"config", r.config},
          {"seed", r.seed},
          {"losses", r.losses},
          {"eval", {{"metric", r.eval.metric},
                    {"pre", r.eval.pre},
                    {"post", r.eval.post},
                    {"curve", r.eval.curve}}},
          {"wall_seconds", r.wall_seconds},
          {"parallel", r.parallel},
          {"episodes_consumed", r.episodes_consumed}};
}

RunReport report_from_json(const json& doc) {
  try {
    RunReport r;
    r.config = doc.at("config");
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.losses = doc.at("losses").get<std::vector<double>>();
    const json& e = doc.at("eval");
    r.eval.metric = e.at("metric").get<std::string>();
    r.eval.pre = e.at("pre").get<double>();
    r.eval.post = e.at("post").get<double>();
    r.eval.curve = e.at("curve").get<std::vector<double>>();
    r.wall_seconds = doc.at("wall_seconds").get<double>();
    r.parallel = doc.at("parallel").get<std::size_t>();
    r.episodes_consumed = doc.value("episodes_consumed", std::size_t{0});
    return r;
  } catch (const json::exception& e) {
    throw RunError(std::string("malformed run report: ") + e.what());
  }
}

bool same_metrics(const RunReport& a, const RunReport& b) {
  auto bits = [](const std::vector<double>& v) {
    std::vector<std::uint64_t> out;
    for (double d : v) {
      std::uint64_t u;
      std::memcpy(&u, &d, sizeof u);
      out.push_back(u);
    }
    return out;
  };
  return a.config == b.config && a.seed == b.seed && bits(a.losses) == bits(b.losses) &&
         a.eval.metric == b.eval.metric && bits({a.eval.pre, a.eval.post}) ==
         bits({b.eval.pre, b.eval.post}) && bits(a.eval.curve) == bits(b.eval.curve) &&
         a.episodes_consumed == b.episodes_consumed;
}

meta::ParallelFor parallel_for(std::size_t threads) {
  if (threads <= 1) return meta::serial_for;
  return [threads](std::size_t n, const std::function<void(std::size_t)>& body) {
    const std::size_t workers = std::min(threads, n);
    if (workers <= 1) return meta::serial_for(n, body);
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
          try {
            for (std::size_t i = lo; i < hi; ++i) body(i);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  };
}

namespace {

constexpr std::uint64_t kDataStream = 1;
constexpr std::uint64_t kTrainStream = 2;
constexpr std::uint64_t kEvalStream = 3;
constexpr std::uint64_t kInitStream = 4;
constexpr std::uint64_t kStepStream = 5;
constexpr std::uint64_t kPoolStream = 6;

class TaskSource {
 public:
  virtual ~TaskSource() = default;
  virtual Episode train() = 0;
  virtual void feedback(const Episode&, double) {}
  virtual std::size_t in_dim() const = 0;
  std::vector<Episode> eval;
};

class SinusoidSource : public TaskSource {
 public:
  SinusoidSource(const Hyper& h, bool forecast, bool label_free, std::uint64_t seed)
      : forecast_(forecast), label_free_(label_free), rng_(mix_seed(seed, kTrainStream)) {
    if (h.split_t > 0) {
      const auto s = tasks::split_shots(h.k_shot, tasks::DataSplit{h.split_t, h.split_v});
      support_ = s.support;
      query_ = s.query;
    } else {
      support_ = h.k_shot;
      query_ = h.query_shots > 0 ? h.query_shots : h.k_shot;
    }
    if (query_ == 0) throw RunError("sinusoid tasks need at least one query point");
    if (h.num_tasks > 0) {
      Rng pool_rng(mix_seed(seed, kPoolStream));
      for (std::int64_t i = 0; i < h.num_tasks; ++i) pool_.push_back(family_.draw(pool_rng));
    }
    Rng eval_rng(mix_seed(seed, kEvalStream));
    for (std::size_t i = 0; i < h.eval_tasks; ++i)
      eval.push_back(make(family_.draw(eval_rng), eval_rng));
  }

  Episode train() override {
    tasks::SinusoidFamily::Task task;
    if (pool_.empty()) {
      task = family_.draw(rng_);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool_.size() - 1);
      task = pool_[pick(rng_)];
    }
    return make(task, rng_);
  }

  std::size_t in_dim() const override { return 1; }

 private:
  Episode make(const tasks::SinusoidFamily::Task& task, Rng& rng) const {
    Episode ep = family_.episode(task, support_, query_, rng, forecast_);
    return label_free_ ? tasks::label_free(ep) : ep;
  }

  tasks::SinusoidFamily family_;
  bool forecast_, label_free_;
  std::size_t support_ = 0, query_ = 0;
  std::vector<tasks::SinusoidFamily::Task> pool_;
  Rng rng_;
};

tasks::LabeledDataset subset(const tasks::LabeledDataset& data,
                             const std::set<std::int64_t>& classes) {
  tasks::LabeledDataset out;
  out.dim = data.dim;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!classes.count(data.labels[i])) continue;
    out.labels.push_back(data.labels[i]);
    const auto row = data.row(i);
    out.features.insert(out.features.end(), row.begin(), row.end());
  }
  return out;
}

class ClassSource : public TaskSource {
 public:
  ClassSource(const Hyper& h, bool label_free, std::uint64_t seed) {
    tasks::LabeledDataset data;
    if (!h.data_path.empty()) {
      data = tasks::load_dataset(h.data_path);
    } else {
      tasks::BlobsSpec spec;
      spec.classes = h.num_classes;
      spec.dim = h.feature_dim;
      spec.per_class = h.per_class;
      spec.centroid_spread = h.blob_spread;
      spec.noise = h.blob_noise;
      data = tasks::make_blobs(spec, mix_seed(seed, kDataStream)).data;
    }
    dim_ = data.dim;
    const tasks::MetaDatasetIndex all(data);
    const auto& classes = all.classes();
    // Held-out classes: the last max(n_way, 30%) in ascending label order.
    const std::size_t n_eval = std::max<std::size_t>(
        h.n_way, static_cast<std::size_t>(std::llround(0.3 * static_cast<double>(classes.size()))));
    if (classes.size() < n_eval + h.n_way)
      throw RunError("dataset has " + std::to_string(classes.size()) + " classes; " +
                     std::to_string(h.n_way) + "-way training with held-out evaluation needs " +
                     std::to_string(n_eval + h.n_way));
    const std::size_t n_train = classes.size() - n_eval;
    const std::set<std::int64_t> train_classes(classes.begin(), classes.begin() + n_train);
    const std::set<std::int64_t> eval_classes(classes.begin() + n_train, classes.end());

    std::vector<tasks::TaskTransform> transforms = {tasks::NWays{h.n_way},
                                                    tasks::KShots{h.k_shot}, tasks::LoadData{}};
    if (h.split_t > 0) transforms.push_back(tasks::DataSplit{h.split_t, h.split_v});
    if (label_free) transforms.push_back(tasks::LabelFree{});

    train_ = std::make_unique<tasks::TaskDataset>(
        std::make_shared<const tasks::MetaDatasetIndex>(subset(data, train_classes)), transforms,
        h.num_tasks, mix_seed(seed, kTrainStream), tasks::parse_sampler(h.sampler));
    tasks::TaskDataset held_out(
        std::make_shared<const tasks::MetaDatasetIndex>(subset(data, eval_classes)), transforms,
        static_cast<std::int64_t>(h.eval_tasks), mix_seed(seed, kEvalStream));
    for (std::size_t i = 0; i < h.eval_tasks; ++i) eval.push_back(held_out.index(i));
  }

  Episode train() override { return train_->sample(); }
  void feedback(const Episode& ep, double loss) override { train_->report_loss(ep.signature, loss); }
  std::size_t in_dim() const override { return dim_; }

 private:
  std::size_t dim_ = 0;
  std::unique_ptr<tasks::TaskDataset> train_;
};

strategies::StrategySpec strategy_of(const Selection& sel, const Hyper& h) {
  strategies::StrategySpec s;
  const auto& m = sel.at(Slot::optimization_strategy);
  if (m.has("implicit")) s.kind = strategies::StrategyKind::implicit;
  if (m.has("unrolled")) s.kind = strategies::StrategyKind::unrolled;
  if (m.has("first_order")) s.kind = strategies::StrategyKind::first_order;
  if (m.has("es")) s.kind = strategies::StrategyKind::es;
  s.implicit = {h.lambda, h.cg_iters, h.cg_tol};
  s.es.sigma = h.sigma;
  s.es.samples = h.es_samples;
  s.es.antithetic = h.antithetic;
  return s;
}

learners::LossKind loss_of(const Selection& sel) {
  const auto& b = sel.at(Slot::base_learner);
  if (b.has("loss:mse")) return learners::LossKind::mse;
  if (b.has("loss:contrastive")) return learners::LossKind::contrastive;
  return learners::LossKind::cross_entropy;
}

double metric_value(const std::string& metric, const ag::Tensor& pred, const Episode& ep) {
  if (metric == "mse") return learners::mse(pred, ep.query_y).item();
  if (metric == "accuracy") return learners::accuracy(pred, ep.query_y);
  return learners::contrastive(pred, ep.query_y).item();
}

}  // namespace

RunReport run(const PipelineConfig& cfg, const RunOptions& options) {
  CompatReport compat = check_compat(cfg);
  if (!compat.ok()) throw CompatError(std::move(compat));
  const auto start = std::chrono::steady_clock::now();
  const Selection sel = select(cfg);
  const Hyper& h = cfg.hyper;
  const std::uint64_t seed = options.seed.value_or(cfg.seed);
  const bool parallel_method = sel.at(Slot::training_method).has("parallel");
  std::size_t threads = options.threads.value_or(parallel_method ? cfg.parallel : 1);
  if (threads == 0) threads = 1;

  const bool label_free = cfg.label_free || sel.at(Slot::task_construction).has("label_free");
  const auto& task = sel.at(Slot::task_construction);
  std::unique_ptr<TaskSource> source;
  if (task.has("regression") || task.has("prediction")) {
    source = std::make_unique<SinusoidSource>(h, task.has("prediction"), label_free, seed);
  } else {
    source = std::make_unique<ClassSource>(h, label_free, seed);
  }

  meta::LearnerSpec spec;
  spec.algorithm = meta::parse_algorithm(resolved_algorithm(sel));
  spec.loss = loss_of(sel);
  spec.inner_steps = h.inner_steps;
  spec.lr_alpha = h.lr_alpha;
  spec.lr_beta = h.lr_beta;
  spec.first_order = h.first_order;
  spec.strategy = strategy_of(sel, h);
  spec.strategy.es.seed = mix_seed(seed, kStepStream);
  spec.optimizer = h.optimizer;

  learners::BackboneOptions bo;
  bo.in_dim = source->in_dim();
  if (label_free || meta::is_metric(spec.algorithm)) {
    bo.out_dim = h.embed_dim;
  } else if (spec.loss == learners::LossKind::mse) {
    bo.out_dim = 1;
  } else {
    bo.out_dim = h.n_way;
  }
  bo.hidden = h.hidden;
  bo.activation = learners::parse_activation(h.activation);
  bo.conv_blocks = h.conv_blocks;
  bo.conv_channels = h.conv_channels;
  bo.seed = mix_seed(seed, kInitStream);
  const bool conv = sel.at(Slot::backbone).key == "CONVN";
  meta::MetaModel model(conv ? learners::Backbone::conv(bo) : learners::Backbone::mlp(bo), spec);

  RunReport report;
  report.config = config_to_json(cfg);
  report.seed = seed;
  report.parallel = threads;
  const auto pf = parallel_for(threads);
  for (std::size_t it = 0; it < h.iterations; ++it) {
    if (options.cancel && options.cancel->load()) throw RunCancelled("run cancelled");
    std::vector<Episode> batch;
    for (std::size_t b = 0; b < h.meta_batch; ++b) batch.push_back(source->train());
    const auto stats = model.meta_step(batch, mix_seed(seed, kStepStream, it), pf);
    if (!std::isfinite(stats.query_loss)) throw RunAborted(it);
    for (std::size_t b = 0; b < batch.size(); ++b) source->feedback(batch[b], stats.episode_losses[b]);
    report.losses.push_back(stats.query_loss);
    report.episodes_consumed += batch.size();
    if (options.on_iteration) options.on_iteration(it, stats.query_loss);
  }

  report.eval.metric = label_free ? "contrastive"
                       : spec.loss == learners::LossKind::mse ? "mse"
                                                               : "accuracy";
  report.eval.curve.assign(h.eval_steps + 1, 0.0);
  for (const Episode& ep : source->eval) {
    const auto preds = model.predict_curve(ep, h.eval_steps);
    for (std::size_t s = 0; s < preds.size(); ++s)
      report.eval.curve[s] += metric_value(report.eval.metric, preds[s], ep);
  }
  for (double& v : report.eval.curve) v /= static_cast<double>(source->eval.size());
  report.eval.pre = report.eval.curve.front();
  report.eval.post = report.eval.curve.back();
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void write_report(const std::filesystem::path& path, const RunReport& report) {
  const std::string text = to_json(report).dump(2) + "\n";
  std::filesystem::path tmp = path;
  tmp += ".tmp-" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RunError("cannot write '" + tmp.string() + "'");
    out << text;
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw RunError("cannot write '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw RunError("cannot move report into place: " + ec.message());
  }
}

RunReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot open '" + path.string() + "'");
  try {
    return report_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw RunError("malformed run report '" + path.string() + "': " + e.what());
  }
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

std::string render_report(const RunReport& r) {
  std::vector<std::pair<std::string, std::string>> rows = {
      {"seed", std::to_string(r.seed)},
      {"parallel", std::to_string(r.parallel)},
      {"iterations", std::to_string(r.losses.size())},
      {"episodes", std::to_string(r.episodes_consumed)},
      {"wall seconds", num(r.wall_seconds)},
  };
  if (!r.losses.empty()) {
    rows.push_back({"first loss", num(r.losses.front())});
    rows.push_back({"last loss", num(r.losses.back())});
  }
  rows.push_back({"metric", r.eval.metric});
  rows.push_back({"pre-adaptation", num(r.eval.pre)});
  rows.push_back({"post-adaptation", num(r.eval.post)});

  std::size_t w = 0;
  for (const auto& [k, _] : rows) w = std::max(w, k.size());
  std::ostringstream os;
  for (const auto& [k, v] : rows) os << std::left << std::setw(static_cast<int>(w) + 2) << k << v << "\n";
  os << "\n" << std::left << std::setw(6) << "step" << r.eval.metric << "\n";
  for (std::size_t s = 0; s < r.eval.curve.size(); ++s)
    os << std::left << std::setw(6) << s << num(r.eval.curve[s]) << "\n";
  return os.str();
}

}  // namespace metaforge::runner
