#pragma once

// Compatibility rule table restated over canonical ids, and a generator of
// random valid configs.

#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "metaforge/config.hpp"
#include "metaforge/random.hpp"
#include "metaforge/registry.hpp"

namespace metaforge::testing {

inline std::vector<std::string> ids(Slot s) {
  std::vector<std::string> out;
  for (const auto& m : registry_list(s)) out.push_back(m.id);
  return out;
}

// Rule table restated over canonical ids, independent of descriptor tags.
inline std::vector<std::string> expected_rules(const PipelineConfig& c) {
  const auto& task = c.slot(Slot::task_construction);
  const auto& meta = c.slot(Slot::meta_learner);
  const auto& base = c.slot(Slot::base_learner);
  const auto& bb = c.slot(Slot::backbone);
  const auto& strat = c.slot(Slot::optimization_strategy);
  const auto& train = c.slot(Slot::training_method);
  const std::string& alg = c.hyper.algorithm;
  const bool lf = c.label_free || task == "+.tasklabelfree()";

  std::vector<std::string> out;
  if (task == ".taskrein()") out.push_back("R1");
  if (lf && base != ".baselearner()+.losscont()") out.push_back("R2");
  if (meta == ".metalearnerMe()" && base != ".baselearner()+.lossce()") out.push_back("R3");
  if (strat == ".optimizerIG()" && c.hyper.first_order) out.push_back("R4");
  if ((strat == ".optimizerIG()" || strat == ".optimizerDP()") && bb != "backbone = CONVN" &&
      bb != "backbone = MLP")
    out.push_back("R5");
  const std::set<std::string> unimplemented = {".metalearnerMo()", ".baselearner()+.lossq()",
                                               "backbone = VGG16", "backbone = RESNETN",
                                               "backbone = VIT", "train_gpu = N", "online"};
  for (const auto* id : {&task, &meta, &base, &bb, &strat, &train})
    if (unimplemented.count(*id)) out.push_back("R6");
  if (meta == ".metalearnerBaye()") out.push_back("R7");
  if (!lf) {
    const bool regression = task == ".dataload()+.taskre()" || task == ".dataload()+.taskpre()";
    if (regression && base != ".baselearner()+.lossmse()") out.push_back("R8");
    if (task == ".dataload()+.taskcl()" && base != ".baselearner()+.lossce()") out.push_back("R8");
  }
  if (!alg.empty()) {
    const std::set<std::string> init = {"maml", "fomaml", "reptile", "metasgd", "anil"};
    const std::set<std::string> metric = {"protonet", "matchingnet"};
    if ((meta == ".metalearnerOp()" || meta == ".metalearner()") && !init.count(alg))
      out.push_back("R9");
    if (meta == ".metalearnerMe()" && !metric.count(alg)) out.push_back("R9");
  }
  return out;
}

inline PipelineConfig random_config(Rng& rng) {
  auto pick = [&](const auto& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  auto count = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  auto real = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto coin = [&] { return std::bernoulli_distribution(0.5)(rng); };

  PipelineConfig c;
  for (Slot s : kSlots) c.slot(s) = pick(ids(s));
  c.label_free = coin();
  Hyper& h = c.hyper;
  h.algorithm = pick(std::vector<std::string>{"", "maml", "fomaml", "reptile", "metasgd", "anil",
                                              "protonet", "matchingnet"});
  h.n_way = count(2, 20);
  h.k_shot = count(1, 20);
  h.query_shots = count(0, 20);
  h.split_t = count(0, 9);
  h.split_v = h.split_t ? count(0, 9) : 0;
  h.lr_alpha = real(1e-6, 1.0);
  h.lr_beta = std::exp(real(-12, 0));
  h.inner_steps = count(0, 50);
  h.first_order = coin();
  h.lambda = real(1e-3, 1e6);
  h.cg_iters = count(1, 500);
  h.cg_tol = std::exp(real(-30, -2));
  h.sigma = real(1e-4, 2.0);
  h.antithetic = coin();
  h.es_samples = 2 * count(1, 5000);
  h.meta_batch = count(1, 64);
  h.iterations = count(0, 100000);
  h.eval_tasks = count(1, 1000);
  h.eval_steps = count(0, 50);
  h.hidden.assign(count(1, 4), 0);
  for (auto& w : h.hidden) w = count(1, 256);
  h.activation = pick(std::vector<std::string>{"tanh", "relu"});
  h.conv_blocks = count(1, 6);
  h.conv_channels = count(1, 64);
  h.embed_dim = count(1, 128);
  h.optimizer = pick(std::vector<std::string>{"sgd", "adam"});
  h.num_classes = count(2, 500);
  h.per_class = count(1, 100);
  h.feature_dim = count(1, 256);
  h.blob_spread = real(0.0, 50.0);
  h.blob_noise = real(1e-3, 10.0);
  h.num_tasks = coin() ? -1 : static_cast<std::int64_t>(count(1, 100000));
  h.sampler = pick(std::vector<std::string>{"uniform", "low_diversity", "high_diversity", "adaptive"});
  h.data_path = coin() ? "" : "data/set-" + std::to_string(count(0, 999)) + ".csv";
  c.seed = rng();
  if (c.slot(Slot::training_method) == ".parallel()") c.parallel = count(1, 64);
  return c;
}

}  // namespace metaforge::testing
