#pragma once

// Meta-learners: learned initializations (MAML, first-order MAML, MetaSGD,
// ANIL, Reptile) and learned metric spaces (ProtoNet, MatchingNet).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>

#include "metaforge/autograd.hpp"
#include "metaforge/learners.hpp"
#include "metaforge/params.hpp"
#include "metaforge/strategies.hpp"
#include "metaforge/tasks.hpp"

namespace metaforge::meta {

class MetaError : public Error {
 public:
  using Error::Error;
};

// A strategy that cannot be combined with the learner's flags.
class CompatibilityError : public MetaError {
 public:
  using MetaError::MetaError;
};

// Splits parameters into an inner-loop-adapted head and a frozen body.
struct PartitionMask {
  std::set<std::string> head;
  std::set<std::string> body;

  // Head = parameters whose name starts with "head.".
  static PartitionMask final_layer(const ParamSet& params);
  static PartitionMask all_head(const ParamSet& params);
  // Throws MetaError unless head and body are disjoint and cover exactly
  // the parameter names.
  void validate(const ParamSet& params) const;
  std::vector<bool> adapt_flags(const ParamSet& params) const;
};

struct MamlOptions {
  double lr_alpha = 0.01;
  double lr_beta = 0.001;
  bool first_order = false;
  // Defaults to allow_nograd when unset.
  std::optional<bool> allow_unused;
  bool allow_nograd = false;
};

class MamlWrapper;

// Differentiable working copy of a wrapper's parameters, confined to one
// tape. Adapting a clone never changes the wrapper.
class Clone {
 public:
  const ParamSet& params() const { return params_; }
  // The tracked copies of the meta-parameters this clone started from;
  // differentiate query losses with respect to these.
  const ParamSet& lineage() const { return lineage_; }
  std::size_t steps_taken() const { return steps_; }

  ag::Tensor forward(const ag::Tensor& x) const;
  // One inner SGD step on `loss`, which must be computed from params().
  void adapt(const ag::Tensor& loss);
  // Only head parameters of the mask move.
  void adapt(const ag::Tensor& loss, const PartitionMask& mask);

 private:
  friend class MamlWrapper;
  Clone(const MamlWrapper& owner, ParamSet lineage, ParamSet params);

  const MamlWrapper* owner_;
  ParamSet lineage_;
  ParamSet params_;
  std::size_t steps_ = 0;
};

class MamlWrapper {
 public:
  MamlWrapper(learners::Backbone model, MamlOptions options);

  const learners::Backbone& model() const { return model_; }
  const MamlOptions& options() const { return options_; }
  bool allow_unused() const { return options_.allow_unused.value_or(options_.allow_nograd); }
  const ParamSet& params() const { return model_.params(); }
  void set_params(ParamSet params) { model_ = model_.with_params(std::move(params)); }

  // Parameters marked as not requiring grad are cloned as constants.
  void set_requires_grad(std::string_view name, bool requires_grad);
  bool requires_grad(std::size_t index) const { return requires_grad_[index]; }

  // Second-order clones are the tracked meta-parameters themselves; first-
  // order clones are fresh leaves holding copies of them.
  Clone clone(const ag::Tape& tape) const;

 private:
  learners::Backbone model_;
  MamlOptions options_;
  std::vector<bool> requires_grad_;
};

// Query logits -|f(q) - prototype_c|^2 where prototypes are class means of
// the embedded support set.
ag::Tensor protonet_logits(const learners::Backbone& embedder, const ParamSet& params,
                           const tasks::Episode& episode);
// Per query, softmax attention over cosine similarities to the support set
// summed per class; rows sum to 1.
ag::Tensor matchingnet_scores(const learners::Backbone& embedder, const ParamSet& params,
                              const tasks::Episode& episode);

enum class Algorithm { maml, fomaml, reptile, metasgd, anil, protonet, matchingnet };

std::string_view to_string(Algorithm a);
Algorithm parse_algorithm(std::string_view name);
bool is_metric(Algorithm a);

struct LearnerSpec {
  Algorithm algorithm = Algorithm::maml;
  learners::LossKind loss = learners::LossKind::cross_entropy;
  std::size_t inner_steps = 1;
  double lr_alpha = 0.01;
  double lr_beta = 0.001;
  bool first_order = false;
  strategies::StrategySpec strategy;
  std::string optimizer = "adam";
};

using ParallelFor = std::function<void(std::size_t, const std::function<void(std::size_t)>&)>;
void serial_for(std::size_t n, const std::function<void(std::size_t)>& body);

struct StepStats {
  double query_loss = 0.0;  // mean over the batch, before the update
  std::vector<double> episode_losses;
  ParamSet grad;            // mean outer gradient (Reptile: mean of theta - phi)
  std::optional<ParamSet> lr_grad;
  int tape_generation = 1;
};

// A meta-learner bound to a backbone, ready for episodic training.
class MetaModel {
 public:
  MetaModel(learners::Backbone backbone, LearnerSpec spec);

  const LearnerSpec& spec() const { return spec_; }
  const learners::Backbone& backbone() const { return backbone_; }
  const ParamSet& params() const { return backbone_.params(); }
  const std::optional<ParamSet>& lrs() const { return lrs_; }
  // The strategy actually used (first_order replaces unrolled when the
  // first-order flag is set).
  strategies::StrategyKind effective_strategy() const { return strategy_.kind; }

  // Bi-level problem for one episode with the given number of inner steps.
  strategies::Problem problem(const tasks::Episode& episode, std::size_t inner_steps) const;

  // Outer gradient for one episode; no state change. `seed` drives ES.
  strategies::OuterGrad episode_grad(const tasks::Episode& episode, std::uint64_t seed) const;

  // Computes per-episode gradients through `pf`, averages them in episode
  // order and applies the outer update.
  StepStats meta_step(std::span<const tasks::Episode> batch, std::uint64_t seed,
                      const ParallelFor& pf = serial_for);

  // Query predictions after `steps` adaptation steps on the support set
  // (metric learners ignore steps and return class scores as logits).
  ag::Tensor predict(const tasks::Episode& episode, std::size_t steps) const;
  // predict(episode, s) for s = 0..steps, sharing the adaptation trajectory.
  std::vector<ag::Tensor> predict_curve(const tasks::Episode& episode, std::size_t steps) const;

 private:
  ag::Tensor metric_logits(const ParamSet& params, const tasks::Episode& episode) const;

  learners::Backbone backbone_;
  LearnerSpec spec_;
  strategies::StrategySpec strategy_;
  std::optional<ParamSet> lrs_;
  std::vector<bool> adapt_;
  strategies::OuterOptimizer optimizer_;
};

// theta + lr_outer * mean_e (phi_e - theta), phi_e from `inner_steps` plain
// SGD steps on episode e's support loss.
ParamSet reptile_step(const learners::Backbone& model, learners::LossKind loss,
                      const ParamSet& theta, std::span<const tasks::Episode> episodes,
                      std::size_t inner_steps, double lr_inner, double lr_outer);

}  // namespace metaforge::meta
