#include "metaforge/meta.hpp"

#include <cmath>

#include "metaforge/random.hpp"

namespace metaforge::meta {

using ag::Tensor;
using learners::Backbone;
using tasks::Episode;

namespace {

std::vector<std::size_t> support_labels(const Episode& ep) {
  std::vector<std::size_t> out;
  for (double v : ep.support_y.data()) {
    if (!(v >= 0.0) || v >= static_cast<double>(ep.n_way))
      throw MetaError("metric learner: support label " + std::to_string(v) + " outside 0.." +
                      std::to_string(ep.n_way - 1));
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

// Row-wise L2 normalization; rows must be nonzero.
Tensor normalize_rows(const Tensor& x, const char* what) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    if (s == 0.0)
      throw MetaError(std::string("matching network: zero-norm ") + what + " embedding " +
                      std::to_string(i));
  }
  const Tensor norms = ag::sqrt(ag::matmul(ag::square(x), Tensor::ones({d, 1})));
  return ag::div(x, ag::matmul(norms, Tensor::ones({1, d})));
}

ParamSet joined(const ParamSet& a, const std::optional<ParamSet>& b) {
  ParamSet out = a;
  if (b)
    for (std::size_t i = 0; i < b->size(); ++i) out.add("lr:" + b->name(i), (*b)[i]);
  return out;
}

ParamSet mean_in_order(const std::vector<ParamSet>& parts) {
  ParamSet acc = zeros_like(parts.front());
  for (const auto& p : parts) acc = axpy(1.0, p, acc);
  return scaled(acc, 1.0 / static_cast<double>(parts.size()));
}

}  // namespace

PartitionMask PartitionMask::final_layer(const ParamSet& params) {
  PartitionMask m;
  for (const auto& name : params.names())
    (name.rfind("head.", 0) == 0 ? m.head : m.body).insert(name);
  return m;
}

PartitionMask PartitionMask::all_head(const ParamSet& params) {
  PartitionMask m;
  m.head.insert(params.names().begin(), params.names().end());
  return m;
}

void PartitionMask::validate(const ParamSet& params) const {
  for (const auto& name : head)
    if (body.count(name)) throw MetaError("partition mask: '" + name + "' is both head and body");
  for (const auto& name : params.names())
    if (!head.count(name) && !body.count(name))
      throw MetaError("partition mask: parameter '" + name + "' is outside the mask");
  for (const auto* side : {&head, &body})
    for (const auto& name : *side)
      if (!params.find(name)) throw MetaError("partition mask: unknown parameter '" + name + "'");
}

std::vector<bool> PartitionMask::adapt_flags(const ParamSet& params) const {
  validate(params);
  std::vector<bool> flags;
  for (const auto& name : params.names()) flags.push_back(head.count(name) > 0);
  return flags;
}

MamlWrapper::MamlWrapper(Backbone model, MamlOptions options)
    : model_(std::move(model)), options_(options), requires_grad_(model_.params().size(), true) {
  if (!(options_.lr_alpha > 0.0)) throw MetaError("maml: lr_alpha must be > 0");
  if (!(options_.lr_beta > 0.0)) throw MetaError("maml: lr_beta must be > 0");
}

void MamlWrapper::set_requires_grad(std::string_view name, bool requires_grad) {
  const auto i = params().find(name);
  if (!i) throw MetaError("maml: unknown parameter '" + std::string(name) + "'");
  requires_grad_[*i] = requires_grad;
}

Clone MamlWrapper::clone(const ag::Tape& tape) const {
  ParamSet lineage;
  for (std::size_t i = 0; i < params().size(); ++i)
    lineage.add(params().name(i), requires_grad_[i] ? tape.leaf(params()[i]) : params()[i].detach());
  ParamSet working = lineage;
  return Clone(*this, std::move(lineage), std::move(working));
}

Clone::Clone(const MamlWrapper& owner, ParamSet lineage, ParamSet params)
    : owner_(&owner), lineage_(std::move(lineage)), params_(std::move(params)) {}

Tensor Clone::forward(const Tensor& x) const { return owner_->model().forward(x, params_); }

void Clone::adapt(const Tensor& loss) { adapt(loss, PartitionMask::all_head(params_)); }

void Clone::adapt(const Tensor& loss, const PartitionMask& mask) {
  strategies::InnerLoop inner;
  inner.alpha = owner_->options().lr_alpha;
  inner.adapt = mask.adapt_flags(params_);
  inner.allow_unused = owner_->allow_unused();
  inner.allow_nograd = owner_->options().allow_nograd;
  params_ = strategies::sgd_step(params_, loss, inner, std::nullopt, !owner_->options().first_order);
  ++steps_;
}

Tensor protonet_logits(const Backbone& embedder, const ParamSet& params, const Episode& ep) {
  const auto labels = support_labels(ep);
  const std::size_t n = ep.n_way;
  const Tensor s = embedder.forward(ep.support_x, params);
  const Tensor q = embedder.forward(ep.query_x, params);
  const std::size_t ns = s.dim(0), nq = q.dim(0), d = s.dim(1);

  std::vector<double> counts(n, 0.0);
  for (std::size_t c : labels) counts[c] += 1.0;
  for (std::size_t c = 0; c < n; ++c)
    if (counts[c] == 0.0) throw MetaError("protonet: class " + std::to_string(c) + " has no support");
  std::vector<double> avg(n * ns, 0.0);
  for (std::size_t j = 0; j < ns; ++j) avg[labels[j] * ns + j] = 1.0 / counts[labels[j]];
  const Tensor protos = ag::matmul(Tensor({n, ns}, std::move(avg)), s);

  std::vector<std::size_t> qi, ci;
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t c = 0; c < n; ++c) {
      qi.push_back(i);
      ci.push_back(c);
    }
  const Tensor diff =
      ag::sub(ag::index_rows(q, std::move(qi)), ag::index_rows(protos, std::move(ci)));
  const Tensor d2 = ag::matmul(ag::square(diff), Tensor::ones({d, 1}));
  return ag::neg(ag::reshape(d2, {nq, n}));
}

Tensor matchingnet_scores(const Backbone& embedder, const ParamSet& params, const Episode& ep) {
  const auto labels = support_labels(ep);
  const std::size_t n = ep.n_way;
  const Tensor s = normalize_rows(embedder.forward(ep.support_x, params), "support");
  const Tensor q = normalize_rows(embedder.forward(ep.query_x, params), "query");
  const std::size_t ns = s.dim(0), nq = q.dim(0);

  const Tensor cos = ag::matmul(q, ag::transpose(s));
  // Cosines lie in [-1, 1], so a constant shift of 1 keeps exp bounded.
  const Tensor e = ag::exp(ag::sub(cos, Tensor::ones({nq, ns})));
  const Tensor z = ag::matmul(e, Tensor::ones({ns, 1}));
  const Tensor attn = ag::div(e, ag::matmul(z, Tensor::ones({1, ns})));
  std::vector<double> onehot(ns * n, 0.0);
  for (std::size_t j = 0; j < ns; ++j) onehot[j * n + labels[j]] = 1.0;
  return ag::matmul(attn, Tensor({ns, n}, std::move(onehot)));
}

std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::maml: return "maml";
    case Algorithm::fomaml: return "fomaml";
    case Algorithm::reptile: return "reptile";
    case Algorithm::metasgd: return "metasgd";
    case Algorithm::anil: return "anil";
    case Algorithm::protonet: return "protonet";
    case Algorithm::matchingnet: return "matchingnet";
  }
  return "?";
}

Algorithm parse_algorithm(std::string_view name) {
  for (auto a : {Algorithm::maml, Algorithm::fomaml, Algorithm::reptile, Algorithm::metasgd,
                 Algorithm::anil, Algorithm::protonet, Algorithm::matchingnet})
    if (to_string(a) == name) return a;
  throw MetaError("unknown algorithm '" + std::string(name) + "'");
}

bool is_metric(Algorithm a) { return a == Algorithm::protonet || a == Algorithm::matchingnet; }

void serial_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  for (std::size_t i = 0; i < n; ++i) body(i);
}

MetaModel::MetaModel(Backbone backbone, LearnerSpec spec)
    : backbone_(std::move(backbone)),
      spec_(std::move(spec)),
      strategy_(spec_.strategy),
      optimizer_(spec_.algorithm == Algorithm::reptile
                     ? strategies::OuterOptimizer::sgd(spec_.lr_beta > 0 ? spec_.lr_beta : 1.0)
                     : strategies::parse_optimizer(spec_.optimizer,
                                                   spec_.lr_beta > 0 ? spec_.lr_beta : 1.0)) {
  if (!(spec_.lr_alpha > 0.0)) throw MetaError("learner: lr_alpha must be > 0");
  if (!(spec_.lr_beta > 0.0)) throw MetaError("learner: lr_beta must be > 0");
  strategies::validate(strategy_);
  const bool first_order = spec_.first_order || spec_.algorithm == Algorithm::fomaml;
  if (first_order && strategy_.kind == strategies::StrategyKind::implicit)
    throw CompatibilityError("the implicit strategy cannot be combined with first_order");
  if (first_order && strategy_.kind == strategies::StrategyKind::unrolled)
    strategy_.kind = strategies::StrategyKind::first_order;
  if (spec_.algorithm == Algorithm::reptile && spec_.inner_steps == 0)
    throw MetaError("reptile: inner_steps must be >= 1");
  if (spec_.algorithm == Algorithm::metasgd) lrs_ = full_like(params(), spec_.lr_alpha);
  if (spec_.algorithm == Algorithm::anil)
    adapt_ = PartitionMask::final_layer(params()).adapt_flags(params());
  if (is_metric(spec_.algorithm) && spec_.loss != learners::LossKind::cross_entropy)
    throw CompatibilityError("metric learners train with the cross-entropy loss");
}

Tensor MetaModel::metric_logits(const ParamSet& params, const Episode& ep) const {
  if (spec_.algorithm == Algorithm::protonet) return protonet_logits(backbone_, params, ep);
  return ag::log(matchingnet_scores(backbone_, params, ep));
}

strategies::Problem MetaModel::problem(const Episode& ep, std::size_t inner_steps) const {
  strategies::Problem p;
  p.theta = params();
  p.lrs = lrs_;
  p.inner.steps = is_metric(spec_.algorithm) ? 0 : inner_steps;
  p.inner.alpha = spec_.lr_alpha;
  p.inner.adapt = adapt_;
  const Backbone bb = backbone_;
  const learners::LossKind kind = spec_.loss;
  if (is_metric(spec_.algorithm)) {
    p.query = [this, ep](const ParamSet& phi) {
      return learners::cross_entropy(metric_logits(phi, ep), ep.query_y);
    };
    p.support = p.query;
  } else {
    p.support = [bb, ep, kind](const ParamSet& phi) {
      return learners::loss(kind, bb.forward(ep.support_x, phi), ep.support_y);
    };
    p.query = [bb, ep, kind](const ParamSet& phi) {
      return learners::loss(kind, bb.forward(ep.query_x, phi), ep.query_y);
    };
  }
  return p;
}

strategies::OuterGrad MetaModel::episode_grad(const Episode& ep, std::uint64_t seed) const {
  const strategies::Problem p = problem(ep, spec_.inner_steps);
  if (spec_.algorithm == Algorithm::reptile) {
    const ParamSet phi = strategies::adapt(p);
    strategies::OuterGrad out;
    out.grad = axpy(-1.0, phi, params());
    out.query_loss = p.query(phi).item();
    return out;
  }
  strategies::StrategySpec s = strategy_;
  s.es.seed = seed;
  return strategies::outer_grad(s, p);
}

StepStats MetaModel::meta_step(std::span<const Episode> batch, std::uint64_t seed,
                               const ParallelFor& pf) {
  if (batch.empty()) throw MetaError("meta_step: empty batch");
  std::vector<strategies::OuterGrad> results(batch.size());
  pf(batch.size(), [&](std::size_t i) { results[i] = episode_grad(batch[i], mix_seed(seed, i)); });

  StepStats stats;
  std::vector<ParamSet> grads, lr_grads;
  for (const auto& r : results) {
    stats.query_loss += r.query_loss;
    stats.episode_losses.push_back(r.query_loss);
    stats.tape_generation = std::max(stats.tape_generation, r.tape_generation);
    grads.push_back(r.grad);
    if (r.lr_grad) lr_grads.push_back(*r.lr_grad);
  }
  stats.query_loss /= static_cast<double>(results.size());
  stats.grad = mean_in_order(grads);
  if (lrs_) stats.lr_grad = mean_in_order(lr_grads);

  const ParamSet updated = optimizer_.step(joined(params(), lrs_), joined(stats.grad, stats.lr_grad));
  ParamSet theta, lrs;
  for (std::size_t i = 0; i < updated.size(); ++i) {
    if (i < params().size()) {
      theta.add(updated.name(i), updated[i]);
    } else {
      lrs.add(params().name(i - params().size()), updated[i]);
    }
  }
  backbone_ = backbone_.with_params(std::move(theta));
  if (lrs_) lrs_ = std::move(lrs);
  return stats;
}

Tensor MetaModel::predict(const Episode& ep, std::size_t steps) const {
  if (is_metric(spec_.algorithm)) return metric_logits(params(), ep);
  const ParamSet phi = strategies::adapt(problem(ep, steps));
  return backbone_.forward(ep.query_x, phi);
}

std::vector<Tensor> MetaModel::predict_curve(const Episode& ep, std::size_t steps) const {
  std::vector<Tensor> out;
  if (is_metric(spec_.algorithm)) {
    out.assign(steps + 1, metric_logits(params(), ep));
    return out;
  }
  strategies::Problem p = problem(ep, 1);
  ParamSet phi = detach_all(params());
  for (std::size_t s = 0;; ++s) {
    out.push_back(backbone_.forward(ep.query_x, phi));
    if (s == steps) break;
    p.theta = phi;
    phi = strategies::adapt(p);
  }
  return out;
}

ParamSet reptile_step(const Backbone& model, learners::LossKind loss, const ParamSet& theta,
                      std::span<const Episode> episodes, std::size_t inner_steps, double lr_inner,
                      double lr_outer) {
  if (inner_steps == 0) throw MetaError("reptile: inner_steps must be >= 1");
  if (episodes.empty()) throw MetaError("reptile: empty batch");
  std::vector<ParamSet> deltas;
  for (const Episode& ep : episodes) {
    strategies::Problem p;
    p.theta = theta;
    p.inner.steps = inner_steps;
    p.inner.alpha = lr_inner;
    p.support = [&](const ParamSet& phi) {
      return learners::loss(loss, model.forward(ep.support_x, phi), ep.support_y);
    };
    p.query = p.support;
    deltas.push_back(axpy(-1.0, theta, strategies::adapt(p)));
  }
  return axpy(lr_outer, mean_in_order(deltas), theta);
}

}  // namespace metaforge::meta
